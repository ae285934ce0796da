use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dsr_core::config::Config;
use dsr_core::dsp;
use dsr_core::eval::{run_benchmark, BenchmarkOptions, SYSTEMS, SYSTEM_ABLATION, SYSTEM_FULL};
use dsr_core::pipeline::{build_corpus_from, ModelBundle, Paths, ReconstructOptions, Recipe};
use dsr_core::synthcorpus::{Corpus, Split};
use dsr_core::Error;

const ROOT_ENV: &str = "DSR_OUTPUT_ROOT";
const DEFAULT_ROOT: &str = "dsr_out";

#[derive(Parser, Debug)]
#[command(name = "dsr", version, about = "Dysarthric speech reconstruction on a synthetic corpus")]
struct Cli {
    /// Output root; defaults to $DSR_OUTPUT_ROOT, then ./dsr_out.
    #[arg(long, global = true)]
    root: Option<PathBuf>,
    /// Flat key=value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Config override, key=value; repeatable, applied after --config.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthetic corpus commands.
    Corpus {
        #[command(subcommand)]
        action: CorpusAction,
    },
    /// Training recipe commands.
    Train {
        #[command(subcommand)]
        action: TrainAction,
    },
    /// Reconstruct one WAV file with a trained bundle.
    Reconstruct {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Skip codec normalization of the prompt (ablation).
        #[arg(long)]
        no_normalize: bool,
    },
    /// Benchmark a bundle on a corpus split.
    Eval {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Corpus directory; defaults to the bundle's configured corpus.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Report directory; defaults to <bundle>/eval_<split>.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize an eval directory into summary.md.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum CorpusAction {
    Build,
}

#[derive(Subcommand, Debug)]
enum TrainAction {
    /// Run every stage, skipping current checkpoints.
    Recipe,
    /// Run one stage; its upstream checkpoints must be current.
    Stage { name: String },
}

fn root_dir(cli: &Cli) -> PathBuf {
    cli.root
        .clone()
        .or_else(|| std::env::var_os(ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_ROOT))
}

fn load_config(cli: &Cli) -> dsr_core::Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    cfg.apply_overrides(&cli.overrides)?;
    Ok(cfg)
}

fn snapshot(path: &Path, cfg: &Config) -> dsr_core::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, cfg.to_text())?;
    Ok(())
}

fn run(cli: &Cli) -> dsr_core::Result<()> {
    let root = root_dir(cli);
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Corpus { action: CorpusAction::Build } => {
            let paths = Paths::resolve(&cfg, &root)?;
            let corpus = build_corpus_from(&cfg, &paths)?;
            snapshot(&paths.corpus.join("config.txt"), &cfg)?;
            log::info!(
                "corpus at {} with {} rows",
                paths.corpus.display(),
                corpus.all_rows().count()
            );
        }
        Command::Train { action } => {
            let paths = Paths::resolve(&cfg, &root)?;
            let mut recipe = Recipe::new(cfg, paths);
            match action {
                TrainAction::Recipe => {
                    for (stage, outcome) in recipe.run()? {
                        log::info!("{stage}: {outcome:?}");
                    }
                }
                TrainAction::Stage { name } => recipe.run_stage(name)?,
            }
        }
        Command::Reconstruct {
            input,
            out,
            bundle,
            seed,
            no_normalize,
        } => {
            let wave = dsp::read_wav(input)?;
            let b = ModelBundle::load(bundle)?;
            let rec = b.reconstruct(
                &wave,
                &ReconstructOptions {
                    seed: *seed,
                    normalize: !no_normalize,
                    sampler: None,
                },
            )?;
            if let Some(dir) = out.parent() {
                fs::create_dir_all(dir)?;
            }
            dsp::write_wav(out, &rec.waveform)?;
            fs::write(
                out.with_extension("diagnostics.json"),
                serde_json::to_string_pretty(&rec.diagnostics)?,
            )?;
            snapshot(&out.with_extension("config.txt"), &b.config)?;
        }
        Command::Eval {
            bundle,
            split,
            corpus,
            out,
        } => {
            let split = Split::parse(split)?;
            let b = ModelBundle::load(bundle)?;
            let corpus_dir = match corpus {
                Some(c) => c.clone(),
                None => Paths::resolve(&b.config, &root)?.corpus,
            };
            let corpus = Corpus::load(&corpus_dir)?;
            let mut eval_cfg = b.config.clone();
            eval_cfg.apply_overrides(&cli.overrides)?;
            let opts = BenchmarkOptions {
                max_utterances: eval_cfg.usize("eval.max_utterances")?,
                seed: eval_cfg.u64("eval.seed")?,
            };
            let report = run_benchmark(&b, &corpus, split, &opts)?;
            let dir = out
                .clone()
                .unwrap_or_else(|| bundle.join(format!("eval_{}", split.name())));
            report.write(&dir)?;
            snapshot(&dir.join("config.txt"), &eval_cfg)?;
            log::info!("report written to {}", dir.display());
        }
        Command::Report { dir } => {
            let summary = summarize(dir)?;
            fs::write(dir.join("summary.md"), summary)?;
            log::info!("summary written to {}", dir.join("summary.md").display());
        }
    }
    Ok(())
}

fn summarize(dir: &Path) -> dsr_core::Result<String> {
    let path = dir.join("report.csv");
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path));
    }
    let csv = fs::read_to_string(&path)?;
    let mut out = String::from("| system | speaker | PER % | word acc proxy % | SV L1 | source |\n");
    out.push_str("|---|---|---|---|---|---|\n");
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(Error::Format(format!("bad report line {line:?}")));
        }
        out.push_str(&format!("| {} |\n", f.join(" | ")));
    }
    let pairs = fs::read_to_string(dir.join("pairs.csv")).unwrap_or_default();
    for system in [SYSTEM_FULL, SYSTEM_ABLATION] {
        let rows: Vec<(f64, f64)> = pairs
            .lines()
            .skip(1)
            .filter_map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                (f.len() == 6 && f[0] == system)
                    .then(|| Some((f[4].parse().ok()?, f[5].parse().ok()?)))
                    .flatten()
            })
            .collect();
        if !rows.is_empty() {
            let wins = rows.iter().filter(|(s, c)| s < c).count();
            out.push_str(&format!(
                "\n{system}: same-speaker distance smaller in {wins} of {} pairs\n",
                rows.len()
            ));
        }
    }
    let measured: Vec<&str> = SYSTEMS.to_vec();
    out.push_str(&format!("\nsystems: {}\n", measured.join(", ")));
    Ok(out)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let stage = e.stage().unwrap_or("-").to_string();
            let code = if matches!(e, Error::Config(_)) { 2 } else { 1 };
            let msg = e.to_string().replace('\n', " ");
            eprintln!("dsr: error stage={stage} {msg}");
            ExitCode::from(code)
        }
    }
}
