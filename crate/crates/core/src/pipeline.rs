//! Staged training recipe, model bundles and end-to-end reconstruction.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{train_codec, CodecConfig, CodecFrameSequence, CodecModel};
use crate::config::Config;
use crate::content::{
    decode_phonemes, extract_features, token_posteriors, token_spans, train_content,
    write_curve, BackendRegistry, ContentEncoderConfig, ContentEncoderModel, ContentTrainConfig,
    FeatureBackend, LabelledFeatures, TokenSpan,
};
use crate::diffusion::{
    train_generator, write_generator_curve, Generator, GeneratorConfig, GeneratorExample,
    NoiseSchedule, SamplerConfig,
};
use crate::dsp;
use crate::error::{Error, Result, StageContext};
use crate::speaker::{
    build_normal_set, enhancer_by_id, normalize_codec, train_sv, Enhancer, NormalCodecSet,
    NormalSetConfig, SpecStat, SvConfig, SvEmbedder, SvModel,
};
use crate::synthcorpus::{Corpus, CorpusConfig, ManifestRow, Split};

pub const STAGES: [&str; 6] = [
    "codec",
    "sv",
    "normal_set",
    "content_base",
    "content_finetune",
    "generator",
];

fn upstream(stage: &str) -> &'static [&'static str] {
    match stage {
        "sv" => &["codec"],
        "normal_set" => &["codec", "sv"],
        "content_finetune" => &["content_base"],
        "generator" => &["codec", "sv", "normal_set"],
        _ => &[],
    }
}

fn key_prefixes(stage: &str) -> &'static [&'static str] {
    const CORPUS: &str = "corpus.";
    match stage {
        "codec" => &[CORPUS, "codec."],
        "sv" => &["sv."],
        "normal_set" => &["normal_set."],
        "content_base" => &[
            CORPUS,
            "content.backend",
            "content.width",
            "content.layers",
            "content.kernel",
            "content.batch",
            "content.base_",
            "content.seed",
        ],
        "content_finetune" => &["content.finetune_", "recipe.target_speaker", "enhance.id"],
        "generator" => &["generator.", "diffusion.beta_"],
        _ => &[],
    }
}

/// Digest identifying a stage's inputs: its own keys plus every upstream
/// stage's digest.
pub fn stage_hash(cfg: &Config, stage: &str) -> String {
    let ups: Vec<String> = upstream(stage).iter().map(|u| stage_hash(cfg, u)).collect();
    let refs: Vec<&str> = ups.iter().map(String::as_str).collect();
    cfg.digest(stage, &refs, key_prefixes(stage))
}

#[derive(Debug, Serialize, Deserialize)]
struct StageRecord {
    stage: String,
    hash: String,
    seconds: f64,
}

/// Output locations resolved against an output root.
#[derive(Debug, Clone, PartialEq)]
pub struct Paths {
    pub corpus: PathBuf,
    pub recipe: PathBuf,
}

impl Paths {
    pub fn resolve(cfg: &Config, root: &Path) -> Result<Self> {
        Ok(Self {
            corpus: root.join(cfg.get("corpus.dir")?),
            recipe: root.join(cfg.get("recipe.dir")?),
        })
    }
}

pub fn corpus_config(cfg: &Config) -> Result<CorpusConfig> {
    Ok(CorpusConfig {
        speakers: cfg.usize("corpus.speakers")?,
        utterances: cfg.usize("corpus.utterances")?,
        severities: cfg.f64_list("corpus.severities")?,
        words: cfg.usize("corpus.words")?,
        min_len: cfg.usize("corpus.min_len")?,
        max_len: cfg.usize("corpus.max_len")?,
        dev_fraction: cfg.f64("corpus.dev_fraction")?,
        test_fraction: cfg.f64("corpus.test_fraction")?,
        seed: cfg.u64("corpus.seed")?,
    })
}

pub fn codec_config(cfg: &Config) -> Result<CodecConfig> {
    Ok(CodecConfig {
        latent_dim: cfg.usize("codec.latent_dim")?,
        stages: cfg.usize("codec.stages")?,
        codebook_size: cfg.usize("codec.codebook_size")?,
        kmeans_iters: cfg.usize("codec.kmeans_iters")?,
        max_frames: cfg.usize("codec.max_frames")?,
        griffin_lim_iters: cfg.usize("codec.griffin_lim_iters")?,
        seed: cfg.u64("codec.seed")?,
    })
}

pub fn sv_config(cfg: &Config) -> Result<SvConfig> {
    Ok(SvConfig {
        hidden: cfg.usize("sv.hidden")?,
        dim: cfg.usize("sv.dim")?,
        steps: cfg.usize("sv.steps")?,
        windows_per_speaker: cfg.usize("sv.windows_per_speaker")?,
        lr: cfg.f64("sv.lr")?,
        seed: cfg.u64("sv.seed")?,
    })
}

pub fn schedule(cfg: &Config) -> Result<NoiseSchedule> {
    Ok(NoiseSchedule {
        beta_min: cfg.f64("diffusion.beta_min")?,
        beta_max: cfg.f64("diffusion.beta_max")?,
    })
}

pub fn generator_config(cfg: &Config) -> Result<GeneratorConfig> {
    Ok(GeneratorConfig {
        hidden: cfg.usize("generator.hidden")?,
        blocks: cfg.usize("generator.blocks")?,
        dilation_cycle: cfg.usize("generator.dilation_cycle")?,
        heads: cfg.usize("generator.heads")?,
        prompt_blocks: cfg.usize("generator.prompt_blocks")?,
        steps: cfg.usize("generator.steps")?,
        batch: cfg.usize("generator.batch")?,
        lr: cfg.f64("generator.lr")?,
        crop: cfg.usize("generator.crop")?,
        prompt_frames: cfg.usize("generator.prompt_frames")?,
        t_min: cfg.f64("diffusion.t_min")?,
        sampler_steps: cfg.usize("diffusion.steps")?,
        schedule: schedule(cfg)?,
        seed: cfg.u64("generator.seed")?,
    })
}

pub fn sampler_config(cfg: &Config) -> Result<SamplerConfig> {
    Ok(SamplerConfig {
        steps: cfg.usize("diffusion.steps")?,
        t_min: cfg.f64("diffusion.t_min")?,
        temperature: cfg.f64("diffusion.temperature")?,
    })
}

/// Embedder by id; trained embedders load from `sv_path`.
pub fn embedder_by_id(
    id: &str,
    sv_path: &Path,
    input_dim: usize,
    sv: &SvConfig,
) -> Result<Box<dyn SvEmbedder>> {
    match id {
        "specstat" => Ok(Box::new(SpecStat)),
        "ge2e" => Ok(Box::new(SvModel::load(sv_path, input_dim, sv)?)),
        other => Err(Error::UnknownBackend {
            kind: "embedder",
            id: other.to_string(),
            registered: "ge2e, specstat".into(),
        }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOutcome {
    /// Checkpoint present with a matching hash.
    Skipped,
    Ran,
}

/// Runs stages against one corpus and recipe directory.
pub struct Recipe {
    pub cfg: Config,
    pub paths: Paths,
    corpus: Option<Corpus>,
    waves: BTreeMap<String, Vec<f64>>,
}

impl Recipe {
    pub fn new(cfg: Config, paths: Paths) -> Self {
        Self {
            cfg,
            paths,
            corpus: None,
            waves: BTreeMap::new(),
        }
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.paths.recipe.join(stage)
    }

    /// True when the stage checkpoint exists and was produced from the
    /// current configuration.
    pub fn is_current(&self, stage: &str) -> bool {
        let path = self.stage_dir(stage).join("stage.json");
        let Ok(text) = fs::read_to_string(path) else {
            return false;
        };
        serde_json::from_str::<StageRecord>(&text)
            .map(|r| r.hash == stage_hash(&self.cfg, stage))
            .unwrap_or(false)
    }

    fn corpus(&mut self) -> Result<&Corpus> {
        if self.corpus.is_none() {
            if !self.paths.corpus.join("manifest.tsv").exists() {
                return Err(Error::MissingCheckpoint(self.paths.corpus.clone()));
            }
            self.corpus = Some(Corpus::load(&self.paths.corpus)?);
        }
        Ok(self.corpus.as_ref().unwrap())
    }

    fn rows(&mut self, split: Split, normal: bool) -> Result<Vec<ManifestRow>> {
        let target = self.cfg.get("recipe.target_speaker")?.to_string();
        Ok(self
            .corpus()?
            .split(split)
            .iter()
            .filter(|r| (r.severity == 0.0) == normal)
            .filter(|r| normal || target == "all" || r.speaker_id == target)
            .cloned()
            .collect())
    }

    fn wave(&mut self, row: &ManifestRow) -> Result<Vec<f64>> {
        if let Some(w) = self.waves.get(&row.id) {
            return Ok(w.clone());
        }
        let w = self.corpus()?.audio(row)?;
        self.waves.insert(row.id.clone(), w.clone());
        Ok(w)
    }

    /// Runs every stage in order, skipping current checkpoints.
    pub fn run(&mut self) -> Result<Vec<(&'static str, StageOutcome)>> {
        fs::create_dir_all(&self.paths.recipe)?;
        fs::write(self.paths.recipe.join("config.txt"), self.cfg.to_text())?;
        let mut out = Vec::new();
        for stage in STAGES {
            let outcome = if self.is_current(stage) {
                log::info!("stage {stage}: checkpoint current, skipping");
                StageOutcome::Skipped
            } else {
                self.run_stage(stage)?;
                StageOutcome::Ran
            };
            out.push((stage, outcome));
        }
        Ok(out)
    }

    /// Runs one stage unconditionally; every upstream checkpoint must be
    /// current.
    pub fn run_stage(&mut self, stage: &str) -> Result<()> {
        if !STAGES.contains(&stage) {
            return Err(Error::Config(format!(
                "unknown stage {stage:?}; stages: {}",
                STAGES.join(", ")
            )));
        }
        let res = (|| {
            for up in upstream(stage) {
                if !self.is_current(up) {
                    return Err(Error::MissingCheckpoint(self.stage_dir(up)));
                }
            }
            let dir = self.stage_dir(stage);
            let _ = fs::remove_file(dir.join("stage.json"));
            fs::create_dir_all(&dir)?;
            let start = Instant::now();
            log::info!("stage {stage}: running");
            match stage {
                "codec" => self.stage_codec(&dir)?,
                "sv" => self.stage_sv(&dir)?,
                "normal_set" => self.stage_normal_set(&dir)?,
                "content_base" => self.stage_content_base(&dir)?,
                "content_finetune" => self.stage_content_finetune(&dir)?,
                "generator" => self.stage_generator(&dir)?,
                _ => unreachable!(),
            }
            fs::create_dir_all(&self.paths.recipe)?;
            fs::write(self.paths.recipe.join("config.txt"), self.cfg.to_text())?;
            let record = StageRecord {
                stage: stage.to_string(),
                hash: stage_hash(&self.cfg, stage),
                seconds: start.elapsed().as_secs_f64(),
            };
            log::info!("stage {stage}: done in {:.1}s", record.seconds);
            fs::write(dir.join("stage.json"), serde_json::to_string_pretty(&record)?)?;
            Ok(())
        })();
        res.stage(stage)
    }

    fn load_codec(&self) -> Result<CodecModel> {
        CodecModel::load(&self.stage_dir("codec").join("codec.bin"))
    }

    fn load_embedder(&self, codec: &CodecModel) -> Result<Box<dyn SvEmbedder>> {
        embedder_by_id(
            self.cfg.get("sv.embedder")?,
            &self.stage_dir("sv").join("sv.bin"),
            codec.latent_dim(),
            &sv_config(&self.cfg)?,
        )
    }

    fn stage_codec(&mut self, dir: &Path) -> Result<()> {
        let rows = self.rows(Split::Train, true)?;
        let waves: Vec<Vec<f64>> = rows.iter().map(|r| self.wave(r)).collect::<Result<_>>()?;
        let (codec, report) = train_codec(&waves, &codec_config(&self.cfg)?)?;
        codec.save(&dir.join("codec.bin"))?;
        let dev = self.rows(Split::Dev, true)?;
        let mut snr = 0.0;
        for r in &dev {
            let feats = crate::codec::analysis_features(&self.wave(r)?);
            let enc = codec.latents_of_features(&feats)?;
            snr += crate::codec::feature_snr_db(&feats, &codec.decode_features(&enc)?);
        }
        let summary = serde_json::json!({
            "codec_id": codec.codec_id(),
            "train_frames": report.frames,
            "train_feature_snr_db": report.train_snr_db,
            "dev_feature_snr_db": snr / dev.len().max(1) as f64,
            "residual_energy": report.residual_energy,
        });
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(&summary)?)?;
        Ok(())
    }

    /// Quantized codec frames of normal training speech, grouped by speaker.
    fn normal_codes(&mut self, codec: &CodecModel) -> Result<Vec<(ManifestRow, crate::codec::CodecEncoding)>> {
        let rows = self.rows(Split::Train, true)?;
        rows.into_iter()
            .map(|r| {
                let w = self.wave(&r)?;
                Ok((r, codec.encode(&w)?))
            })
            .collect()
    }

    fn stage_sv(&mut self, dir: &Path) -> Result<()> {
        if self.cfg.get("sv.embedder")? != "ge2e" {
            return Ok(());
        }
        let codec = self.load_codec()?;
        let mut by_speaker: BTreeMap<String, Vec<crate::autograd::Mat>> = BTreeMap::new();
        for (row, enc) in self.normal_codes(&codec)? {
            by_speaker.entry(row.speaker_id).or_default().push(enc.quantized.frames);
        }
        if self.cfg.bool("sv.include_dysarthric")? {
            let rows: Vec<ManifestRow> = self
                .corpus()?
                .split(Split::Train)
                .iter()
                .filter(|r| r.severity > 0.0)
                .cloned()
                .collect();
            for row in rows {
                let w = self.wave(&row)?;
                let q = codec.encode(&w)?.quantized.frames;
                by_speaker.entry(row.speaker_id).or_default().push(q);
            }
        }
        let groups: Vec<_> = by_speaker.into_values().collect();
        let (model, curve) = train_sv(&groups, &sv_config(&self.cfg)?)?;
        model.save(&dir.join("sv.bin"))?;
        let mut s = String::from("step,loss\n");
        for (i, l) in curve.iter().enumerate() {
            s.push_str(&format!("{},{l:.6}\n", i + 1));
        }
        fs::write(dir.join("curve.csv"), s)?;
        Ok(())
    }

    fn stage_normal_set(&mut self, dir: &Path) -> Result<()> {
        let codec = self.load_codec()?;
        let embedder = self.load_embedder(&codec)?;
        let codes = self.normal_codes(&codec)?;
        let seqs: Vec<(f64, &crate::autograd::Mat)> =
            codes.iter().map(|(r, e)| (r.severity, &e.quantized.frames)).collect();
        let set = build_normal_set(
            &seqs,
            embedder.as_ref(),
            &codec.codec_id(),
            &NormalSetConfig {
                window: self.cfg.usize("normal_set.window")?,
                size: self.cfg.usize("normal_set.size")?,
                seed: self.cfg.u64("normal_set.seed")?,
            },
        )?;
        set.save(&dir.join("normal_set.bin"))?;
        Ok(())
    }

    fn labelled(
        &mut self,
        rows: &[ManifestRow],
        backend: &dyn FeatureBackend,
        enhancer: Option<&dyn Enhancer>,
    ) -> Result<Vec<LabelledFeatures>> {
        rows.iter()
            .map(|r| {
                let mut w = self.wave(r)?;
                if let Some(e) = enhancer {
                    w = e.enhance(&w);
                }
                Ok(LabelledFeatures {
                    feats: extract_features(&w, backend)?,
                    target: self.corpus()?.phonemes(r),
                })
            })
            .collect()
    }

    fn content_train_cfg(&self, phase: &str) -> Result<ContentTrainConfig> {
        Ok(ContentTrainConfig {
            epochs: self.cfg.usize(&format!("content.{phase}_epochs"))?,
            batch: self.cfg.usize("content.batch")?,
            lr: self.cfg.f64(&format!("content.{phase}_lr"))?,
            seed: self.cfg.u64("content.seed")?,
        })
    }

    fn stage_content_base(&mut self, dir: &Path) -> Result<()> {
        let registry = BackendRegistry::with_defaults();
        let backend = registry.get(self.cfg.get("content.backend")?)?;
        let train_rows = self.rows(Split::Train, true)?;
        let dev_rows = self.rows(Split::Dev, true)?;
        let train = self.labelled(&train_rows, backend, None)?;
        let dev = self.labelled(&dev_rows, backend, None)?;
        let mut model = ContentEncoderModel::new(
            backend.id(),
            backend.dim(),
            self.corpus()?.inventory.clone(),
            ContentEncoderConfig {
                width: self.cfg.usize("content.width")?,
                layers: self.cfg.usize("content.layers")?,
                kernel: self.cfg.usize("content.kernel")?,
            },
            self.cfg.u64("content.seed")?,
        );
        let hash = stage_hash(&self.cfg, "content_base");
        let curve = train_content(&mut model, &train, &dev, &self.content_train_cfg("base")?, |m, _| {
            m.save(dir, &hash)
        })?;
        write_curve(&dir.join("curve.csv"), &curve)
    }

    fn stage_content_finetune(&mut self, dir: &Path) -> Result<()> {
        let mut model = ContentEncoderModel::load(&self.stage_dir("content_base"))?;
        let registry = BackendRegistry::with_defaults();
        let backend = registry.get(&model.backend_id)?;
        let enhancer = enhancer_by_id(self.cfg.get("enhance.id")?)?;
        let train_rows = self.rows(Split::Train, false)?;
        let dev_rows = self.rows(Split::Dev, false)?;
        if train_rows.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "no dysarthric training rows for target speaker {:?}",
                self.cfg.get("recipe.target_speaker")?
            )));
        }
        let train = self.labelled(&train_rows, backend, Some(enhancer.as_ref()))?;
        let dev = self.labelled(&dev_rows, backend, Some(enhancer.as_ref()))?;
        let hash = stage_hash(&self.cfg, "content_finetune");
        let curve = train_content(&mut model, &train, &dev, &self.content_train_cfg("finetune")?, |m, _| {
            m.save(dir, &hash)
        })?;
        write_curve(&dir.join("curve.csv"), &curve)
    }

    fn stage_generator(&mut self, dir: &Path) -> Result<()> {
        let codec = self.load_codec()?;
        let embedder = self.load_embedder(&codec)?;
        let set = NormalCodecSet::load(&self.stage_dir("normal_set").join("normal_set.bin"))?;
        let codes = self.normal_codes(&codec)?;
        let mut speakers: BTreeMap<String, usize> = BTreeMap::new();
        let mut examples = Vec::with_capacity(codes.len());
        for (row, enc) in codes {
            let n = speakers.len();
            let speaker = *speakers.entry(row.speaker_id.clone()).or_insert(n);
            let truth = self.corpus()?.truth(&row)?.clone();
            let (normed, _) = normalize_codec(&enc.quantized, &set, embedder.as_ref())?;
            examples.push(GeneratorExample {
                speaker,
                phonemes: self.corpus()?.phonemes(&row),
                durations: truth.durations,
                pitch: truth.pitch,
                latent: enc.latent.frames,
                prompt: normed.frames,
            });
        }
        let vocab = self.corpus()?.inventory.len();
        let gcfg = generator_config(&self.cfg)?;
        let hash = stage_hash(&self.cfg, "generator");
        let codec_id = codec.codec_id();
        let every = self.cfg.usize("generator.checkpoint_every")?;
        let (_, curve) = train_generator(&examples, vocab, &gcfg, every, |g, curve| {
            g.save(dir, &codec_id, &hash)?;
            write_generator_curve(&dir.join("curve.csv"), curve)
        })?;
        write_generator_curve(&dir.join("curve.csv"), &curve)
    }
}

/// Everything needed for inference, loaded from a recipe directory.
pub struct ModelBundle {
    pub codec: CodecModel,
    pub embedder: Box<dyn SvEmbedder>,
    pub normal_set: NormalCodecSet,
    pub content: ContentEncoderModel,
    pub generator: Generator,
    pub enhancer: Box<dyn Enhancer>,
    pub backend: Box<dyn FeatureBackend>,
    pub sampler: SamplerConfig,
    pub config: Config,
    pub config_hash: String,
    pub dir: PathBuf,
}

impl ModelBundle {
    pub fn load(dir: &Path) -> Result<Self> {
        let cfg_path = dir.join("config.txt");
        if !cfg_path.exists() {
            return Err(Error::MissingCheckpoint(cfg_path));
        }
        let config = Config::load(&cfg_path)?;
        let recipe = Recipe::new(
            config.clone(),
            Paths {
                corpus: PathBuf::new(),
                recipe: dir.to_path_buf(),
            },
        );
        for stage in STAGES {
            if !recipe.is_current(stage) {
                return Err(Error::MissingCheckpoint(recipe.stage_dir(stage)));
            }
        }
        let codec = recipe.load_codec()?;
        let embedder = recipe.load_embedder(&codec)?;
        let normal_set = NormalCodecSet::load(&recipe.stage_dir("normal_set").join("normal_set.bin"))?;
        let content = ContentEncoderModel::load(&recipe.stage_dir("content_finetune"))?;
        let (generator, gen_codec) = Generator::load(&recipe.stage_dir("generator"))?;
        let codec_id = codec.codec_id();
        if normal_set.codec_id != codec_id || gen_codec != codec_id {
            return Err(Error::InvalidArgument(format!(
                "bundle codec ids disagree: codec {codec_id}, normal set {}, generator {gen_codec}",
                normal_set.codec_id
            )));
        }
        if normal_set.embedder_id != embedder.id() {
            return Err(Error::InvalidArgument(format!(
                "normal set built with embedder {:?}, bundle has {:?}",
                normal_set.embedder_id,
                embedder.id()
            )));
        }
        if generator.latent_dim != codec.latent_dim() {
            return Err(Error::shape("generator latent dim", codec.latent_dim(), generator.latent_dim));
        }
        let mut registry = BackendRegistry::with_defaults();
        let backend = registry.take(&content.backend_id)?;
        if backend.dim() != content.input_dim {
            return Err(Error::shape("content feature dim", content.input_dim, backend.dim()));
        }
        let enhancer = enhancer_by_id(config.get("enhance.id")?)?;
        let sampler = sampler_config(&config)?;
        let config_hash = stage_hash(&config, "generator");
        Ok(Self {
            codec,
            embedder,
            normal_set,
            content,
            generator,
            enhancer,
            backend,
            sampler,
            config,
            config_hash,
            dir: dir.to_path_buf(),
        })
    }

    /// Oracle recognizer: the content encoder before speaker finetuning.
    pub fn oracle(&self) -> Result<ContentEncoderModel> {
        ContentEncoderModel::load(&self.dir.join("content_base"))
    }

    /// Raw or speaker-normalized quantized codec frames of a waveform.
    pub fn prompt_frames(&self, waveform: &[f64], normalize: bool) -> Result<CodecFrameSequence> {
        let enc = self.codec.encode(waveform).stage("codec_encode")?;
        let raw = enc.quantized;
        if !normalize {
            return Ok(raw);
        }
        let (normed, _) =
            normalize_codec(&raw, &self.normal_set, self.embedder.as_ref()).stage("normalize_codec")?;
        Ok(normed)
    }

    /// Reconstructs one utterance. Never mutates the bundle.
    pub fn reconstruct(&self, waveform: &[f64], opts: &ReconstructOptions) -> Result<Reconstruction> {
        if waveform.is_empty() {
            return Err(Error::InvalidArgument("empty waveform".into()).in_stage("enhance"));
        }
        let enhanced = self.enhancer.enhance(waveform);
        let feats = extract_features(&enhanced, self.backend.as_ref()).stage("extract_features")?;
        let post = self.content.posteriorgram(&feats).stage("posteriorgram")?;
        let mut spans = token_spans(&post);
        if spans.is_empty() {
            // Nothing survived the blank: fall back to the strongest phoneme.
            let v = post.inventory.len();
            let mass: Vec<f64> = (0..v).map(|k| post.frames.column(k).sum()).collect();
            let best = (0..v).max_by(|&a, &b| mass[a].total_cmp(&mass[b]).then(b.cmp(&a))).unwrap();
            spans.push(TokenSpan {
                phoneme: best,
                start: 0,
                end: post.len(),
            });
        }
        let tokens = token_posteriors(&post, &spans);
        let prompt = self.prompt_frames(&enhanced, opts.normalize)?;
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let sampler = opts.sampler.unwrap_or(self.sampler);
        let generation = self
            .generator
            .generate(&tokens, &prompt.frames, &sampler, &mut rng)
            .stage("reverse_sample")?;
        let output = self.codec.decode(&generation.latent).stage("codec_decode")?;
        let p = &generation.prompt.frames;
        let diagnostics = Diagnostics {
            phonemes: post.inventory.render(&decode_phonemes(&post)),
            durations: generation.adaptor.durations.frames.clone(),
            frames: generation.latent.nrows(),
            prompt_frames: prompt.frames.nrows(),
            prompt_mean: p.mean().unwrap_or(0.0),
            prompt_std: p.std(0.0),
            normalized: opts.normalize,
            sampler_steps: sampler.steps,
            seed: opts.seed,
            input_samples: waveform.len(),
            output_samples: output.len(),
        };
        Ok(Reconstruction { waveform: output, diagnostics })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconstructOptions {
    pub seed: u64,
    /// Disabling this reproduces the ablation without codec normalization.
    pub normalize: bool,
    /// Overrides the bundle's sampler settings.
    pub sampler: Option<SamplerConfig>,
}

impl Default for ReconstructOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            normalize: true,
            sampler: None,
        }
    }
}

/// Per-utterance record emitted alongside each reconstruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub phonemes: String,
    pub durations: Vec<usize>,
    pub frames: usize,
    pub prompt_frames: usize,
    pub prompt_mean: f64,
    pub prompt_std: f64,
    pub normalized: bool,
    pub sampler_steps: usize,
    pub seed: u64,
    pub input_samples: usize,
    pub output_samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub waveform: Vec<f64>,
    pub diagnostics: Diagnostics,
}

/// Builds the corpus described by the configuration.
pub fn build_corpus_from(cfg: &Config, paths: &Paths) -> Result<Corpus> {
    crate::synthcorpus::build_corpus(&corpus_config(cfg)?, &paths.corpus).stage("corpus")
}

/// Output length in samples for a reconstruction of `frames` frames.
pub fn expected_samples(frames: usize) -> usize {
    frames * dsp::HOP
}
