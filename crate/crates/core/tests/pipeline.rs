use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use dsr_core::config::Config;
use dsr_core::dsp;
use dsr_core::pipeline::{
    build_corpus_from, expected_samples, ModelBundle, Paths, ReconstructOptions, Recipe,
    StageOutcome, STAGES,
};
use dsr_core::synthcorpus::{Corpus, Split};
use dsr_core::Error;
use sha2::{Digest, Sha256};
use tempfile::TempDir;

const TINY: &str = "
corpus.speakers=2
corpus.utterances=24
corpus.words=14
corpus.max_len=5
codec.latent_dim=12
codec.stages=2
codec.codebook_size=16
codec.kmeans_iters=3
codec.griffin_lim_iters=4
sv.hidden=8
sv.dim=4
sv.steps=5
normal_set.size=64
content.width=16
content.layers=2
content.base_epochs=1
content.finetune_epochs=1
generator.hidden=8
generator.blocks=2
generator.heads=2
generator.prompt_blocks=1
generator.steps=3
generator.batch=2
generator.crop=8
generator.prompt_frames=8
diffusion.steps=3
";

fn tiny_config() -> Config {
    Config::parse(TINY).unwrap()
}

/// One trained tiny recipe shared by the tests in this file.
fn trained() -> &'static (TempDir, Paths) {
    static DIR: OnceLock<(TempDir, Paths)> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let cfg = tiny_config();
        let paths = Paths::resolve(&cfg, dir.path()).unwrap();
        build_corpus_from(&cfg, &paths).unwrap();
        let outcomes = Recipe::new(cfg, paths.clone()).run().unwrap();
        assert!(outcomes.iter().all(|(_, o)| *o == StageOutcome::Ran));
        (dir, paths)
    })
}

fn digest(path: &Path) -> String {
    hex::encode(Sha256::digest(fs::read(path).unwrap()))
}

#[test]
fn rerun_is_noop_and_deleted_stage_resumes_alone() {
    let (_, paths) = trained();
    let mut recipe = Recipe::new(tiny_config(), paths.clone());
    assert!(recipe.run().unwrap().iter().all(|(_, o)| *o == StageOutcome::Skipped));

    let before = digest(&paths.recipe.join("content_base/params.bin"));
    fs::remove_dir_all(paths.recipe.join("content_base")).unwrap();
    let outcomes = recipe.run().unwrap();
    for (stage, o) in outcomes {
        let expect = if stage == "content_base" { StageOutcome::Ran } else { StageOutcome::Skipped };
        assert_eq!(o, expect, "{stage}");
    }
    assert_eq!(digest(&paths.recipe.join("content_base/params.bin")), before);

    let mut changed = tiny_config();
    changed.set("generator.steps", "4").unwrap();
    let stale = Recipe::new(changed, paths.clone());
    for stage in STAGES {
        assert_eq!(stale.is_current(stage), stage != "generator", "{stage}");
    }
}

#[test]
fn missing_upstream_is_named() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config();
    let mut recipe = Recipe::new(cfg.clone(), Paths::resolve(&cfg, dir.path()).unwrap());
    let err = recipe.run_stage("generator").unwrap_err();
    assert_eq!(err.stage(), Some("generator"));
    assert!(err.to_string().contains("codec"), "{err}");
    assert!(matches!(recipe.run_stage("nope"), Err(Error::Config(_))));
}

#[test]
fn reconstruction_is_deterministic_and_length_conserving() {
    let (_, paths) = trained();
    let bundle = ModelBundle::load(&paths.recipe).unwrap();
    let corpus = Corpus::load(&paths.corpus).unwrap();
    let row = corpus.split(Split::Test).iter().find(|r| r.severity > 0.0).unwrap();
    let wave = corpus.audio(row).unwrap();
    let opts = ReconstructOptions { seed: 4, ..Default::default() };
    let a = bundle.reconstruct(&wave, &opts).unwrap();
    let b = bundle.reconstruct(&wave, &opts).unwrap();
    assert_eq!(a, b);
    let frames: usize = a.diagnostics.durations.iter().sum();
    assert_eq!(a.diagnostics.frames, frames);
    assert!(a.waveform.len().abs_diff(expected_samples(frames)) <= dsp::HOP);
    assert_eq!(a.diagnostics.sampler_steps, 3);

    let ab = bundle
        .reconstruct(&wave, &ReconstructOptions { normalize: false, ..opts })
        .unwrap();
    assert!(!ab.diagnostics.normalized);

    let err = bundle.reconstruct(&[], &opts).unwrap_err();
    assert!(err.stage().is_some());
}

#[test]
fn bundle_requires_every_stage() {
    let (_, paths) = trained();
    let copy = TempDir::new().unwrap();
    for stage in STAGES.iter().filter(|s| **s != "normal_set") {
        let dst = copy.path().join(stage);
        fs::create_dir_all(&dst).unwrap();
        for e in fs::read_dir(paths.recipe.join(stage)).unwrap() {
            let e = e.unwrap();
            fs::copy(e.path(), dst.join(e.file_name())).unwrap();
        }
    }
    fs::copy(paths.recipe.join("config.txt"), copy.path().join("config.txt")).unwrap();
    match ModelBundle::load(copy.path()) {
        Err(Error::MissingCheckpoint(p)) => assert!(p.ends_with("normal_set")),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("bundle loaded without a normal set"),
    }
}
