//! Fixtures shared by the benchmarks.

use dsr_core::autograd::Mat;
use dsr_core::codec::{train_codec, CodecConfig, CodecModel};
use dsr_core::nn::gaussian;
use dsr_core::synthcorpus::{generate_indexed, PhonemeInventory, SpeakerProfile};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn random_mat(rows: usize, cols: usize, seed: u64) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Mat::from_shape_fn((rows, cols), |_| gaussian(&mut rng))
}

/// A synthetic utterance of `phonemes` phonemes.
pub fn utterance(phonemes: usize, seed: u64) -> Vec<f64> {
    let inv = PhonemeInventory::default();
    let ph: Vec<usize> = (0..phonemes).map(|i| (i * 5 + seed as usize) % inv.len()).collect();
    generate_indexed(&inv, &ph, &SpeakerProfile::generate(0, 4, 7), seed, format!("b{seed}"))
        .unwrap()
        .waveform
}

/// Codec with the default geometry trained on a handful of utterances.
pub fn codec() -> CodecModel {
    let waves: Vec<Vec<f64>> = (0..12).map(|i| utterance(8, i)).collect();
    let cfg = CodecConfig {
        latent_dim: 64,
        stages: 4,
        codebook_size: 256,
        kmeans_iters: 3,
        max_frames: 4000,
        griffin_lim_iters: 32,
        seed: 1,
    };
    train_codec(&waves, &cfg).unwrap().0
}
