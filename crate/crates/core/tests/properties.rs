use std::sync::OnceLock;

use dsr_core::autograd::Mat;
use dsr_core::codec::{train_codec, CodecConfig, CodecFrameSequence, CodecModel, CodecSource};
use dsr_core::eval::{edit_distance, phoneme_error_rate, speaker_similarity};
use dsr_core::speaker::{normalize_codec, NormalCodecSet, SpecStat, SvEmbedder};
use dsr_core::synthcorpus::{generate_indexed, PhonemeInventory, SpeakerProfile};
use dsr_core::variance::length_regulate;
use proptest::prelude::*;

fn small_codec() -> &'static CodecModel {
    static CODEC: OnceLock<CodecModel> = OnceLock::new();
    CODEC.get_or_init(|| {
        let inv = PhonemeInventory::default();
        let waves: Vec<Vec<f64>> = (0..10)
            .map(|i| {
                let spk = SpeakerProfile::generate(i % 2, 2, 3);
                let ph: Vec<usize> = (0..5).map(|j| (i * 5 + j * 7) % 12).collect();
                generate_indexed(&inv, &ph, &spk, i as u64, format!("w{i}")).unwrap().waveform
            })
            .collect();
        let cfg = CodecConfig {
            latent_dim: 12,
            stages: 3,
            codebook_size: 24,
            kmeans_iters: 4,
            max_frames: 4000,
            griffin_lim_iters: 4,
            seed: 1,
        };
        train_codec(&waves, &cfg).unwrap().0
    })
}

fn mat(rows: usize, cols: usize) -> impl Strategy<Value = Mat> {
    proptest::collection::vec(-2.0f64..2.0, rows * cols)
        .prop_map(move |v| Mat::from_shape_vec((rows, cols), v).unwrap())
}

/// Linear scan written independently of the library's search.
fn scan(query: &[f64], table: &Mat) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for i in 0..table.nrows() {
        let d: f64 = (0..query.len()).map(|j| (table[[i, j]] - query[j]).abs()).sum();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

fn random_set(seed: u64, size: usize, window: usize, dim: usize) -> NormalCodecSet {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let entries = (0..size)
        .map(|_| Mat::from_shape_fn((window, dim), |_| rng.random_range(-1.0..1.0)))
        .collect();
    NormalCodecSet::from_entries(entries, window, &SpecStat, "codec", seed).unwrap()
}

proptest! {
    #[test]
    fn length_regulation_sums_durations(
        durs in proptest::collection::vec(0i64..9, 1..12),
        width in 1usize..5,
    ) {
        let h = Mat::from_shape_fn((durs.len(), width), |(i, j)| (i * 10 + j) as f64);
        let out = length_regulate(&h, &durs).unwrap();
        prop_assert_eq!(out.nrows() as i64, durs.iter().sum::<i64>());
        let mut row = 0;
        for (i, &d) in durs.iter().enumerate() {
            for _ in 0..d {
                prop_assert_eq!(out.row(row), h.row(i));
                row += 1;
            }
        }
    }

    #[test]
    fn edit_distance_is_a_metric(
        a in proptest::collection::vec(0u8..4, 0..8),
        b in proptest::collection::vec(0u8..4, 0..8),
        c in proptest::collection::vec(0u8..4, 0..8),
    ) {
        prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
        prop_assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
        prop_assert!(edit_distance(&a, &b) <= a.len().max(b.len()));
        prop_assert_eq!(edit_distance(&a, &a), 0);
        if !a.is_empty() {
            let per = phoneme_error_rate(&a, &b).unwrap();
            prop_assert!(per >= 0.0);
        }
    }

    #[test]
    fn normalizer_matches_exhaustive_scan(seed in 0u64..1000, frames in 1usize..30) {
        let set = random_set(seed, 64, 4, 3);
        let z = Mat::from_shape_fn((frames, 3), |(i, j)| ((i * 3 + j) as f64 * 0.37 + seed as f64).sin());
        let seq = CodecFrameSequence { frames: z.clone(), frame_rate: 100.0, source: CodecSource::Raw };
        let (out, chosen) = normalize_codec(&seq, &set, &SpecStat).unwrap();
        let mut start = 0;
        for &idx in &chosen {
            let l = 4.min(frames - start);
            let q = SpecStat.embed_raw(&z.slice(ndarray::s![start..start + l, ..]).to_owned());
            prop_assert_eq!(idx, scan(&q, &set.prefix_embeddings[l - 1]));
            start += l;
        }
        prop_assert_eq!(start, frames);
        prop_assert_eq!(out.source, CodecSource::Normalized);
        let (again, _) = normalize_codec(&out, &set, &SpecStat).unwrap();
        prop_assert_eq!(again.frames, out.frames);
    }

    #[test]
    fn nearest_entry_invariant_to_positive_scaling(
        table in mat(16, 5),
        q in proptest::collection::vec(-2.0f64..2.0, 5),
        k in 0.01f64..100.0,
    ) {
        let scaled: Vec<f64> = q.iter().map(|x| x * k).collect();
        prop_assert_eq!(scan(&q, &table), dsr_core::speaker::nearest_l1(&scaled, &(&table * k)).0);
    }

    #[test]
    fn rvq_residuals_never_grow(z in mat(6, 12)) {
        let norms = small_codec().residual_norms(&z);
        for f in 0..norms.nrows() {
            for r in 1..norms.ncols() {
                prop_assert!(norms[[f, r]] <= norms[[f, r - 1]] + 1e-12);
            }
        }
    }
}

#[test]
fn speaker_similarity_is_a_pseudometric() {
    let inv = PhonemeInventory::default();
    let codec = small_codec();
    let a = generate_indexed(&inv, &[1, 2, 3], &SpeakerProfile::generate(0, 2, 3), 1, "a".into())
        .unwrap()
        .waveform;
    let b = generate_indexed(&inv, &[4, 5], &SpeakerProfile::generate(1, 2, 3), 2, "b".into())
        .unwrap()
        .waveform;
    assert_eq!(speaker_similarity(&a, &a, codec, &SpecStat).unwrap(), 0.0);
    let ab = speaker_similarity(&a, &b, codec, &SpecStat).unwrap();
    assert!(ab > 0.0);
    assert_eq!(ab, speaker_similarity(&b, &a, codec, &SpecStat).unwrap());
}
