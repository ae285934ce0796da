use criterion::{criterion_group, criterion_main, Criterion};
use dsr_bench::{codec, random_mat, utterance};
use dsr_core::autograd::{Mat, ParamSet};
use dsr_core::codec::{CodecFrameSequence, CodecSource};
use dsr_core::content::{log_posteriors, PhonemePosteriorgram, ctc_loss};
use dsr_core::diffusion::Backbone;
use dsr_core::nn::Builder;
use dsr_core::speaker::{normalize_codec, NormalCodecSet, SpecStat};
use dsr_core::synthcorpus::PhonemeInventory;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn ctc(c: &mut Criterion) {
    let inv = PhonemeInventory::default();
    let post = PhonemePosteriorgram::new(log_posteriors(&random_mat(200, inv.classes(), 1)).mapv(f64::exp), inv)
        .unwrap();
    let target: Vec<usize> = (0..30).map(|i| (i * 7) % 12).collect();
    c.bench_function("ctc_loss 200x13 L30", |b| b.iter(|| ctc_loss(&post, &target).unwrap()));
}

fn codec_encode(c: &mut Criterion) {
    let model = codec();
    let wave = utterance(10, 99);
    c.bench_function("codec encode", |b| b.iter(|| model.encode(&wave).unwrap()));
    let z = model.encode(&wave).unwrap().latent.frames;
    c.bench_function("codec decode", |b| b.iter(|| model.decode(&z).unwrap()));
}

fn backbone(c: &mut Criterion) {
    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let bb = {
        let mut b = Builder::new(&mut params, "gen", &mut rng);
        Backbone::new(&mut b, 64, 128, 128, 128, 6, 3, 4)
    };
    let z = random_mat(100, 64, 1);
    let cond = random_mat(100, 128, 2);
    let prompt = random_mat(64, 128, 3);
    c.bench_function("backbone predict_z0 100 frames", |b| {
        b.iter(|| bb.predict_z0(&params, &z, 0.5, &cond, &prompt).unwrap())
    });
}

fn normalizer(c: &mut Criterion) {
    let entries: Vec<Mat> = (0..4096).map(|i| random_mat(8, 64, i)).collect();
    let set = NormalCodecSet::from_entries(entries, 8, &SpecStat, "bench", 1).unwrap();
    let seq = CodecFrameSequence { frames: random_mat(300, 64, 9), frame_rate: 100.0, source: CodecSource::Raw };
    c.bench_function("normalize_codec 300 frames, set 4096", |b| {
        b.iter(|| normalize_codec(&seq, &set, &SpecStat).unwrap())
    });
}

criterion_group! {
    name = kernels;
    config = Criterion::default().sample_size(10);
    targets = ctc, codec_encode, backbone, normalizer
}
criterion_main!(kernels);
