//! Speech content encoder: a frozen feature backbone, a trainable convolution
//! stack and a CTC head producing a phoneme posteriorgram.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{log_softmax_rows, softmax_rows, Mat, ParamSet, Tape, Var};
use crate::dsp;
use crate::error::{Error, Result};
use crate::eval::edit_distance;
use crate::nn::{clip_grad_norm, cosine_lr, gaussian, Adam, Builder, Conv1d, Linear};
use crate::synthcorpus::PhonemeInventory;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub frames: Mat,
    pub frame_rate: f64,
    pub backend_id: String,
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }
}

/// A frozen feature extractor. Implementations must be deterministic and
/// hold no trainable state.
pub trait FeatureBackend: Send + Sync {
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    fn extract(&self, waveform: &[f64]) -> Mat;
}

/// Log mel filterbank followed by a fixed random projection.
pub struct MockFbank {
    projection: Mat,
}

const MOCKFBANK_DIM: usize = 64;
const LOG_FLOOR_DB: f64 = 60.0;

impl MockFbank {
    pub fn new() -> Self {
        let bands = dsp::mel_bank().bands();
        let mut rng = ChaCha8Rng::seed_from_u64(0xFBA4C);
        let scale = 1.0 / (bands as f64).sqrt();
        let projection =
            Mat::from_shape_fn((bands, MOCKFBANK_DIM), |_| scale * gaussian(&mut rng));
        Self { projection }
    }
}

impl Default for MockFbank {
    fn default() -> Self {
        Self::new()
    }
}

/// Log mel power with a floor relative to the loudest bin, then per-band
/// mean removal over the utterance.
pub fn normalized_log_mel(waveform: &[f64]) -> Mat {
    let mel = dsp::mel_power(waveform);
    let peak = mel.fold(0.0f64, |a, &b| a.max(b));
    let floor = (peak * 10f64.powf(-LOG_FLOOR_DB / 10.0)).max(1e-10);
    let mut logm = mel.mapv(|p| (p.max(floor)).ln());
    let mean = logm.mean_axis(ndarray::Axis(0)).expect("at least one frame");
    logm -= &mean;
    logm
}

impl FeatureBackend for MockFbank {
    fn id(&self) -> &str {
        "mockfbank"
    }

    fn dim(&self) -> usize {
        MOCKFBANK_DIM
    }

    fn extract(&self, waveform: &[f64]) -> Mat {
        normalized_log_mel(waveform).dot(&self.projection)
    }
}

/// Registered feature backends, looked up by id.
pub struct BackendRegistry {
    backends: Vec<Box<dyn FeatureBackend>>,
}

impl BackendRegistry {
    pub fn with_defaults() -> Self {
        Self {
            backends: vec![Box::new(MockFbank::new())],
        }
    }

    /// Adds an adapter for an external backbone; later registrations shadow
    /// earlier ones with the same id.
    pub fn register(&mut self, backend: Box<dyn FeatureBackend>) {
        self.backends.insert(0, backend);
    }

    /// Removes and returns the backend registered under `id`.
    pub fn take(&mut self, id: &str) -> Result<Box<dyn FeatureBackend>> {
        self.get(id)?;
        let pos = self.backends.iter().position(|b| b.id() == id).expect("found above");
        Ok(self.backends.remove(pos))
    }

    pub fn get(&self, id: &str) -> Result<&dyn FeatureBackend> {
        self.backends
            .iter()
            .find(|b| b.id() == id)
            .map(|b| b.as_ref())
            .ok_or_else(|| Error::UnknownBackend {
                kind: "feature backend",
                id: id.to_string(),
                registered: self
                    .backends
                    .iter()
                    .map(|b| b.id().to_string())
                    .collect::<Vec<_>>()
                    .join(", "),
            })
    }
}

pub fn extract_features(waveform: &[f64], backend: &dyn FeatureBackend) -> Result<FeatureSequence> {
    if waveform.is_empty() {
        return Err(Error::InvalidArgument("empty waveform".into()));
    }
    Ok(FeatureSequence {
        frames: backend.extract(waveform),
        frame_rate: dsp::SAMPLE_RATE as f64 / dsp::HOP as f64,
        backend_id: backend.id().to_string(),
    })
}

/// Per-frame distribution over phonemes plus blank (last column).
#[derive(Debug, Clone, PartialEq)]
pub struct PhonemePosteriorgram {
    pub frames: Mat,
    pub inventory: PhonemeInventory,
}

impl PhonemePosteriorgram {
    pub fn new(frames: Mat, inventory: PhonemeInventory) -> Result<Self> {
        if frames.ncols() != inventory.classes() {
            return Err(Error::shape(
                "posteriorgram columns",
                inventory.classes(),
                frames.ncols(),
            ));
        }
        for row in frames.rows() {
            let s: f64 = row.sum();
            if (s - 1.0).abs() > 1e-6 || row.iter().any(|&p| p < 0.0 || !p.is_finite()) {
                return Err(Error::InvalidArgument(
                    "posteriorgram rows must be probability distributions".into(),
                ));
            }
        }
        Ok(Self { frames, inventory })
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn blank(&self) -> usize {
        self.inventory.blank_index()
    }

    /// Per-frame argmax; ties resolve to the lowest index.
    pub fn best_path(&self) -> Vec<usize> {
        self.frames
            .rows()
            .into_iter()
            .map(|r| {
                let mut best = 0;
                for (i, &p) in r.iter().enumerate() {
                    if p > r[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContentEncoderConfig {
    pub width: usize,
    pub layers: usize,
    pub kernel: usize,
}

impl Default for ContentEncoderConfig {
    fn default() -> Self {
        Self {
            width: 128,
            layers: 3,
            kernel: 5,
        }
    }
}

/// Trainable part of the content encoder. The backbone is referenced by id
/// only; its parameters never live here.
#[derive(Debug, Clone)]
pub struct ContentEncoderModel {
    pub params: ParamSet,
    convs: Vec<Conv1d>,
    proj: Linear,
    pub backend_id: String,
    pub inventory: PhonemeInventory,
    pub input_dim: usize,
    pub config: ContentEncoderConfig,
}

#[derive(Debug, Serialize, Deserialize)]
struct ContentMeta {
    backend_id: String,
    inventory: Vec<String>,
    input_dim: usize,
    config: ContentEncoderConfig,
    config_hash: String,
}

impl ContentEncoderModel {
    pub fn new(
        backend_id: &str,
        input_dim: usize,
        inventory: PhonemeInventory,
        config: ContentEncoderConfig,
        seed: u64,
    ) -> Self {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut params, "content", &mut rng);
        let mut convs = Vec::new();
        let mut dim = input_dim;
        for i in 0..config.layers {
            convs.push(Conv1d::new(
                &mut b,
                &format!("conv{i}"),
                dim,
                config.width,
                config.kernel,
                1,
            ));
            dim = config.width;
        }
        let proj = Linear::new(&mut b, "ctc", dim, inventory.classes());
        Self {
            params,
            convs,
            proj,
            backend_id: backend_id.to_string(),
            inventory,
            input_dim,
            config,
        }
    }

    /// Frames of context visible to each output frame.
    pub fn receptive_field(&self) -> usize {
        1 + 2 * self.convs.iter().map(Conv1d::half_width).sum::<usize>()
    }

    pub fn zero_projection(&mut self) {
        self.params.get_mut(self.proj.w).fill(0.0);
        self.params.get_mut(self.proj.b).fill(0.0);
    }

    fn check(&self, feats: &FeatureSequence) -> Result<()> {
        if feats.dim() != self.input_dim {
            return Err(Error::shape("content features", self.input_dim, feats.dim()));
        }
        if feats.backend_id != self.backend_id {
            return Err(Error::InvalidArgument(format!(
                "features from backend {:?}, model expects {:?}",
                feats.backend_id, self.backend_id
            )));
        }
        Ok(())
    }

    /// Pre-softmax logits on a tape.
    pub fn logits(&self, t: &mut Tape, feats: Var) -> Var {
        let mut h = feats;
        for conv in &self.convs {
            let y = conv.forward(t, h);
            h = t.relu(y);
        }
        self.proj.forward(t, h)
    }

    pub fn posteriorgram(&self, feats: &FeatureSequence) -> Result<PhonemePosteriorgram> {
        self.check(feats)?;
        let mut t = Tape::new(&self.params);
        let x = t.leaf(feats.frames.clone());
        let logits = self.logits(&mut t, x);
        Ok(PhonemePosteriorgram {
            frames: softmax_rows(t.value(logits)),
            inventory: self.inventory.clone(),
        })
    }

    pub fn save(&self, dir: &Path, config_hash: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.params
            .write_to(fs::File::create(dir.join("params.bin"))?)?;
        let meta = ContentMeta {
            backend_id: self.backend_id.clone(),
            inventory: self.inventory.symbols().to_vec(),
            input_dim: self.input_dim,
            config: self.config.clone(),
            config_hash: config_hash.to_string(),
        };
        fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        if !meta_path.exists() {
            return Err(Error::MissingCheckpoint(dir.to_path_buf()));
        }
        let meta: ContentMeta = serde_json::from_str(&fs::read_to_string(meta_path)?)?;
        let inventory = PhonemeInventory::new(meta.inventory)?;
        let mut model = Self::new(&meta.backend_id, meta.input_dim, inventory, meta.config, 0);
        model
            .params
            .load_from(fs::File::open(dir.join("params.bin"))?)?;
        Ok(model)
    }
}

/// Number of adjacent equal labels; each needs a separating blank.
pub fn repeats(target: &[usize]) -> usize {
    target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// CTC negative log-likelihood of `target` under per-frame log-probabilities,
/// with the gradient with respect to those log-probabilities.
pub fn ctc_nll(log_probs: &Mat, target: &[usize], blank: usize) -> Result<(f64, Mat)> {
    let t_len = log_probs.nrows();
    let reps = repeats(target);
    let needed = target.len() + reps;
    if t_len < needed.max(1) {
        return Err(Error::CtcInfeasible {
            target_len: target.len(),
            repeats: reps,
            needed: needed.max(1),
            frames: t_len,
        });
    }
    if let Some(&bad) = target.iter().find(|&&k| k >= log_probs.ncols() || k == blank) {
        return Err(Error::InvalidArgument(format!("invalid CTC label {bad}")));
    }
    let s_len = 2 * target.len() + 1;
    let label = |s: usize| if s % 2 == 0 { blank } else { target[s / 2] };
    let can_skip = |s: usize| s >= 2 && s % 2 == 1 && label(s) != label(s - 2);
    let neg = f64::NEG_INFINITY;

    let mut alpha = vec![vec![neg; s_len]; t_len];
    alpha[0][0] = log_probs[[0, blank]];
    if s_len > 1 {
        alpha[0][1] = log_probs[[0, label(1)]];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut a = alpha[t - 1][s];
            if s >= 1 {
                a = log_add(a, alpha[t - 1][s - 1]);
            }
            if can_skip(s) {
                a = log_add(a, alpha[t - 1][s - 2]);
            }
            alpha[t][s] = a + log_probs[[t, label(s)]];
        }
    }
    // beta[t][s]: log-prob of emitting the rest after frame t, given state s at t.
    let mut beta = vec![vec![neg; s_len]; t_len];
    beta[t_len - 1][s_len - 1] = 0.0;
    if s_len > 1 {
        beta[t_len - 1][s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut b = beta[t + 1][s] + log_probs[[t + 1, label(s)]];
            if s + 1 < s_len {
                b = log_add(b, beta[t + 1][s + 1] + log_probs[[t + 1, label(s + 1)]]);
            }
            if s + 2 < s_len && can_skip(s + 2) {
                b = log_add(b, beta[t + 1][s + 2] + log_probs[[t + 1, label(s + 2)]]);
            }
            beta[t][s] = b;
        }
    }
    let mut log_p = alpha[t_len - 1][s_len - 1];
    if s_len > 1 {
        log_p = log_add(log_p, alpha[t_len - 1][s_len - 2]);
    }
    let mut grad = Mat::zeros(log_probs.dim());
    for t in 0..t_len {
        for s in 0..s_len {
            let occ = alpha[t][s] + beta[t][s] - log_p;
            if occ > neg {
                grad[[t, label(s)]] -= occ.exp();
            }
        }
    }
    Ok((-log_p, grad))
}

/// `-ln P(target | posteriorgram)` by the CTC forward algorithm.
pub fn ctc_loss(post: &PhonemePosteriorgram, target: &[usize]) -> Result<f64> {
    let logp = post.frames.mapv(|p| p.ln());
    Ok(ctc_nll(&logp, target, post.blank())?.0)
}

/// CTC loss node on a tape, given log-probabilities.
pub fn ctc_on_tape(t: &mut Tape, log_probs: Var, target: &[usize], blank: usize) -> Result<Var> {
    let (loss, grad) = ctc_nll(t.value(log_probs), target, blank)?;
    Ok(t.precomputed_loss(log_probs, loss, grad))
}

/// Greedy best-path decoding: argmax, collapse repeats, drop blanks.
pub fn decode_phonemes(post: &PhonemePosteriorgram) -> Vec<usize> {
    collapse(&post.best_path(), post.blank())
}

pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != blank {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Frame span `[start, end)` of one decoded token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenSpan {
    pub phoneme: usize,
    pub start: usize,
    pub end: usize,
}

/// Runs of equal non-blank labels along the best path.
pub fn token_spans(post: &PhonemePosteriorgram) -> Vec<TokenSpan> {
    let path = post.best_path();
    let blank = post.blank();
    let mut spans: Vec<TokenSpan> = Vec::new();
    let mut prev = None;
    for (t, &k) in path.iter().enumerate() {
        if k != blank {
            match spans.last_mut() {
                Some(last) if prev == Some(k) => last.end = t + 1,
                _ => spans.push(TokenSpan {
                    phoneme: k,
                    start: t,
                    end: t + 1,
                }),
            }
        }
        prev = Some(k);
    }
    spans
}

/// Token-level phoneme distributions: non-blank posterior mass pooled over
/// each span and renormalized, `tokens x phonemes`.
pub fn token_posteriors(post: &PhonemePosteriorgram, spans: &[TokenSpan]) -> Mat {
    let v = post.inventory.len();
    let mut out = Mat::zeros((spans.len(), v));
    for (i, sp) in spans.iter().enumerate() {
        for t in sp.start..sp.end {
            for k in 0..v {
                out[[i, k]] += post.frames[[t, k]];
            }
        }
        let z: f64 = out.row(i).sum();
        if z > 0.0 {
            out.row_mut(i).mapv_inplace(|x| x / z);
        } else {
            out[[i, sp.phoneme]] = 1.0;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContentTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ContentTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch: 8,
            lr: 1e-3,
            seed: 1,
        }
    }
}

/// One row of the training curve.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
    pub dev_per: Option<f64>,
}

pub fn write_curve(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    let mut s = String::from("step,loss,dev_PER\n");
    for p in curve {
        s.push_str(&format!(
            "{},{:.6},{}\n",
            p.step,
            p.loss,
            p.dev_per.map_or(String::new(), |v| format!("{v:.3}"))
        ));
    }
    fs::write(path, s)?;
    Ok(())
}

/// Feature sequence with its reference phonemes.
#[derive(Debug, Clone)]
pub struct LabelledFeatures {
    pub feats: FeatureSequence,
    pub target: Vec<usize>,
}

/// Corpus-level PER (%) of a model on labelled data.
pub fn corpus_per(model: &ContentEncoderModel, data: &[LabelledFeatures]) -> Result<f64> {
    let mut edits = 0usize;
    let mut total = 0usize;
    for item in data {
        let hyp = decode_phonemes(&model.posteriorgram(&item.feats)?);
        edits += edit_distance(&item.target, &hyp);
        total += item.target.len();
    }
    Ok(100.0 * edits as f64 / total.max(1) as f64)
}

/// One optimizer step over `batch`; returns the mean loss.
pub fn content_step(
    model: &mut ContentEncoderModel,
    opt: &mut Adam,
    batch: &[&LabelledFeatures],
    lr: f64,
) -> Result<f64> {
    let mut total = crate::autograd::Grads::zeros_like(&model.params);
    let mut loss_sum = 0.0;
    for item in batch {
        let mut t = Tape::new(&model.params);
        let x = t.leaf(item.feats.frames.clone());
        let logits = model.logits(&mut t, x);
        let logp = t.log_softmax_rows(logits);
        let loss = ctc_on_tape(&mut t, logp, &item.target, model.inventory.blank_index())?;
        // Normalize by target length so long words do not dominate.
        let loss = t.scale(loss, 1.0 / item.target.len().max(1) as f64);
        loss_sum += t.scalar(loss);
        total.accumulate(&t.backward(loss).param_grads());
    }
    total.scale(1.0 / batch.len() as f64);
    if !total.is_finite() || !loss_sum.is_finite() {
        return Err(Error::InvalidArgument("non-finite CTC gradient".into()));
    }
    clip_grad_norm(&mut total, 5.0);
    opt.step(&mut model.params, &total, lr);
    Ok(loss_sum / batch.len() as f64)
}

/// Minimizes CTC loss over `train`, updating only the encoder's own
/// parameters. `on_epoch` sees the model after every epoch (for
/// checkpointing); if a step diverges the last epoch's model is returned in
/// the error path via that callback having already run.
pub fn train_content(
    model: &mut ContentEncoderModel,
    train: &[LabelledFeatures],
    dev: &[LabelledFeatures],
    cfg: &ContentTrainConfig,
    mut on_epoch: impl FnMut(&ContentEncoderModel, &[CurvePoint]) -> Result<()>,
) -> Result<Vec<CurvePoint>> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("no training utterances".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(&model.params);
    let steps_per_epoch = train.len().div_ceil(cfg.batch);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut curve = Vec::new();
    let mut step = 0;
    let mut good = model.params.clone();
    for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<&LabelledFeatures> = chunk.iter().map(|&i| &train[i]).collect();
            let lr = cosine_lr(cfg.lr, step, total_steps, steps_per_epoch.min(20));
            match content_step(model, &mut opt, &batch, lr) {
                Ok(l) => epoch_loss += l,
                Err(_) => {
                    model.params = good;
                    return Err(Error::Diverged { step });
                }
            }
            step += 1;
        }
        let dev_per = if dev.is_empty() {
            None
        } else {
            Some(corpus_per(model, dev)?)
        };
        curve.push(CurvePoint {
            step,
            loss: epoch_loss / steps_per_epoch as f64,
            dev_per,
        });
        log::info!(
            "content epoch {} loss {:.4} dev PER {:?}",
            curve.len(),
            curve.last().unwrap().loss,
            dev_per
        );
        good = model.params.clone();
        on_epoch(model, &curve)?;
    }
    Ok(curve)
}

/// Per-speaker PER (%) keyed by speaker id.
pub fn per_by_speaker<'a>(
    model: &ContentEncoderModel,
    data: impl IntoIterator<Item = (&'a str, &'a LabelledFeatures)>,
) -> Result<BTreeMap<String, f64>> {
    let mut acc: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (spk, item) in data {
        let hyp = decode_phonemes(&model.posteriorgram(&item.feats)?);
        let e = acc.entry(spk.to_string()).or_default();
        e.0 += edit_distance(&item.target, &hyp);
        e.1 += item.target.len();
    }
    Ok(acc
        .into_iter()
        .map(|(k, (e, n))| (k, 100.0 * e as f64 / n.max(1) as f64))
        .collect())
}

/// Log-probabilities from a posteriorgram matrix (for tests and oracles).
pub fn log_posteriors(logits: &Mat) -> Mat {
    log_softmax_rows(logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::max_rel_error;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn inv3() -> PhonemeInventory {
        PhonemeInventory::new(vec!["a".into(), "b".into()]).unwrap()
    }

    fn post(rows: Vec<Vec<f64>>, inv: PhonemeInventory) -> PhonemePosteriorgram {
        let t = rows.len();
        let c = rows[0].len();
        PhonemePosteriorgram::new(
            Mat::from_shape_vec((t, c), rows.concat()).unwrap(),
            inv,
        )
        .unwrap()
    }

    #[test]
    fn single_frame_single_label() {
        let p = post(vec![vec![0.6, 0.1, 0.3]], inv3());
        assert_abs_diff_eq!(ctc_loss(&p, &[0]).unwrap(), -(0.6f64.ln()), epsilon = 1e-12);
    }

    #[test]
    fn two_uniform_frames() {
        let u = 1.0 / 3.0;
        let p = post(vec![vec![u; 3], vec![u; 3]], inv3());
        // Alignments {aa, a-, -a}: 3 * (1/3)^2.
        assert_abs_diff_eq!(ctc_loss(&p, &[0]).unwrap(), 3f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn infeasible_target_is_an_error() {
        let p = post(vec![vec![0.5, 0.25, 0.25]; 2], inv3());
        match ctc_loss(&p, &[0, 0]) {
            Err(Error::CtcInfeasible { needed: 3, frames: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(ctc_loss(&p, &[0, 1]).unwrap().is_finite());
    }

    #[test]
    fn ctc_logit_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Mat::from_shape_fn((6, 4), |_| rng.random_range(-2.0..2.0));
        let err = max_rel_error(&x, |t, v| {
            let lp = t.log_softmax_rows(v);
            ctc_on_tape(t, lp, &[1, 1, 2], 3).unwrap()
        });
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn greedy_decode_rules() {
        let inv = inv3();
        let onehot = |path: &[usize]| {
            let rows = path
                .iter()
                .map(|&k| (0..3).map(|j| if j == k { 1.0 } else { 0.0 }).collect())
                .collect();
            post(rows, inv.clone())
        };
        assert_eq!(decode_phonemes(&onehot(&[0, 0, 2, 1])), vec![0, 1]);
        assert_eq!(decode_phonemes(&onehot(&[2, 2, 2])), Vec::<usize>::new());
        assert_eq!(decode_phonemes(&onehot(&[0, 2, 0])), vec![0, 0]);
        // Ties go to the lowest index.
        let tie = post(vec![vec![0.4, 0.4, 0.2]], inv.clone());
        assert_eq!(decode_phonemes(&tie), vec![0]);
    }

    #[test]
    fn posteriorgram_contracts() {
        let fb = MockFbank::new();
        let wave: Vec<f64> = (0..16_000).map(|n| (n as f64 * 0.07).sin() * 0.3).collect();
        let feats = extract_features(&wave, &fb).unwrap();
        assert_eq!(feats.len(), 100);
        let mut model = ContentEncoderModel::new(
            "mockfbank",
            fb.dim(),
            PhonemeInventory::default(),
            ContentEncoderConfig::default(),
            1,
        );
        assert!(model.receptive_field() >= 13);
        let p = model.posteriorgram(&feats).unwrap();
        assert_eq!(p.len(), 100);
        for r in p.frames.rows() {
            assert_abs_diff_eq!(r.sum(), 1.0, epsilon = 1e-6);
        }
        model.zero_projection();
        let p = model.posteriorgram(&feats).unwrap();
        assert!(p.frames.iter().all(|&v| (v - 1.0 / 13.0).abs() < 1e-12));
        let wrong = FeatureSequence {
            frames: Mat::zeros((10, 5)),
            frame_rate: 100.0,
            backend_id: "mockfbank".into(),
        };
        assert!(matches!(model.posteriorgram(&wrong), Err(Error::Shape { .. })));
    }

    #[test]
    fn features_are_finite_and_deterministic() {
        let fb = MockFbank::new();
        let silence = vec![0.0; 3200];
        let f = extract_features(&silence, &fb).unwrap();
        assert!(f.frames.iter().all(|v| v.is_finite()));
        let wave: Vec<f64> = (0..3200).map(|n| (n as f64 * 0.2).sin()).collect();
        assert_eq!(fb.extract(&wave), fb.extract(&wave));
        let reg = BackendRegistry::with_defaults();
        let err = reg.get("wavlm").err().unwrap().to_string();
        assert!(err.contains("mockfbank"), "{err}");
        assert!(extract_features(&[], &fb).is_err());
    }

    #[test]
    fn token_spans_follow_best_path() {
        let inv = inv3();
        let rows = vec![
            vec![0.1, 0.1, 0.8],
            vec![0.7, 0.2, 0.1],
            vec![0.8, 0.1, 0.1],
            vec![0.1, 0.1, 0.8],
            vec![0.2, 0.7, 0.1],
        ];
        let p = post(rows, inv);
        let spans = token_spans(&p);
        assert_eq!(
            spans,
            vec![
                TokenSpan { phoneme: 0, start: 1, end: 3 },
                TokenSpan { phoneme: 1, start: 4, end: 5 }
            ]
        );
        let tp = token_posteriors(&p, &spans);
        assert_abs_diff_eq!(tp[[0, 0]], 1.5 / 1.8, epsilon = 1e-12);
        assert_abs_diff_eq!(tp.row(1).sum(), 1.0, epsilon = 1e-12);
    }
}
