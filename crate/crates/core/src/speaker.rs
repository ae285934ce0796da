//! Speaker identity path: enhancement front-end, speaker-verification
//! embedders, codec normalization against a normal-speech set, and the
//! prompt encoder.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autograd::{Grads, Mat, ParamId, ParamSet, Tape, Var};
use crate::codec::{CodecFrameSequence, CodecSource};
use crate::dsp;
use crate::error::{Error, Result};
use crate::nn::{clip_grad_norm, cosine_lr, Adam, Attention, Builder, LayerNorm, Linear};

pub trait Enhancer: Send + Sync {
    fn id(&self) -> &str;
    fn enhance(&self, waveform: &[f64]) -> Vec<f64>;
}

pub struct Passthrough;

impl Enhancer for Passthrough {
    fn id(&self) -> &str {
        "passthrough"
    }

    fn enhance(&self, waveform: &[f64]) -> Vec<f64> {
        waveform.to_vec()
    }
}

/// Power spectral subtraction with a per-bin noise floor estimated from a
/// low quantile over frames.
#[derive(Debug, Clone)]
pub struct SpectralGate {
    pub quantile: f64,
    pub oversubtract: f64,
    /// Minimum power gain.
    pub floor: f64,
    /// Per-bin noise estimates are capped at this multiple of their median.
    pub cap: f64,
}

impl Default for SpectralGate {
    fn default() -> Self {
        Self {
            quantile: 0.2,
            oversubtract: 2.0,
            floor: 0.01,
            cap: 2.0,
        }
    }
}

impl Enhancer for SpectralGate {
    fn id(&self) -> &str {
        "spectral-gate"
    }

    fn enhance(&self, waveform: &[f64]) -> Vec<f64> {
        if waveform.is_empty() {
            return Vec::new();
        }
        let mut spec = dsp::stft(waveform);
        let frames = spec.len();
        // For exponentially distributed periodogram values the q-quantile sits
        // at -ln(1-q) times the mean.
        let correction = -(1.0 - self.quantile).ln();
        let qi = ((frames as f64 - 1.0) * self.quantile).round() as usize;
        let mut noise = vec![0.0; dsp::NBINS];
        let mut col = Vec::with_capacity(frames);
        for (k, n) in noise.iter_mut().enumerate() {
            col.clear();
            col.extend(spec.iter().map(|f| f[k].norm_sqr()));
            col.sort_by(f64::total_cmp);
            *n = col[qi] / correction;
        }
        // Bins occupied by speech in most frames overestimate the floor; cap
        // them relative to the typical bin.
        let mut sorted = noise.clone();
        sorted.sort_by(f64::total_cmp);
        let cap = self.cap * sorted[sorted.len() / 2];
        noise.iter_mut().for_each(|n| *n = n.min(cap));
        for frame in spec.iter_mut() {
            for (k, c) in frame.iter_mut().enumerate() {
                let p = c.norm_sqr();
                if p > 0.0 {
                    let gain = (1.0 - self.oversubtract * noise[k] / p).max(self.floor);
                    *c *= gain.sqrt();
                }
            }
        }
        dsp::istft(&spec, waveform.len())
    }
}

pub fn enhancer_by_id(id: &str) -> Result<Box<dyn Enhancer>> {
    match id {
        "spectral-gate" => Ok(Box::new(SpectralGate::default())),
        "passthrough" => Ok(Box::new(Passthrough)),
        _ => Err(Error::UnknownBackend {
            kind: "enhancer",
            id: id.to_string(),
            registered: "spectral-gate, passthrough".into(),
        }),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerEmbedding {
    pub vector: Vec<f64>,
    pub embedder_id: String,
}

pub fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Speaker-verification embedder over codec frames.
pub trait SvEmbedder: Send + Sync {
    fn id(&self) -> &str;
    /// Embedding of a non-empty window, as a unit vector.
    fn embed_raw(&self, frames: &Mat) -> Vec<f64>;

    fn embed(&self, frames: &Mat) -> Result<SpeakerEmbedding> {
        if frames.nrows() == 0 {
            return Err(Error::InvalidArgument("empty codec window".into()));
        }
        Ok(SpeakerEmbedding {
            vector: self.embed_raw(frames),
            embedder_id: self.id().to_string(),
        })
    }
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// Deterministic mock: per-dimension mean and spread of the frames.
pub struct SpecStat;

impl SvEmbedder for SpecStat {
    fn id(&self) -> &str {
        "specstat"
    }

    fn embed_raw(&self, frames: &Mat) -> Vec<f64> {
        let t = frames.nrows() as f64;
        let mean = frames.sum_axis(ndarray::Axis(0)) / t;
        let mut v: Vec<f64> = mean.to_vec();
        for (j, col) in frames.columns().into_iter().enumerate() {
            let var = col.iter().map(|x| (x - mean[j]).powi(2)).sum::<f64>() / t;
            v.push(var.sqrt());
        }
        unit(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvConfig {
    pub hidden: usize,
    pub dim: usize,
    pub steps: usize,
    pub windows_per_speaker: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for SvConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            dim: 32,
            steps: 400,
            windows_per_speaker: 8,
            lr: 2e-3,
            seed: 5,
        }
    }
}

/// Frame MLP, mean/std pooling and a linear projection onto the unit sphere.
#[derive(Debug, Clone)]
pub struct SvModel {
    pub params: ParamSet,
    mean: ParamId,
    inv_std: ParamId,
    l1: Linear,
    l2: Linear,
    out: Linear,
}

/// Fixed similarity scale and offset of the generalized end-to-end loss.
const GE2E_W: f64 = 10.0;
const GE2E_B: f64 = -5.0;
pub const SV_WINDOW_LENGTHS: [usize; 3] = [8, 16, 32];

impl SvModel {
    pub fn new(input_dim: usize, cfg: &SvConfig) -> Self {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut b = Builder::new(&mut params, "sv", &mut rng);
        let mean = b.constant("norm_mean", 1, input_dim, 0.0);
        let inv_std = b.constant("norm_inv_std", 1, input_dim, 1.0);
        let l1 = Linear::new(&mut b, "l1", input_dim, cfg.hidden);
        let l2 = Linear::new(&mut b, "l2", cfg.hidden, cfg.hidden);
        let out = Linear::new(&mut b, "out", 2 * cfg.hidden, cfg.dim);
        Self {
            params,
            mean,
            inv_std,
            l1,
            l2,
            out,
        }
    }

    fn forward(&self, t: &mut Tape, frames: &Mat) -> Var {
        let normed = (frames - self.params.get(self.mean)) * self.params.get(self.inv_std);
        let x = t.leaf(normed);
        let h = self.l1.forward(t, x);
        let h = t.relu(h);
        let h = self.l2.forward(t, h);
        let h = t.relu(h);
        let pooled = t.mean_std_pool(h);
        let e = self.out.forward(t, pooled);
        t.l2_normalize_rows(e)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.write_to(fs::File::create(path)?)?;
        Ok(())
    }

    pub fn load(path: &Path, input_dim: usize, cfg: &SvConfig) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingCheckpoint(path.to_path_buf()));
        }
        let mut m = Self::new(input_dim, cfg);
        m.params.load_from(std::io::BufReader::new(fs::File::open(path)?))?;
        Ok(m)
    }

    /// One GE2E step over `batch[speaker][window]`; returns the loss.
    fn step(&mut self, opt: &mut Adam, batch: &[Vec<Mat>], lr: f64) -> f64 {
        let n_spk = batch.len();
        let m = batch[0].len();
        let mut t = Tape::new(&self.params);
        let mut rows = Vec::with_capacity(n_spk * m);
        for windows in batch {
            for w in windows {
                rows.push(self.forward(&mut t, w));
            }
        }
        let e = t.concat_rows(&rows);
        let mut avg = Mat::zeros((n_spk, n_spk * m));
        for s in 0..n_spk {
            for i in 0..m {
                avg[[s, s * m + i]] = 1.0 / m as f64;
            }
        }
        let avg = t.leaf(avg);
        let centroids = t.matmul(avg, e);
        let centroids = t.l2_normalize_rows(centroids);
        let sim = t.matmul_nt(e, centroids);
        let sim = t.scale(sim, GE2E_W);
        let sim = t.add_scalar(sim, GE2E_B);
        let logp = t.log_softmax_rows(sim);
        let picks: Vec<(usize, usize)> = (0..n_spk * m).map(|r| (r, r / m)).collect();
        let loss = t.nll_picked(logp, &picks);
        let value = t.scalar(loss);
        let mut g: Grads = t.backward(loss).param_grads();
        clip_grad_norm(&mut g, 5.0);
        opt.step(&mut self.params, &g, lr);
        value
    }
}

impl SvEmbedder for SvModel {
    fn id(&self) -> &str {
        "ge2e"
    }

    fn embed_raw(&self, frames: &Mat) -> Vec<f64> {
        let mut t = Tape::new(&self.params);
        let e = self.forward(&mut t, frames);
        t.value(e).row(0).to_vec()
    }
}

fn random_window(frames: &Mat, len: usize, rng: &mut ChaCha8Rng) -> Mat {
    let n = frames.nrows();
    let len = len.min(n);
    let start = rng.random_range(0..=n - len);
    frames.slice(ndarray::s![start..start + len, ..]).to_owned()
}

/// Trains the embedder with the GE2E criterion on codec sequences grouped
/// by speaker. Returns the per-step loss curve.
pub fn train_sv(
    by_speaker: &[Vec<Mat>],
    cfg: &SvConfig,
) -> Result<(SvModel, Vec<f64>)> {
    if by_speaker.len() < 2 || by_speaker.iter().any(|s| s.is_empty()) {
        return Err(Error::InvalidArgument(
            "speaker embedder needs at least two speakers with data".into(),
        ));
    }
    let dim = by_speaker[0][0].ncols();
    let mut model = SvModel::new(dim, cfg);
    let all: Vec<&Mat> = by_speaker.iter().flatten().collect();
    let count: usize = all.iter().map(|m| m.nrows()).sum();
    let mut mean = ndarray::Array1::<f64>::zeros(dim);
    for m in &all {
        mean += &m.sum_axis(ndarray::Axis(0));
    }
    mean /= count as f64;
    let mut var = ndarray::Array1::<f64>::zeros(dim);
    for m in &all {
        for r in m.rows() {
            var += &(&r - &mean).mapv(|v| v * v);
        }
    }
    let inv_std = (var / count as f64).mapv(|v| 1.0 / (v.sqrt() + 1e-3));
    model.params.get_mut(model.mean).row_mut(0).assign(&mean);
    model.params.get_mut(model.inv_std).row_mut(0).assign(&inv_std);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5151);
    let mut opt = Adam::new(&model.params);
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let len = SV_WINDOW_LENGTHS[step % SV_WINDOW_LENGTHS.len()];
        let batch: Vec<Vec<Mat>> = by_speaker
            .iter()
            .map(|utts| {
                (0..cfg.windows_per_speaker)
                    .map(|_| {
                        let u = &utts[rng.random_range(0..utts.len())];
                        random_window(u, len, &mut rng)
                    })
                    .collect()
            })
            .collect();
        let lr = cosine_lr(cfg.lr, step, cfg.steps, 20);
        let loss = model.step(&mut opt, &batch, lr);
        if !loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        curve.push(loss);
    }
    Ok((model, curve))
}

/// Entry index with the smallest L1 distance to `query`; ties go to the
/// lowest index.
pub fn nearest_l1(query: &[f64], table: &Mat) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, row) in table.rows().into_iter().enumerate() {
        let d: f64 = row.iter().zip(query).map(|(a, b)| (a - b).abs()).sum();
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Windows of normal-speech codec frames with their speaker embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalCodecSet {
    pub window: usize,
    /// Each entry is `window x C`.
    pub entries: Vec<Mat>,
    /// `prefix_embeddings[l - 1]` holds, per entry, the embedding of its first
    /// `l` frames; the last table embeds whole entries.
    pub prefix_embeddings: Vec<Mat>,
    pub embedder_id: String,
    pub codec_id: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalSetConfig {
    pub window: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for NormalSetConfig {
    fn default() -> Self {
        Self {
            window: 8,
            size: 4096,
            seed: 13,
        }
    }
}

impl NormalCodecSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Whole-entry embeddings aligned with `entries`.
    pub fn embeddings(&self) -> &Mat {
        self.prefix_embeddings.last().expect("window >= 1")
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(b"DSRN")?;
        w.write_all(&[1u8])?;
        let dim = self.entries.first().map_or(0, |e| e.ncols());
        let edim = self.embeddings().ncols();
        for v in [self.len(), self.window, dim, edim] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for s in [&self.embedder_id, &self.codec_id] {
            w.write_all(&(s.len() as u32).to_le_bytes())?;
            w.write_all(s.as_bytes())?;
        }
        w.write_all(&self.seed.to_le_bytes())?;
        for m in self.entries.iter().chain(&self.prefix_embeddings) {
            for v in m.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic[..4] != b"DSRN" || magic[4] != 1 {
            return Err(Error::Format("not a version-1 normal codec set".into()));
        }
        let mut u32s = [0usize; 4];
        for s in u32s.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *s = u32::from_le_bytes(b) as usize;
        }
        let [count, window, dim, edim] = u32s;
        let read_str = |r: &mut R| -> Result<String> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            let mut s = vec![0u8; u32::from_le_bytes(b) as usize];
            r.read_exact(&mut s)?;
            String::from_utf8(s).map_err(|e| Error::Format(e.to_string()))
        };
        let embedder_id = read_str(&mut r)?;
        let codec_id = read_str(&mut r)?;
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let seed = u64::from_le_bytes(b8);
        let mut read_mat = |rows: usize, cols: usize| -> Result<Mat> {
            let mut buf = vec![0u8; rows * cols * 8];
            r.read_exact(&mut buf)?;
            let vals = buf
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            Ok(Mat::from_shape_vec((rows, cols), vals).expect("sized buffer"))
        };
        let entries = (0..count)
            .map(|_| read_mat(window, dim))
            .collect::<Result<Vec<_>>>()?;
        let prefix_embeddings = (0..window)
            .map(|_| read_mat(count, edim))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            window,
            entries,
            prefix_embeddings,
            embedder_id,
            codec_id,
            seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingCheckpoint(path.to_path_buf()));
        }
        Self::read_from(std::io::BufReader::new(fs::File::open(path)?))
    }

    pub fn checksum(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("in-memory write");
        hex::encode(Sha256::digest(&buf))
    }

    /// Builds a set directly from windows, embedding every prefix length.
    pub fn from_entries(
        entries: Vec<Mat>,
        window: usize,
        embedder: &dyn SvEmbedder,
        codec_id: &str,
        seed: u64,
    ) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidArgument("normal codec set is empty".into()));
        }
        if let Some(bad) = entries.iter().find(|e| e.nrows() != window) {
            return Err(Error::shape("normal set entry frames", window, bad.nrows()));
        }
        let mut prefix_embeddings = Vec::with_capacity(window);
        for l in 1..=window {
            let rows: Vec<Vec<f64>> = entries
                .iter()
                .map(|e| embedder.embed_raw(&e.slice(ndarray::s![..l, ..]).to_owned()))
                .collect();
            let edim = rows[0].len();
            prefix_embeddings.push(
                Mat::from_shape_vec((rows.len(), edim), rows.concat()).expect("equal dims"),
            );
        }
        Ok(Self {
            window,
            entries,
            prefix_embeddings,
            embedder_id: embedder.id().to_string(),
            codec_id: codec_id.to_string(),
            seed,
        })
    }
}

/// Harvests non-overlapping windows from normal-speech codec sequences and
/// subsamples them uniformly to the configured size.
pub fn build_normal_set(
    sequences: &[(f64, &Mat)],
    embedder: &dyn SvEmbedder,
    codec_id: &str,
    cfg: &NormalSetConfig,
) -> Result<NormalCodecSet> {
    if let Some((sev, _)) = sequences.iter().find(|(s, _)| *s != 0.0) {
        return Err(Error::InvalidArgument(format!(
            "normal codec set accepts severity-0 speech only, got severity {sev}"
        )));
    }
    let mut windows = Vec::new();
    for (_, seq) in sequences {
        let mut start = 0;
        while start + cfg.window <= seq.nrows() {
            windows.push(seq.slice(ndarray::s![start..start + cfg.window, ..]).to_owned());
            start += cfg.window;
        }
    }
    if windows.len() > cfg.size {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut idx = rand::seq::index::sample(&mut rng, windows.len(), cfg.size).into_vec();
        idx.sort_unstable();
        windows = idx.into_iter().map(|i| windows[i].clone()).collect();
    } else if windows.len() < cfg.size {
        log::warn!(
            "only {} normal windows available for a target set size of {}",
            windows.len(),
            cfg.size
        );
    }
    NormalCodecSet::from_entries(windows, cfg.window, embedder, codec_id, cfg.seed)
}

/// Replaces each window of `z_hat` by the set entry whose embedding is
/// nearest in L1. A trailing partial window of `l` frames is matched against
/// entry prefixes of length `l`. Returns the chosen entry per window.
pub fn normalize_codec(
    z_hat: &CodecFrameSequence,
    set: &NormalCodecSet,
    embedder: &dyn SvEmbedder,
) -> Result<(CodecFrameSequence, Vec<usize>)> {
    if set.is_empty() {
        return Err(Error::InvalidArgument("normal codec set is empty".into()));
    }
    if embedder.id() != set.embedder_id {
        return Err(Error::InvalidArgument(format!(
            "normal set embedded with {:?}, got embedder {:?}",
            set.embedder_id,
            embedder.id()
        )));
    }
    let dim = set.entries[0].ncols();
    if z_hat.frames.ncols() != dim {
        return Err(Error::shape("codec frames", dim, z_hat.frames.ncols()));
    }
    let n = z_hat.len();
    let mut out = Mat::zeros((n, dim));
    let mut chosen = Vec::with_capacity(n.div_ceil(set.window));
    let mut start = 0;
    while start < n {
        let l = set.window.min(n - start);
        let query = embedder.embed_raw(&z_hat.frames.slice(ndarray::s![start..start + l, ..]).to_owned());
        let (idx, _) = nearest_l1(&query, &set.prefix_embeddings[l - 1]);
        out.slice_mut(ndarray::s![start..start + l, ..])
            .assign(&set.entries[idx].slice(ndarray::s![..l, ..]));
        chosen.push(idx);
        start += l;
    }
    Ok((
        CodecFrameSequence {
            frames: out,
            frame_rate: z_hat.frame_rate,
            source: CodecSource::Normalized,
        },
        chosen,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerPrompt {
    pub frames: Mat,
}

#[derive(Debug, Clone)]
struct TransformerBlock {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

/// Input projection followed by pre-norm self-attention blocks.
#[derive(Debug, Clone)]
pub struct PromptEncoder {
    input: Linear,
    blocks: Vec<TransformerBlock>,
    pub input_dim: usize,
    pub hidden: usize,
}

impl PromptEncoder {
    pub fn new(b: &mut Builder, input_dim: usize, hidden: usize, blocks: usize, heads: usize) -> Self {
        let mut s = b.sub("prompt");
        let input = Linear::new(&mut s, "in", input_dim, hidden);
        let blocks = (0..blocks)
            .map(|i| {
                let mut bb = s.sub(&format!("block{i}"));
                TransformerBlock {
                    ln1: LayerNorm::new(&mut bb, "ln1", hidden),
                    attn: Attention::new(&mut bb, "attn", hidden, hidden, heads),
                    ln2: LayerNorm::new(&mut bb, "ln2", hidden),
                    ff1: Linear::new(&mut bb, "ff1", hidden, 2 * hidden),
                    ff2: Linear::new(&mut bb, "ff2", 2 * hidden, hidden),
                }
            })
            .collect();
        Self {
            input,
            blocks,
            input_dim,
            hidden,
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let mut h = self.input.forward(t, x);
        for blk in &self.blocks {
            let n = blk.ln1.forward(t, h);
            let a = blk.attn.forward(t, n, n);
            h = t.add(h, a);
            let n = blk.ln2.forward(t, h);
            let f = blk.ff1.forward(t, n);
            let f = t.relu(f);
            let f = blk.ff2.forward(t, f);
            h = t.add(h, f);
        }
        h
    }

    pub fn encode(&self, params: &ParamSet, frames: &Mat) -> Result<SpeakerPrompt> {
        if frames.ncols() != self.input_dim {
            return Err(Error::shape("prompt codec frames", self.input_dim, frames.ncols()));
        }
        let mut t = Tape::new(params);
        let x = t.leaf(frames.clone());
        let h = self.forward(&mut t, x);
        Ok(SpeakerPrompt {
            frames: t.value(h).clone(),
        })
    }

    /// Zeroes every block's output projections so blocks reduce to their
    /// residual path.
    pub fn zero_blocks(&self, params: &mut ParamSet) {
        for blk in &self.blocks {
            for id in [blk.attn.out.w, blk.attn.out.b, blk.ff2.w, blk.ff2.b] {
                params.get_mut(id).fill(0.0);
            }
        }
    }

    pub fn input_projection(&self, params: &ParamSet, frames: &Mat) -> Mat {
        frames.dot(params.get(self.input.w)) + params.get(self.input.b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gaussian;
    use crate::synthcorpus::{generate_indexed, PhonemeInventory, SpeakerProfile};

    fn rand_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
        Mat::from_shape_fn((rows, cols), |_| gaussian(rng))
    }

    #[test]
    fn passthrough_and_lengths() {
        let x: Vec<f64> = (0..1234).map(|n| (n as f64 * 0.1).sin()).collect();
        assert_eq!(Passthrough.enhance(&x), x);
        assert_eq!(SpectralGate::default().enhance(&x).len(), x.len());
        assert!(enhancer_by_id("clearervoice").is_err());
    }

    #[test]
    fn spectral_gate_improves_snr() {
        let inv = PhonemeInventory::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut gains = Vec::new();
        for i in 0..5 {
            let spk = SpeakerProfile::generate(i % 4, 4, 1);
            let ph: Vec<usize> = (0..6).map(|j| (i + 3 * j) % 12).collect();
            let clean = generate_indexed(&inv, &ph, &spk, i as u64, "x".into()).unwrap().waveform;
            let p = dsp::energy(&clean) / clean.len() as f64;
            let std = (p / 10.0).sqrt();
            let noisy: Vec<f64> = clean.iter().map(|s| s + std * gaussian(&mut rng)).collect();
            let out = SpectralGate::default().enhance(&noisy);
            gains.push(dsp::snr_db(&clean, &out) - dsp::snr_db(&clean, &noisy));
        }
        assert!(gains.iter().all(|&g| g >= 3.0), "{gains:?}");
    }

    #[test]
    fn specstat_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = rand_mat(10, 6, &mut rng);
        let e = SpecStat.embed(&m).unwrap();
        let norm: f64 = e.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        assert_eq!(e, SpecStat.embed(&m).unwrap());
        assert!(SpecStat.embed(&Mat::zeros((0, 6))).is_err());
    }

    fn random_set(rng: &mut ChaCha8Rng, count: usize, window: usize) -> NormalCodecSet {
        let entries = (0..count).map(|_| rand_mat(window, 4, rng)).collect();
        NormalCodecSet::from_entries(entries, window, &SpecStat, "c", 0).unwrap()
    }

    #[test]
    fn normalizer_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let set = random_set(&mut rng, 64, 4);
        for _ in 0..20 {
            let n = rng.random_range(1..15);
            let z = CodecFrameSequence {
                frames: rand_mat(n, 4, &mut rng),
                frame_rate: 100.0,
                source: CodecSource::Raw,
            };
            let (out, chosen) = normalize_codec(&z, &set, &SpecStat).unwrap();
            assert_eq!(out.len(), n);
            assert_eq!(out.source, CodecSource::Normalized);
            for (w, &c) in chosen.iter().enumerate() {
                let start = w * 4;
                let l = 4.min(n - start);
                let q = SpecStat.embed_raw(&z.frames.slice(ndarray::s![start..start + l, ..]).to_owned());
                let dists: Vec<f64> = set
                    .entries
                    .iter()
                    .map(|e| l1_distance(&q, &SpecStat.embed_raw(&e.slice(ndarray::s![..l, ..]).to_owned())))
                    .collect();
                let best = (0..dists.len())
                    .min_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(a.cmp(&b)))
                    .unwrap();
                assert_eq!(c, best);
            }
            let (again, _) = normalize_codec(&out, &set, &SpecStat).unwrap();
            assert_eq!(again.frames, out.frames);
        }
    }

    #[test]
    fn singleton_and_self_membership() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let set = random_set(&mut rng, 1, 3);
        let z = CodecFrameSequence {
            frames: rand_mat(9, 4, &mut rng),
            frame_rate: 100.0,
            source: CodecSource::Raw,
        };
        let (_, chosen) = normalize_codec(&z, &set, &SpecStat).unwrap();
        assert_eq!(chosen, vec![0, 0, 0]);
        let set = random_set(&mut rng, 10, 3);
        let member = CodecFrameSequence {
            frames: set.entries[7].clone(),
            frame_rate: 100.0,
            source: CodecSource::Raw,
        };
        assert_eq!(normalize_codec(&member, &set, &SpecStat).unwrap().1, vec![7]);
    }

    #[test]
    fn normal_set_builds_and_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let seqs: Vec<Mat> = (0..20).map(|_| rand_mat(40, 4, &mut rng)).collect();
        let input: Vec<(f64, &Mat)> = seqs.iter().map(|m| (0.0, m)).collect();
        let cfg = NormalSetConfig { window: 8, size: 50, seed: 1 };
        let set = build_normal_set(&input, &SpecStat, "c", &cfg).unwrap();
        assert_eq!(set.len(), 50);
        for i in [0, 17, 49] {
            assert_eq!(
                set.embeddings().row(i).to_vec(),
                SpecStat.embed_raw(&set.entries[i])
            );
        }
        let again = build_normal_set(&input, &SpecStat, "c", &cfg).unwrap();
        assert_eq!(set.checksum(), again.checksum());
        let mut buf = Vec::new();
        set.write_to(&mut buf).unwrap();
        assert_eq!(NormalCodecSet::read_from(&buf[..]).unwrap(), set);
        let dirty = vec![(0.7, &seqs[0])];
        assert!(build_normal_set(&dirty, &SpecStat, "c", &cfg).is_err());
    }

    #[test]
    fn prompt_encoder_shapes_and_residual_identity() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let enc = {
            let mut b = Builder::new(&mut params, "g", &mut rng);
            PromptEncoder::new(&mut b, 6, 16, 2, 4)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_mat(11, 6, &mut rng);
        let p = enc.encode(&params, &x).unwrap();
        assert_eq!(p.frames.dim(), (11, 16));
        // Each item is encoded independently of any other.
        let y = rand_mat(5, 6, &mut rng);
        let py = enc.encode(&params, &y).unwrap();
        assert_eq!(enc.encode(&params, &x).unwrap(), p);
        assert_eq!(enc.encode(&params, &y).unwrap(), py);
        assert!(enc.encode(&params, &Mat::zeros((3, 5))).is_err());
        enc.zero_blocks(&mut params);
        let p = enc.encode(&params, &x).unwrap();
        let proj = enc.input_projection(&params, &x);
        assert!(p.frames.iter().zip(proj.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn ge2e_training_separates_speakers() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        // Speakers differ in their mean frame.
        let data: Vec<Vec<Mat>> = (0..4)
            .map(|s| {
                (0..6)
                    .map(|_| rand_mat(40, 5, &mut rng) * 0.5 + (s as f64))
                    .collect()
            })
            .collect();
        let cfg = SvConfig { steps: 60, hidden: 16, dim: 8, ..Default::default() };
        let (model, curve) = train_sv(&data, &cfg).unwrap();
        assert!(curve.last().unwrap() < &curve[0]);
        let e = model.embed(&data[0][0]).unwrap();
        let norm: f64 = e.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }
}
