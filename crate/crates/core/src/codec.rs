//! Feature-domain toy codec: compressed mel analysis, an orthonormal latent
//! projection, residual vector quantization and a Griffin-Lim synthesizer.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use sha2::{Digest, Sha256};

use crate::autograd::Mat;
use crate::dsp;
use crate::error::{Error, Result};

/// Where a codec sequence came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodecSource {
    Raw,
    Normalized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodecFrameSequence {
    pub frames: Mat,
    pub frame_rate: f64,
    pub source: CodecSource,
}

impl CodecFrameSequence {
    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }
}

/// Continuous latent frames at diffusion time `time` (0 = clean).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence {
    pub frames: Mat,
    pub time: f64,
}

pub const FRAME_RATE: f64 = dsp::SAMPLE_RATE as f64 / dsp::HOP as f64;
const EXPONENT: f64 = 1.0 / 3.0;

#[derive(Debug, Clone, PartialEq)]
pub struct CodecConfig {
    pub latent_dim: usize,
    pub stages: usize,
    pub codebook_size: usize,
    pub kmeans_iters: usize,
    /// Training frames are subsampled to at most this many.
    pub max_frames: usize,
    pub griffin_lim_iters: usize,
    pub seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            latent_dim: 64,
            stages: 4,
            codebook_size: 256,
            kmeans_iters: 15,
            max_frames: 16_000,
            griffin_lim_iters: 32,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodecModel {
    /// Orthonormal columns, `bands x latent_dim`.
    pub projection: Mat,
    /// One `codebook_size x latent_dim` table per stage.
    pub codebooks: Vec<Mat>,
    pub griffin_lim_iters: usize,
}

/// Result of encoding one waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecEncoding {
    pub quantized: CodecFrameSequence,
    pub latent: LatentSequence,
    /// Chosen entry per stage for every frame.
    pub codes: Vec<Vec<usize>>,
}

/// Per-stage outcome of codec training.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecReport {
    /// Mean squared residual norm after each stage (index 0 = before any).
    pub residual_energy: Vec<f64>,
    pub train_snr_db: f64,
    pub frames: usize,
}

/// Cube-root compressed mel power, `frames x bands`.
pub fn analysis_features(waveform: &[f64]) -> Mat {
    dsp::mel_power(waveform).mapv(|p| p.max(0.0).powf(EXPONENT))
}

pub fn feature_snr_db(reference: &Mat, estimate: &Mat) -> f64 {
    let sig: f64 = reference.iter().map(|v| v * v).sum();
    let err: f64 = reference
        .iter()
        .zip(estimate.iter())
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    10.0 * (sig / err.max(1e-300)).log10()
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Index of the nearest row of `book` to `x`; ties go to the lowest index.
pub fn nearest_entry(book: &Mat, x: ndarray::ArrayView1<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, e) in book.rows().into_iter().enumerate() {
        let d = sq_dist(e, x);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// K-means with k-means++ seeding. Entry 0 is pinned to the zero vector so
/// a stage can always leave a residual unchanged.
fn kmeans(data: &Mat, k: usize, iters: usize, rng: &mut ChaCha8Rng) -> Result<Mat> {
    let (n, c) = data.dim();
    let mut distinct = 0;
    {
        let mut seen: Vec<ndarray::ArrayView1<f64>> = Vec::new();
        for r in data.rows() {
            if r.iter().any(|&v| v != 0.0) && !seen.contains(&r) {
                seen.push(r);
                distinct += 1;
                if distinct >= k {
                    break;
                }
            }
        }
    }
    if distinct + 1 < k {
        return Err(Error::TooFewFrames {
            needed: k,
            got: distinct + 1,
        });
    }
    let mut book = Mat::zeros((k, c));
    let mut d2: Vec<f64> = data.rows().into_iter().map(|r| r.dot(&r)).collect();
    for j in 1..k {
        let total: f64 = d2.iter().sum();
        let mut target = rng.random::<f64>() * total;
        let mut pick = n - 1;
        for (i, &d) in d2.iter().enumerate() {
            if target < d {
                pick = i;
                break;
            }
            target -= d;
        }
        if d2[pick] == 0.0 {
            pick = (0..n).max_by(|&a, &b| d2[a].total_cmp(&d2[b])).unwrap();
        }
        book.row_mut(j).assign(&data.row(pick));
        for (i, r) in data.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(r, book.row(j)));
        }
    }
    let mut assign = vec![0usize; n];
    for _ in 0..iters {
        let mut dist = vec![0.0; n];
        for (i, r) in data.rows().into_iter().enumerate() {
            let (a, d) = nearest_entry(&book, r);
            assign[i] = a;
            dist[i] = d;
        }
        let mut sums = Mat::zeros((k, c));
        let mut counts = vec![0usize; k];
        for (i, r) in data.rows().into_iter().enumerate() {
            sums.row_mut(assign[i]).scaled_add(1.0, &r);
            counts[assign[i]] += 1;
        }
        // Empty clusters take over the worst-quantized points.
        let mut worst: Vec<usize> = (0..n).collect();
        worst.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
        let mut next = 0;
        for j in 1..k {
            if counts[j] > 0 {
                let m = &sums.row(j) / counts[j] as f64;
                book.row_mut(j).assign(&m);
            } else if next < n {
                book.row_mut(j).assign(&data.row(worst[next]));
                next += 1;
            }
        }
    }
    Ok(book)
}

impl CodecModel {
    pub fn latent_dim(&self) -> usize {
        self.projection.ncols()
    }

    pub fn bands(&self) -> usize {
        self.projection.nrows()
    }

    pub fn stages(&self) -> usize {
        self.codebooks.len()
    }

    pub fn codebook_size(&self) -> usize {
        self.codebooks.first().map_or(0, |b| b.nrows())
    }

    /// Short content hash identifying this codec.
    pub fn codec_id(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("in-memory write");
        hex::encode(&Sha256::digest(&buf)[..6])
    }

    pub fn latents_of_features(&self, feats: &Mat) -> Result<Mat> {
        if feats.ncols() != self.bands() {
            return Err(Error::shape("codec features", self.bands(), feats.ncols()));
        }
        Ok(feats.dot(&self.projection))
    }

    /// Residual quantization of latent frames.
    pub fn quantize(&self, z: &Mat) -> (Mat, Vec<Vec<usize>>) {
        let mut residual = z.clone();
        let mut q = Mat::zeros(z.dim());
        let mut codes = vec![Vec::with_capacity(self.stages()); z.nrows()];
        for book in &self.codebooks {
            for (i, mut r) in residual.rows_mut().into_iter().enumerate() {
                let (j, _) = nearest_entry(book, r.view());
                r -= &book.row(j);
                q.row_mut(i).scaled_add(1.0, &book.row(j));
                codes[i].push(j);
            }
        }
        (q, codes)
    }

    /// Per-frame residual norms after each stage; column 0 is the input norm.
    pub fn residual_norms(&self, z: &Mat) -> Mat {
        let mut out = Mat::zeros((z.nrows(), self.stages() + 1));
        let mut residual = z.clone();
        for (i, r) in residual.rows().into_iter().enumerate() {
            out[[i, 0]] = r.dot(&r).sqrt();
        }
        for (s, book) in self.codebooks.iter().enumerate() {
            for (i, mut r) in residual.rows_mut().into_iter().enumerate() {
                let (j, _) = nearest_entry(book, r.view());
                r -= &book.row(j);
                out[[i, s + 1]] = r.dot(&r).sqrt();
            }
        }
        out
    }

    pub fn encode(&self, waveform: &[f64]) -> Result<CodecEncoding> {
        let z = self.latents_of_features(&analysis_features(waveform))?;
        let (q, codes) = self.quantize(&z);
        Ok(CodecEncoding {
            quantized: CodecFrameSequence {
                frames: q,
                frame_rate: FRAME_RATE,
                source: CodecSource::Raw,
            },
            latent: LatentSequence { frames: z, time: 0.0 },
            codes,
        })
    }

    /// Latents back to compressed mel features.
    pub fn decode_features(&self, z: &Mat) -> Result<Mat> {
        if z.ncols() != self.latent_dim() {
            return Err(Error::shape("codec latent", self.latent_dim(), z.ncols()));
        }
        Ok(z.dot(&self.projection.t()))
    }

    /// Latents to a waveform of `frames * HOP` samples.
    pub fn decode(&self, z: &Mat) -> Result<Vec<f64>> {
        let feats = self.decode_features(z)?;
        let mel = feats.mapv(|v| v.max(0.0).powi(3));
        let power = mel_to_linear(&mel);
        Ok(griffin_lim(&power, z.nrows() * dsp::HOP, self.griffin_lim_iters))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(b"DSRC")?;
        w.write_all(&[1u8])?;
        for v in [
            self.bands(),
            self.latent_dim(),
            self.stages(),
            self.codebook_size(),
            dsp::HOP,
            self.griffin_lim_iters,
        ] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for m in std::iter::once(&self.projection).chain(&self.codebooks) {
            for v in m.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic[..4] != b"DSRC" || magic[4] != 1 {
            return Err(Error::Format("not a version-1 codec checkpoint".into()));
        }
        let mut u = [0usize; 6];
        for slot in u.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *slot = u32::from_le_bytes(b) as usize;
        }
        let [bands, c, stages, k, hop, gl] = u;
        if hop != dsp::HOP {
            return Err(Error::Format(format!("codec hop {hop}, expected {}", dsp::HOP)));
        }
        let mut read_mat = |rows: usize, cols: usize| -> Result<Mat> {
            let mut buf = vec![0u8; rows * cols * 8];
            r.read_exact(&mut buf)?;
            let vals = buf
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            Ok(Mat::from_shape_vec((rows, cols), vals).expect("sized buffer"))
        };
        let projection = read_mat(bands, c)?;
        let codebooks = (0..stages)
            .map(|_| read_mat(k, c))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            projection,
            codebooks,
            griffin_lim_iters: gl,
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
}

/// Non-negative bin powers whose mel projection approximates `mel`, by
/// multiplicative least-squares updates.
fn mel_to_linear(mel: &Mat) -> Mat {
    let w = &dsp::mel_bank().weights;
    let area: Vec<f64> = w.columns().into_iter().map(|c| c.sum()).collect();
    let scaled = Mat::from_shape_fn(mel.dim(), |(t, b)| mel[[t, b]] / area[b].max(1e-12));
    let mut p = scaled.dot(&w.t());
    let wwt = w.dot(&w.t());
    let target = mel.dot(&w.t());
    for _ in 0..30 {
        let denom = p.dot(&wwt);
        ndarray::Zip::from(&mut p)
            .and(&target)
            .and(&denom)
            .for_each(|p, &n, &d| *p *= n / (d + 1e-12));
    }
    p
}

/// Griffin-Lim phase recovery for a power spectrogram.
pub fn griffin_lim(power: &Mat, len: usize, iters: usize) -> Vec<f64> {
    let mag = power.mapv(|p| p.max(0.0).sqrt());
    let mut rng = ChaCha8Rng::seed_from_u64(0x6A11);
    let mut spec: Vec<Vec<Complex64>> = mag
        .rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .map(|&m| Complex64::from_polar(m, rng.random_range(0.0..std::f64::consts::TAU)))
                .collect()
        })
        .collect();
    for _ in 0..iters {
        let x = dsp::istft(&spec, len);
        let re = dsp::stft(&x);
        for (t, frame) in spec.iter_mut().enumerate() {
            for (k, c) in frame.iter_mut().enumerate() {
                let phase = re.get(t).map_or(0.0, |f| f[k].arg());
                *c = Complex64::from_polar(mag[[t, k]], phase);
            }
        }
    }
    dsp::istft(&spec, len)
}

/// Leading eigenvectors of the uncentered feature second-moment matrix.
fn principal_projection(feats: &Mat, dim: usize) -> Result<Mat> {
    let bands = feats.ncols();
    if dim > bands {
        return Err(Error::InvalidArgument(format!(
            "latent dim {dim} exceeds feature bands {bands}"
        )));
    }
    let gram = feats.t().dot(feats);
    let m = nalgebra::DMatrix::from_fn(bands, bands, |i, j| gram[[i, j]]);
    let eig = nalgebra::SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..bands).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut proj = Mat::zeros((bands, dim));
    for (j, &src) in order.iter().take(dim).enumerate() {
        let v = eig.eigenvectors.column(src);
        // Fix the sign so the largest-magnitude component is positive.
        let pivot = (0..bands)
            .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()))
            .unwrap();
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..bands {
            proj[[i, j]] = sign * v[i];
        }
    }
    Ok(proj)
}

/// Fits the codec on normal-speech waveforms.
pub fn train_codec(waveforms: &[Vec<f64>], cfg: &CodecConfig) -> Result<(CodecModel, CodecReport)> {
    let mut rows: Vec<Mat> = waveforms.iter().map(|w| analysis_features(w)).collect();
    let total: usize = rows.iter().map(|m| m.nrows()).sum();
    if total < cfg.codebook_size {
        return Err(Error::TooFewFrames {
            needed: cfg.codebook_size,
            got: total,
        });
    }
    let views: Vec<_> = rows.iter_mut().map(|m| m.view()).collect();
    let mut feats = ndarray::concatenate(ndarray::Axis(0), &views).expect("equal band counts");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    if feats.nrows() > cfg.max_frames {
        let mut idx = rand::seq::index::sample(&mut rng, feats.nrows(), cfg.max_frames).into_vec();
        idx.sort_unstable();
        feats = feats.select(ndarray::Axis(0), &idx);
    }
    let projection = principal_projection(&feats, cfg.latent_dim)?;
    let z = feats.dot(&projection);
    let n = z.nrows() as f64;
    let mut residual = z.clone();
    let mut energy = vec![residual.iter().map(|v| v * v).sum::<f64>() / n];
    let mut codebooks = Vec::with_capacity(cfg.stages);
    for _ in 0..cfg.stages {
        let book = kmeans(&residual, cfg.codebook_size, cfg.kmeans_iters, &mut rng)?;
        for mut r in residual.rows_mut() {
            let (j, _) = nearest_entry(&book, r.view());
            r -= &book.row(j);
        }
        energy.push(residual.iter().map(|v| v * v).sum::<f64>() / n);
        codebooks.push(book);
    }
    let model = CodecModel {
        projection,
        codebooks,
        griffin_lim_iters: cfg.griffin_lim_iters,
    };
    let recon = model.decode_features(&z)?;
    let report = CodecReport {
        residual_energy: energy,
        train_snr_db: feature_snr_db(&feats, &recon),
        frames: feats.nrows(),
    };
    log::info!(
        "codec trained on {} frames, feature SNR {:.2} dB",
        report.frames,
        report.train_snr_db
    );
    Ok((model, report))
}
