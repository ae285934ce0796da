//! Framing, STFT, mel filterbank and WAV I/O shared by every front-end.

use std::path::Path;
use std::sync::{Arc, OnceLock};

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::autograd::Mat;
use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
/// 10 ms hop: one feature, codec or duration frame.
pub const HOP: usize = 160;
pub const WIN: usize = 400;
pub const NFFT: usize = 512;
pub const NBINS: usize = NFFT / 2 + 1;

fn fft() -> &'static (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>) {
    static PLAN: OnceLock<(Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>)> = OnceLock::new();
    PLAN.get_or_init(|| {
        let mut p = FftPlanner::new();
        (p.plan_fft_forward(NFFT), p.plan_fft_inverse(NFFT))
    })
}

fn hann() -> &'static [f64] {
    static W: OnceLock<Vec<f64>> = OnceLock::new();
    W.get_or_init(|| {
        (0..WIN)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / WIN as f64).cos())
            .collect()
    })
}

/// Number of analysis frames for a signal: one per started hop.
pub fn frame_count(samples: usize) -> usize {
    samples.div_ceil(HOP).max(1)
}

/// First sample of the window for frame `i` (may be negative; zero padded).
fn frame_start(i: usize) -> isize {
    (i * HOP + HOP / 2) as isize - (WIN / 2) as isize
}

/// Complex STFT, `frames x NBINS`.
pub fn stft(signal: &[f64]) -> Vec<Vec<Complex64>> {
    let (fwd, _) = fft();
    let win = hann();
    let frames = frame_count(signal.len());
    let mut out = Vec::with_capacity(frames);
    let mut buf = vec![Complex64::new(0.0, 0.0); NFFT];
    for i in 0..frames {
        buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        let start = frame_start(i);
        for (n, &w) in win.iter().enumerate() {
            let idx = start + n as isize;
            if idx >= 0 && (idx as usize) < signal.len() {
                buf[n].re = signal[idx as usize] * w;
            }
        }
        fwd.process(&mut buf);
        out.push(buf[..NBINS].to_vec());
    }
    out
}

/// Weighted overlap-add inverse of [`stft`] producing `len` samples.
pub fn istft(spec: &[Vec<Complex64>], len: usize) -> Vec<f64> {
    let (_, inv) = fft();
    let win = hann();
    let mut out = vec![0.0; len];
    let mut norm = vec![0.0; len];
    let mut buf = vec![Complex64::new(0.0, 0.0); NFFT];
    for (i, frame) in spec.iter().enumerate() {
        buf[..NBINS].copy_from_slice(frame);
        for k in 1..NFFT - NBINS + 1 {
            buf[NFFT - k] = frame[k].conj();
        }
        inv.process(&mut buf);
        let start = frame_start(i);
        for (n, &w) in win.iter().enumerate() {
            let idx = start + n as isize;
            if idx >= 0 && (idx as usize) < len {
                out[idx as usize] += buf[n].re / NFFT as f64 * w;
                norm[idx as usize] += w * w;
            }
        }
    }
    for (o, n) in out.iter_mut().zip(norm) {
        if n > 1e-10 {
            *o /= n;
        }
    }
    out
}

pub fn power_spectrogram(signal: &[f64]) -> Mat {
    let spec = stft(signal);
    let mut out = Mat::zeros((spec.len(), NBINS));
    for (i, frame) in spec.iter().enumerate() {
        for (k, c) in frame.iter().enumerate() {
            out[[i, k]] = c.norm_sqr();
        }
    }
    out
}

/// Triangular mel filterbank (HTK mel scale), `NBINS x bands`.
#[derive(Debug, Clone)]
pub struct MelBank {
    pub weights: Mat,
    /// FFT bin closest to each band centre.
    pub centre_bins: Vec<usize>,
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

impl MelBank {
    pub fn new(bands: usize, fmin: f64, fmax: f64) -> Self {
        let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
        let edges: Vec<f64> = (0..bands + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (bands + 1) as f64))
            .collect();
        let bin_hz = SAMPLE_RATE as f64 / NFFT as f64;
        let mut weights = Mat::zeros((NBINS, bands));
        let mut centre_bins = Vec::with_capacity(bands);
        for b in 0..bands {
            let (l, c, r) = (edges[b], edges[b + 1], edges[b + 2]);
            for k in 0..NBINS {
                let f = k as f64 * bin_hz;
                let w = if f > l && f <= c {
                    (f - l) / (c - l)
                } else if f > c && f < r {
                    (r - f) / (r - c)
                } else {
                    0.0
                };
                weights[[k, b]] = w;
            }
            centre_bins.push(((c / bin_hz).round() as usize).min(NBINS - 1));
        }
        Self {
            weights,
            centre_bins,
        }
    }

    pub fn bands(&self) -> usize {
        self.weights.ncols()
    }

    pub fn apply(&self, power: &Mat) -> Mat {
        power.dot(&self.weights)
    }
}

/// Shared 80-band mel bank over the full band.
pub fn mel_bank() -> &'static MelBank {
    static BANK: OnceLock<MelBank> = OnceLock::new();
    BANK.get_or_init(|| MelBank::new(80, 0.0, SAMPLE_RATE as f64 / 2.0))
}

pub fn mel_power(signal: &[f64]) -> Mat {
    mel_bank().apply(&power_spectrogram(signal))
}

/// Sum of the squared Hann window, i.e. the STFT power gain of a unit-energy
/// sinusoid aligned to a bin is `(sum(w) / 2)^2`.
pub fn window_sum() -> f64 {
    hann().iter().sum()
}

pub fn read_wav(path: &Path) -> Result<Vec<f64>> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.sample_rate != SAMPLE_RATE || spec.bits_per_sample != 16 {
        return Err(Error::Format(format!(
            "{}: expected 16-bit mono {} Hz PCM, got {}-bit {} ch {} Hz",
            path.display(),
            SAMPLE_RATE,
            spec.bits_per_sample,
            spec.channels,
            spec.sample_rate
        )));
    }
    reader
        .samples::<i16>()
        .map(|s| Ok(s? as f64 / 32768.0))
        .collect()
}

pub fn write_wav(path: &Path, samples: &[f64]) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &s in samples {
        w.write_sample(quantize_i16(s))?;
    }
    w.finalize()?;
    Ok(())
}

pub fn quantize_i16(s: f64) -> i16 {
    (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Round-trips a signal through 16-bit PCM so in-memory audio matches what a
/// reader of the written file sees.
pub fn pcm16(samples: &[f64]) -> Vec<f64> {
    samples
        .iter()
        .map(|&s| quantize_i16(s) as f64 / 32768.0)
        .collect()
}

pub fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

pub fn snr_db(reference: &[f64], estimate: &[f64]) -> f64 {
    let n = reference.len().min(estimate.len());
    let sig = energy(&reference[..n]);
    let err: f64 = reference[..n]
        .iter()
        .zip(&estimate[..n])
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    10.0 * (sig / err.max(1e-300)).log10()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stft_istft_reconstructs() {
        let x: Vec<f64> = (0..3200).map(|n| (n as f64 * 0.05).sin() * 0.3).collect();
        let y = istft(&stft(&x), x.len());
        assert!(snr_db(&x, &y) > 100.0);
    }

    #[test]
    fn frame_bookkeeping() {
        assert_eq!(frame_count(16_000), 100);
        assert_eq!(frame_count(161), 2);
        assert_eq!(frame_count(0), 1);
        assert_eq!(power_spectrogram(&vec![0.0; 1600]).nrows(), 10);
    }

    #[test]
    fn mel_bank_partitions_spectrum() {
        let bank = mel_bank();
        assert_eq!(bank.weights.dim(), (NBINS, 80));
        for (b, &c) in bank.centre_bins.iter().enumerate().skip(10) {
            assert!(bank.weights[[c, b]] > 0.5, "band {b}");
        }
    }

    #[test]
    fn pcm_round_trip_is_stable() {
        let x = [0.1, -0.5, 0.99999, -1.0];
        assert_eq!(pcm16(&pcm16(&x)), pcm16(&x));
    }
}
