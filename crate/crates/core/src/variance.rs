//! Variance adaptor: speaker-conditioned duration and pitch predictors,
//! length regulation and assembly of the frame-level condition.

use crate::autograd::{Mat, ParamId, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Attention, Builder, Conv1d, Linear};
use crate::speaker::SpeakerPrompt;

/// Pitch predictor output `y` maps to `PITCH_CENTER + PITCH_SCALE * y` Hz.
pub const PITCH_CENTER: f64 = 150.0;
pub const PITCH_SCALE: f64 = 50.0;
pub const PITCH_BINS: usize = 64;
pub const PITCH_MIN: f64 = 50.0;
pub const PITCH_MAX: f64 = 500.0;

#[derive(Debug, Clone, PartialEq)]
pub struct DurationSeq {
    /// Predicted log-durations before rounding.
    pub log_frames: Vec<f64>,
    pub frames: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PitchContour {
    pub hz: Vec<f64>,
    pub voiced: Vec<bool>,
}

impl PitchContour {
    pub fn from_hz(hz: Vec<f64>) -> Self {
        let voiced = hz.iter().map(|&f| f > 0.0).collect();
        Self { hz, voiced }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameCondition {
    pub frames: Mat,
}

/// Round half up, at least one frame.
pub fn round_duration(log_frames: f64) -> usize {
    let d = (log_frames.exp() + 0.5).floor();
    if d.is_finite() {
        (d as usize).max(1)
    } else {
        1
    }
}

/// Row index into the token array for every output frame.
pub fn expansion_index(durations: &[usize]) -> Vec<usize> {
    durations
        .iter()
        .enumerate()
        .flat_map(|(i, &d)| std::iter::repeat_n(i, d))
        .collect()
}

/// Repeats token `i` `durations[i]` times.
pub fn length_regulate(hidden: &Mat, durations: &[i64]) -> Result<Mat> {
    if hidden.nrows() != durations.len() {
        return Err(Error::shape("durations", hidden.nrows(), durations.len()));
    }
    if let Some(&d) = durations.iter().find(|&&d| d < 0) {
        return Err(Error::InvalidArgument(format!("negative duration {d}")));
    }
    let d: Vec<usize> = durations.iter().map(|&d| d as usize).collect();
    Ok(hidden.select(ndarray::Axis(0), &expansion_index(&d)))
}

/// Unvoiced frames use bin 0; voiced pitch falls in one of 64 log-spaced
/// bins over [50, 500] Hz, clamped at the ends.
pub fn pitch_bin(hz: f64) -> usize {
    if hz <= 0.0 || hz.is_nan() {
        return 0;
    }
    let x = (hz.ln() - PITCH_MIN.ln()) / (PITCH_MAX.ln() - PITCH_MIN.ln());
    1 + ((x * PITCH_BINS as f64).floor().clamp(0.0, (PITCH_BINS - 1) as f64) as usize)
}

/// Conv stack, cross-attention to the speaker prompt, scalar head.
#[derive(Debug, Clone)]
pub struct Predictor {
    c1: Conv1d,
    c2: Conv1d,
    attn: Attention,
    pub head: Linear,
}

impl Predictor {
    fn new(b: &mut Builder, name: &str, hidden: usize, prompt_dim: usize, heads: usize) -> Self {
        let mut s = b.sub(name);
        Self {
            c1: Conv1d::new(&mut s, "c1", hidden, hidden, 3, 1),
            c2: Conv1d::new(&mut s, "c2", hidden, hidden, 3, 1),
            attn: Attention::new(&mut s, "attn", hidden, prompt_dim, heads),
            head: Linear::new(&mut s, "head", hidden, 1),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var, prompt: Var) -> Var {
        let h = self.c1.forward(t, x);
        let h = t.relu(h);
        let h = self.c2.forward(t, h);
        let h = t.relu(h);
        let a = self.attn.forward(t, h, prompt);
        let h = t.add(h, a);
        self.head.forward(t, h)
    }
}

#[derive(Debug, Clone)]
pub struct VarianceAdaptor {
    token_embed: Linear,
    pub duration: Predictor,
    pub pitch: Predictor,
    pitch_table: ParamId,
    pub vocab: usize,
    pub hidden: usize,
    pub prompt_dim: usize,
}

/// Everything the adaptor produces for one utterance at inference.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptorOutput {
    pub durations: DurationSeq,
    pub pitch: PitchContour,
    pub condition: FrameCondition,
}

impl VarianceAdaptor {
    pub fn new(b: &mut Builder, vocab: usize, hidden: usize, prompt_dim: usize, heads: usize) -> Self {
        let mut s = b.sub("variance");
        Self {
            token_embed: Linear::new(&mut s, "tokens", vocab, hidden),
            duration: Predictor::new(&mut s, "duration", hidden, prompt_dim, heads),
            pitch: Predictor::new(&mut s, "pitch", hidden, prompt_dim, heads),
            pitch_table: s.normal("pitch_table", PITCH_BINS + 1, hidden, 0.1),
            vocab,
            hidden,
            prompt_dim,
        }
    }

    /// Token distributions (`L x vocab`) to token hiddens.
    pub fn token_hidden(&self, t: &mut Tape, tokens: Var) -> Var {
        self.token_embed.forward(t, tokens)
    }

    pub fn expand(&self, t: &mut Tape, hidden: Var, durations: &[usize]) -> Var {
        t.gather_rows(hidden, expansion_index(durations))
    }

    pub fn condition(&self, t: &mut Tape, expanded: Var, pitch_hz: &[f64]) -> Var {
        let table = t.param(self.pitch_table);
        let emb = t.gather_rows(table, pitch_hz.iter().map(|&f| pitch_bin(f)).collect());
        t.add(expanded, emb)
    }

    fn check(&self, what: &str, m: &Mat, cols: usize) -> Result<()> {
        if m.ncols() != cols {
            return Err(Error::shape(what, cols, m.ncols()));
        }
        Ok(())
    }

    pub fn predict_duration(
        &self,
        params: &ParamSet,
        tokens: &Mat,
        prompt: &SpeakerPrompt,
    ) -> Result<DurationSeq> {
        self.check("token vectors", tokens, self.vocab)?;
        self.check("speaker prompt", &prompt.frames, self.prompt_dim)?;
        let mut t = Tape::new(params);
        let x = t.leaf(tokens.clone());
        let zp = t.leaf(prompt.frames.clone());
        let h = self.token_hidden(&mut t, x);
        let out = self.duration.forward(&mut t, h, zp);
        let log_frames: Vec<f64> = t.value(out).column(0).to_vec();
        Ok(DurationSeq {
            frames: log_frames.iter().map(|&l| round_duration(l)).collect(),
            log_frames,
        })
    }

    /// Frame-level pitch from expanded hiddens (`F x hidden`).
    pub fn predict_pitch(
        &self,
        params: &ParamSet,
        expanded: &Mat,
        prompt: &SpeakerPrompt,
    ) -> Result<PitchContour> {
        self.check("expanded hidden", expanded, self.hidden)?;
        self.check("speaker prompt", &prompt.frames, self.prompt_dim)?;
        let mut t = Tape::new(params);
        let x = t.leaf(expanded.clone());
        let zp = t.leaf(prompt.frames.clone());
        let out = self.pitch.forward(&mut t, x, zp);
        let hz = t
            .value(out)
            .column(0)
            .iter()
            .map(|&y| (PITCH_CENTER + PITCH_SCALE * y).max(PITCH_MIN))
            .collect();
        Ok(PitchContour::from_hz(hz))
    }

    pub fn build_condition(
        &self,
        params: &ParamSet,
        expanded: &Mat,
        pitch: &PitchContour,
    ) -> Result<FrameCondition> {
        self.check("expanded hidden", expanded, self.hidden)?;
        if pitch.hz.len() != expanded.nrows() {
            return Err(Error::shape("pitch frames", expanded.nrows(), pitch.hz.len()));
        }
        let mut t = Tape::new(params);
        let x = t.leaf(expanded.clone());
        let c = self.condition(&mut t, x, &pitch.hz);
        Ok(FrameCondition {
            frames: t.value(c).clone(),
        })
    }

    /// Token hiddens for token distributions, without a tape.
    pub fn hidden_of(&self, params: &ParamSet, tokens: &Mat) -> Result<Mat> {
        self.check("token vectors", tokens, self.vocab)?;
        let mut t = Tape::new(params);
        let x = t.leaf(tokens.clone());
        let h = self.token_hidden(&mut t, x);
        Ok(t.value(h).clone())
    }

    /// Durations, then pitch on the expanded hiddens, then the condition.
    pub fn infer(&self, params: &ParamSet, tokens: &Mat, prompt: &SpeakerPrompt) -> Result<AdaptorOutput> {
        let durations = self.predict_duration(params, tokens, prompt)?;
        let hidden = self.hidden_of(params, tokens)?;
        let d: Vec<i64> = durations.frames.iter().map(|&d| d as i64).collect();
        let expanded = length_regulate(&hidden, &d)?;
        let pitch = self.predict_pitch(params, &expanded, prompt)?;
        let condition = self.build_condition(params, &expanded, &pitch)?;
        Ok(AdaptorOutput {
            durations,
            pitch,
            condition,
        })
    }

    pub fn zero_heads(&self, params: &mut ParamSet) {
        for p in [&self.duration, &self.pitch] {
            params.get_mut(p.head.w).fill(0.0);
            params.get_mut(p.head.b).fill(0.0);
        }
    }
}

/// Normalized pitch target for a voiced frame.
pub fn pitch_target(hz: f64) -> f64 {
    (hz - PITCH_CENTER) / PITCH_SCALE
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::{max_rel_error_in, param_rel_error};
    use crate::nn::gaussian;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(vocab: usize, hidden: usize, prompt: usize) -> (ParamSet, VarianceAdaptor) {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let va = {
            let mut b = Builder::new(&mut params, "g", &mut rng);
            VarianceAdaptor::new(&mut b, vocab, hidden, prompt, 2)
        };
        (params, va)
    }

    fn rand_mat(r: usize, c: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_shape_fn((r, c), |_| gaussian(&mut rng))
    }

    #[test]
    fn expansion_rules() {
        let h = Mat::from_shape_vec((3, 1), vec![1.0, 2.0, 3.0]).unwrap();
        let out = length_regulate(&h, &[2, 1, 3]).unwrap();
        assert_eq!(out.column(0).to_vec(), vec![1.0, 1.0, 2.0, 3.0, 3.0, 3.0]);
        assert_eq!(length_regulate(&h, &[1, 1, 1]).unwrap(), h);
        let h2 = h.slice(ndarray::s![..2, ..]).to_owned();
        assert_eq!(length_regulate(&h2, &[0, 4]).unwrap().column(0).to_vec(), vec![2.0; 4]);
        assert!(length_regulate(&h2, &[1, -1]).is_err());
        assert!(length_regulate(&h2, &[1]).is_err());
    }

    #[test]
    fn pitch_bins() {
        assert_eq!(pitch_bin(0.0), 0);
        assert_eq!(pitch_bin(50.0), 1);
        assert_eq!(pitch_bin(20.0), 1);
        assert_eq!(pitch_bin(499.9), PITCH_BINS);
        assert_eq!(pitch_bin(5000.0), PITCH_BINS);
        assert!(pitch_bin(100.0) < pitch_bin(200.0));
    }

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(round_duration(0.0), 1);
        assert_eq!(round_duration(2.5f64.ln()), 3);
        assert_eq!(round_duration(2.49f64.ln()), 2);
        assert_eq!(round_duration(-10.0), 1);
    }

    #[test]
    fn zero_heads_give_unit_durations_and_flat_pitch() {
        let (mut params, va) = setup(5, 8, 6);
        va.zero_heads(&mut params);
        let tokens = rand_mat(4, 5, 2);
        let prompt = SpeakerPrompt { frames: rand_mat(7, 6, 3) };
        let out = va.infer(&params, &tokens, &prompt).unwrap();
        assert_eq!(out.durations.frames, vec![1; 4]);
        assert!(out.pitch.hz.iter().all(|&f| f == PITCH_CENTER));
        assert_eq!(out.condition.frames.dim(), (4, 8));
    }

    #[test]
    fn shapes_and_locality() {
        let (params, va) = setup(5, 8, 6);
        let tokens = rand_mat(3, 5, 4);
        let prompt = SpeakerPrompt { frames: rand_mat(5, 6, 5) };
        let d = va.predict_duration(&params, &tokens, &prompt).unwrap();
        assert_eq!(d.frames.len(), 3);
        let hidden = va.hidden_of(&params, &tokens).unwrap();
        let expanded = length_regulate(&hidden, &[2, 3, 1]).unwrap();
        let pitch = va.predict_pitch(&params, &expanded, &prompt).unwrap();
        assert_eq!(pitch.hz.len(), 6);
        let unvoiced = PitchContour::from_hz(vec![0.0; 6]);
        let c0 = va.build_condition(&params, &expanded, &unvoiced).unwrap();
        let table_row0 = params.get(va.pitch_table).row(0).to_owned();
        for i in 0..6 {
            assert_eq!(c0.frames.row(i), &expanded.row(i) + &table_row0);
        }
        let mut bumped = unvoiced.clone();
        bumped.hz[2] = 220.0;
        let c1 = va.build_condition(&params, &expanded, &bumped).unwrap();
        for i in 0..6 {
            assert_eq!(c0.frames.row(i) == c1.frames.row(i), i != 2);
        }
        assert!(va.build_condition(&params, &expanded, &PitchContour::from_hz(vec![0.0; 5])).is_err());
        assert!(va
            .predict_duration(&params, &rand_mat(3, 4, 1), &prompt)
            .is_err());
    }

    #[test]
    fn predictor_gradients_match_finite_differences() {
        let (params, va) = setup(3, 4, 4);
        let prompt = rand_mat(5, 4, 7);
        let target = rand_mat(6, 1, 8);
        let x = rand_mat(6, 4, 9);
        let err = max_rel_error_in(&params, &x, |t, v| {
            let zp = t.leaf(prompt.clone());
            let y = va.pitch.forward(t, v, zp);
            t.mse(y, &target, None)
        });
        assert!(err < 1e-4, "input {err}");
        // Gradient with respect to the prompt flows through cross-attention.
        let err = max_rel_error_in(&params, &prompt, |t, zp| {
            let xv = t.leaf(x.clone());
            let y = va.duration.forward(t, xv, zp);
            t.mse(y, &target, None)
        });
        assert!(err < 1e-4, "prompt {err}");
        let err = param_rel_error(&params, "g.variance.duration.attn", |t| {
            let xv = t.leaf(x.clone());
            let zp = t.leaf(prompt.clone());
            let y = va.duration.forward(t, xv, zp);
            t.mse(y, &target, None)
        });
        assert!(err < 1e-4, "attention params {err}");
    }
}
