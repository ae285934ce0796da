//! Continuous-time VP-SDE over codec latents: forward marginals, a
//! z0-predicting dilated-conv backbone with cross-attention and FiLM, the
//! probability-flow sampler, and joint generator training.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, ParamId, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{
    clip_grad_norm, cosine_lr, gaussian, sinusoidal_embedding, Adam, Attention, Builder, Conv1d,
    Linear,
};
use crate::speaker::{PromptEncoder, SpeakerPrompt};
use crate::variance::{pitch_target, AdaptorOutput, VarianceAdaptor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            beta_min: 0.1,
            beta_max: 20.0,
        }
    }
}

impl NoiseSchedule {
    pub fn beta(&self, t: f64) -> f64 {
        self.beta_min + t * (self.beta_max - self.beta_min)
    }

    /// Integral of beta over [0, t].
    pub fn big_b(&self, t: f64) -> f64 {
        self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t
    }

    /// Mean coefficient of the marginal, `exp(-B(t) / 2)`.
    pub fn mean_coef(&self, t: f64) -> f64 {
        (-0.5 * self.big_b(t)).exp()
    }

    /// Marginal variance `1 - exp(-B(t))`.
    pub fn variance(&self, t: f64) -> f64 {
        -(-self.big_b(t)).exp_m1()
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("diffusion time {t} outside [0, 1]")));
    }
    Ok(())
}

/// Closed-form sample of `z_t` given `z0` and a standard normal draw.
pub fn forward_marginal(z0: &Mat, t: f64, noise: &Mat, schedule: &NoiseSchedule) -> Result<Mat> {
    check_time(t)?;
    if z0.dim() != noise.dim() {
        return Err(Error::shape(
            "noise",
            format!("{:?}", z0.dim()),
            format!("{:?}", noise.dim()),
        ));
    }
    if t == 0.0 {
        return Ok(z0.clone());
    }
    Ok(z0 * schedule.mean_coef(t) + noise * schedule.variance(t).sqrt())
}

/// Score of the marginal implied by a z0 estimate.
pub fn score_from_z0(z0_hat: &Mat, z_t: &Mat, t: f64, schedule: &NoiseSchedule) -> Result<Mat> {
    check_time(t)?;
    if t == 0.0 {
        return Err(Error::InvalidArgument(
            "score undefined at t = 0 (zero marginal variance)".into(),
        ));
    }
    let a = schedule.mean_coef(t);
    let v = schedule.variance(t);
    Ok((z_t - &(z0_hat * a)) / -v)
}

/// Anything that predicts z0 from `(z_t, t)` with its conditioning bound.
pub trait Denoiser {
    fn predict_z0(&self, z_t: &Mat, t: f64) -> Result<Mat>;
}

/// Posterior mean of z0 for Gaussian data `N(mean, std^2)` per element.
pub struct GaussianPosteriorMean {
    pub mean: f64,
    pub std: f64,
    pub schedule: NoiseSchedule,
}

impl Denoiser for GaussianPosteriorMean {
    fn predict_z0(&self, z_t: &Mat, t: f64) -> Result<Mat> {
        let a = self.schedule.mean_coef(t);
        let v = self.schedule.variance(t);
        let s2 = self.std * self.std;
        let gain = a * s2 / (a * a * s2 + v);
        Ok(z_t.mapv(|z| self.mean + gain * (z - a * self.mean)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub t_min: f64,
    pub temperature: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            t_min: 1e-3,
            temperature: 1.0,
        }
    }
}

/// Euler discretization of the probability-flow ODE from t = 1 down to
/// `t_min`, returning the denoiser's z0 estimate at `t_min`.
pub fn reverse_sample(
    denoiser: &dyn Denoiser,
    shape: (usize, usize),
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Mat> {
    if cfg.steps == 0 {
        return Err(Error::InvalidArgument("sampler needs at least one step".into()));
    }
    let mut z = Mat::from_shape_fn(shape, |_| cfg.temperature * gaussian(rng));
    let dt = (1.0 - cfg.t_min) / cfg.steps as f64;
    for i in 0..cfg.steps {
        let t = 1.0 - i as f64 * dt;
        let z0 = denoiser.predict_z0(&z, t)?;
        let score = score_from_z0(&z0, &z, t, schedule)?;
        let beta = schedule.beta(t);
        z = &z + &((&z + &score) * (0.5 * beta * dt));
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step: i });
        }
    }
    let out = denoiser.predict_z0(&z, cfg.t_min)?;
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { step: cfg.steps });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
struct Block {
    conv: Conv1d,
    attn: Attention,
    film_cond: Linear,
    film_time: Linear,
    gamma: Linear,
    beta: Linear,
}

/// Dilated-conv blocks with cross-attention to the speaker prompt and FiLM
/// from the time embedding and frame condition; predicts z0.
#[derive(Debug, Clone)]
pub struct Backbone {
    input: Linear,
    time1: Linear,
    time2: Linear,
    blocks: Vec<Block>,
    output: Linear,
    pub latent_dim: usize,
    pub cond_dim: usize,
    pub hidden: usize,
}

/// Scale applied to t before the sinusoidal embedding.
const TIME_SCALE: f64 = 1000.0;

impl Backbone {
    pub fn new(
        b: &mut Builder,
        latent_dim: usize,
        cond_dim: usize,
        prompt_dim: usize,
        hidden: usize,
        blocks: usize,
        dilation_cycle: usize,
        heads: usize,
    ) -> Self {
        let mut s = b.sub("backbone");
        let input = Linear::new(&mut s, "in", latent_dim + cond_dim, hidden);
        let time1 = Linear::new(&mut s, "time1", hidden, hidden);
        let time2 = Linear::new(&mut s, "time2", hidden, hidden);
        let blocks = (0..blocks.max(1))
            .map(|i| {
                let mut bb = s.sub(&format!("block{i}"));
                Block {
                    conv: Conv1d::new(&mut bb, "conv", hidden, hidden, 3, 1 << (i % dilation_cycle.max(1))),
                    attn: Attention::new(&mut bb, "attn", hidden, prompt_dim, heads),
                    film_cond: Linear::new(&mut bb, "film_cond", cond_dim, hidden),
                    film_time: Linear::new(&mut bb, "film_time", hidden, hidden),
                    gamma: Linear::new(&mut bb, "gamma", hidden, hidden),
                    beta: Linear::new(&mut bb, "beta", hidden, hidden),
                }
            })
            .collect();
        let output = Linear::new(&mut s, "out", hidden, latent_dim);
        Self {
            input,
            time1,
            time2,
            blocks,
            output,
            latent_dim,
            cond_dim,
            hidden,
        }
    }

    pub fn blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn forward(&self, t: &mut Tape, z_t: Var, time: f64, cond: Var, prompt: Var) -> Var {
        let x = t.concat_cols(&[z_t, cond]);
        let mut h = self.input.forward(t, x);
        let temb = t.leaf(sinusoidal_embedding(time, self.hidden, TIME_SCALE));
        let temb = self.time1.forward(t, temb);
        let temb = t.relu(temb);
        let temb = self.time2.forward(t, temb);
        for blk in &self.blocks {
            let y = blk.conv.forward(t, h);
            let a = blk.attn.forward(t, y, prompt);
            let y = t.add(y, a);
            let fc = blk.film_cond.forward(t, cond);
            let ft = blk.film_time.forward(t, temb);
            let m = t.add_row(fc, ft);
            let m = t.relu(m);
            let gamma = blk.gamma.forward(t, m);
            let gamma = t.add_scalar(gamma, 1.0);
            let beta = blk.beta.forward(t, m);
            let y = t.mul(y, gamma);
            let y = t.add(y, beta);
            let y = t.relu(y);
            h = t.add(h, y);
        }
        self.output.forward(t, h)
    }

    /// Zeroes the FiLM scale and shift generators, leaving unit scale and no
    /// shift.
    pub fn zero_film(&self, params: &mut ParamSet) {
        for blk in &self.blocks {
            for id in [blk.gamma.w, blk.gamma.b, blk.beta.w, blk.beta.b] {
                params.get_mut(id).fill(0.0);
            }
        }
    }

    /// One block's conv and attention path without modulation, for tests.
    pub fn unmodulated_block(&self, t: &mut Tape, i: usize, h: Var, prompt: Var) -> Var {
        let blk = &self.blocks[i];
        let y = blk.conv.forward(t, h);
        let a = blk.attn.forward(t, y, prompt);
        let y = t.add(y, a);
        let y = t.relu(y);
        t.add(h, y)
    }

    /// Block `i` with FiLM applied, for tests.
    pub fn block(&self, t: &mut Tape, i: usize, h: Var, time: f64, cond: Var, prompt: Var) -> Var {
        let temb = t.leaf(sinusoidal_embedding(time, self.hidden, TIME_SCALE));
        let temb = self.time1.forward(t, temb);
        let temb = t.relu(temb);
        let temb = self.time2.forward(t, temb);
        let blk = &self.blocks[i];
        let y = blk.conv.forward(t, h);
        let a = blk.attn.forward(t, y, prompt);
        let y = t.add(y, a);
        let fc = blk.film_cond.forward(t, cond);
        let ft = blk.film_time.forward(t, temb);
        let m = t.add_row(fc, ft);
        let m = t.relu(m);
        let gamma = blk.gamma.forward(t, m);
        let gamma = t.add_scalar(gamma, 1.0);
        let beta = blk.beta.forward(t, m);
        let y = t.mul(y, gamma);
        let y = t.add(y, beta);
        let y = t.relu(y);
        t.add(h, y)
    }

    pub fn predict_z0(
        &self,
        params: &ParamSet,
        z_t: &Mat,
        time: f64,
        cond: &Mat,
        prompt: &Mat,
    ) -> Result<Mat> {
        if z_t.nrows() != cond.nrows() {
            return Err(Error::shape("condition frames", z_t.nrows(), cond.nrows()));
        }
        if z_t.ncols() != self.latent_dim {
            return Err(Error::shape("latent dim", self.latent_dim, z_t.ncols()));
        }
        if cond.ncols() != self.cond_dim {
            return Err(Error::shape("condition dim", self.cond_dim, cond.ncols()));
        }
        let mut t = Tape::new(params);
        let z = t.leaf(z_t.clone());
        let c = t.leaf(cond.clone());
        let p = t.leaf(prompt.clone());
        let out = self.forward(&mut t, z, time, c, p);
        Ok(t.value(out).clone())
    }
}

/// Mean squared error between z0 predictions at random times and z0.
pub fn diffusion_loss(
    denoiser: &dyn Fn(&Mat, f64, usize) -> Result<Mat>,
    batch: &[Mat],
    schedule: &NoiseSchedule,
    t_min: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, z0) in batch.iter().enumerate() {
        let t = rng.random_range(t_min..=1.0);
        let noise = Mat::from_shape_fn(z0.dim(), |_| gaussian(rng));
        let zt = forward_marginal(z0, t, &noise, schedule)?;
        let pred = denoiser(&zt, t, i)?;
        total += (&pred - z0).iter().map(|v| v * v).sum::<f64>();
        count += z0.len();
    }
    Ok(total / count.max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub hidden: usize,
    pub blocks: usize,
    pub dilation_cycle: usize,
    pub heads: usize,
    pub prompt_blocks: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Frames per diffusion training crop.
    pub crop: usize,
    /// Prompt frames per training example.
    pub prompt_frames: usize,
    pub t_min: f64,
    pub sampler_steps: usize,
    pub schedule: NoiseSchedule,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            blocks: 6,
            dilation_cycle: 3,
            heads: 4,
            prompt_blocks: 2,
            steps: 2000,
            batch: 8,
            lr: 1e-3,
            crop: 32,
            prompt_frames: 64,
            t_min: 1e-3,
            sampler_steps: 100,
            schedule: NoiseSchedule::default(),
            seed: 17,
        }
    }
}

/// Prompt encoder, variance adaptor and diffusion backbone sharing one
/// parameter set, plus the latent normalization statistics.
#[derive(Debug, Clone)]
pub struct Generator {
    pub params: ParamSet,
    pub prompt: PromptEncoder,
    pub variance: VarianceAdaptor,
    pub backbone: Backbone,
    latent_mean: ParamId,
    latent_scale: ParamId,
    pub config: GeneratorConfig,
    pub vocab: usize,
    pub latent_dim: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct GeneratorMeta {
    config: GeneratorConfig,
    vocab: usize,
    latent_dim: usize,
    codec_id: String,
    config_hash: String,
}

/// One teacher-forced training utterance.
#[derive(Debug, Clone)]
pub struct GeneratorExample {
    pub speaker: usize,
    pub phonemes: Vec<usize>,
    pub durations: Vec<usize>,
    pub pitch: Vec<f64>,
    /// Continuous codec latents, `sum(durations) x C`.
    pub latent: Mat,
    /// Normalized quantized codec frames, used as a prompt for other
    /// utterances of the same speaker.
    pub prompt: Mat,
}

/// Output of one generation.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub latent: Mat,
    pub adaptor: AdaptorOutput,
    pub prompt: SpeakerPrompt,
}

struct BoundBackbone<'a> {
    gen: &'a Generator,
    cond: &'a Mat,
    prompt: &'a Mat,
}

impl Denoiser for BoundBackbone<'_> {
    fn predict_z0(&self, z_t: &Mat, t: f64) -> Result<Mat> {
        self.gen
            .backbone
            .predict_z0(&self.gen.params, z_t, t, self.cond, self.prompt)
    }
}

impl Generator {
    pub fn new(vocab: usize, latent_dim: usize, config: GeneratorConfig) -> Self {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut b = Builder::new(&mut params, "gen", &mut rng);
        let h = config.hidden;
        let prompt = PromptEncoder::new(&mut b, latent_dim, h, config.prompt_blocks, config.heads);
        let variance = VarianceAdaptor::new(&mut b, vocab, h, h, config.heads);
        let backbone = Backbone::new(
            &mut b,
            latent_dim,
            h,
            h,
            h,
            config.blocks,
            config.dilation_cycle,
            config.heads,
        );
        let latent_mean = b.constant("latent_mean", 1, latent_dim, 0.0);
        let latent_scale = b.constant("latent_scale", 1, 1, 1.0);
        Self {
            params,
            prompt,
            variance,
            backbone,
            latent_mean,
            latent_scale,
            config,
            vocab,
            latent_dim,
        }
    }

    pub fn normalize_latent(&self, z: &Mat) -> Mat {
        (z - self.params.get(self.latent_mean)) / self.params.get(self.latent_scale)[[0, 0]]
    }

    pub fn denormalize_latent(&self, z: &Mat) -> Mat {
        z * self.params.get(self.latent_scale)[[0, 0]] + self.params.get(self.latent_mean)
    }

    fn fit_normalization(&mut self, latents: &[&Mat]) {
        let c = self.latent_dim;
        let n: usize = latents.iter().map(|m| m.nrows()).sum();
        let mut mean = ndarray::Array1::<f64>::zeros(c);
        for m in latents {
            mean += &m.sum_axis(ndarray::Axis(0));
        }
        mean /= n.max(1) as f64;
        let mut var = 0.0;
        for m in latents {
            for r in m.rows() {
                var += (&r - &mean).mapv(|v| v * v).sum();
            }
        }
        let scale = (var / (n.max(1) * c) as f64).sqrt().max(1e-6);
        self.params.get_mut(self.latent_mean).row_mut(0).assign(&mean);
        self.params.get_mut(self.latent_scale)[[0, 0]] = scale;
    }

    /// Encodes raw quantized codec frames into a speaker prompt.
    pub fn encode_prompt(&self, codec_frames: &Mat) -> Result<SpeakerPrompt> {
        if codec_frames.ncols() != self.latent_dim {
            return Err(Error::shape("prompt codec frames", self.latent_dim, codec_frames.ncols()));
        }
        self.prompt
            .encode(&self.params, &self.normalize_latent(codec_frames))
    }

    /// Samples latents for token distributions (`L x vocab`) in the voice of
    /// a prompt (raw quantized codec frames).
    pub fn generate(
        &self,
        tokens: &Mat,
        prompt_frames: &Mat,
        sampler: &SamplerConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Generation> {
        let prompt = self.encode_prompt(prompt_frames)?;
        let adaptor = self.variance.infer(&self.params, tokens, &prompt)?;
        let frames = adaptor.condition.frames.nrows();
        let z = reverse_sample(
            &BoundBackbone {
                gen: self,
                cond: &adaptor.condition.frames,
                prompt: &prompt.frames,
            },
            (frames, self.latent_dim),
            &self.config.schedule,
            sampler,
            rng,
        )?;
        Ok(Generation {
            latent: self.denormalize_latent(&z),
            adaptor,
            prompt,
        })
    }

    /// Teacher-forced generation with given durations and pitch.
    pub fn generate_forced(
        &self,
        phonemes: &[usize],
        durations: &[usize],
        pitch: &[f64],
        prompt_frames: &Mat,
        sampler: &SamplerConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Mat> {
        let prompt = self.encode_prompt(prompt_frames)?;
        let cond = self.forced_condition(phonemes, durations, pitch)?;
        let z = reverse_sample(
            &BoundBackbone {
                gen: self,
                cond: &cond,
                prompt: &prompt.frames,
            },
            (cond.nrows(), self.latent_dim),
            &self.config.schedule,
            sampler,
            rng,
        )?;
        Ok(self.denormalize_latent(&z))
    }

    fn forced_condition(&self, phonemes: &[usize], durations: &[usize], pitch: &[f64]) -> Result<Mat> {
        let mut t = Tape::new(&self.params);
        let tokens = t.leaf(one_hot(phonemes, self.vocab));
        let h = self.variance.token_hidden(&mut t, tokens);
        let e = self.variance.expand(&mut t, h, durations);
        if t.value(e).nrows() != pitch.len() {
            return Err(Error::shape("pitch frames", t.value(e).nrows(), pitch.len()));
        }
        let c = self.variance.condition(&mut t, e, pitch);
        Ok(t.value(c).clone())
    }

    /// Mean squared z0 error (normalized latent units) of the denoiser on
    /// held-out examples at fixed random times; the baseline is an untrained
    /// generator's error.
    pub fn denoising_error(&self, examples: &[GeneratorExample], seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sched = self.config.schedule;
        let t_min = self.config.t_min;
        let z0s: Vec<Mat> = examples.iter().map(|e| self.normalize_latent(&e.latent)).collect();
        let conds: Vec<Mat> = examples
            .iter()
            .map(|e| self.forced_condition(&e.phonemes, &e.durations, &e.pitch))
            .collect::<Result<_>>()?;
        let prompts: Vec<SpeakerPrompt> = examples
            .iter()
            .map(|e| self.prompt.encode(&self.params, &e.prompt))
            .collect::<Result<_>>()?;
        diffusion_loss(
            &|zt, t, i| {
                self.backbone
                    .predict_z0(&self.params, zt, t, &conds[i], &prompts[i].frames)
            },
            &z0s,
            &sched,
            t_min,
            &mut rng,
        )
    }

    pub fn save(&self, dir: &Path, codec_id: &str, config_hash: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.params
            .write_filtered(fs::File::create(dir.join("prompt.bin"))?, "gen.prompt.")?;
        self.params
            .write_filtered(fs::File::create(dir.join("variance.bin"))?, "gen.variance.")?;
        self.params
            .write_filtered(fs::File::create(dir.join("backbone.bin"))?, "gen.backbone.")?;
        self.params
            .write_filtered(fs::File::create(dir.join("latent_stats.bin"))?, "gen.latent_")?;
        let meta = GeneratorMeta {
            config: self.config.clone(),
            vocab: self.vocab,
            latent_dim: self.latent_dim,
            codec_id: codec_id.to_string(),
            config_hash: config_hash.to_string(),
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    /// Loads a bundle; returns the generator and the codec id it was trained
    /// against.
    pub fn load(dir: &Path) -> Result<(Self, String)> {
        let meta_path = dir.join("manifest.json");
        if !meta_path.exists() {
            return Err(Error::MissingCheckpoint(dir.to_path_buf()));
        }
        let meta: GeneratorMeta = serde_json::from_str(&fs::read_to_string(meta_path)?)?;
        let mut gen = Self::new(meta.vocab, meta.latent_dim, meta.config);
        let mut loaded = 0;
        for f in ["prompt.bin", "variance.bin", "backbone.bin", "latent_stats.bin"] {
            loaded += gen
                .params
                .load_from(std::io::BufReader::new(fs::File::open(dir.join(f))?))?;
        }
        if loaded != gen.params.len() {
            return Err(Error::Format(format!(
                "generator bundle has {loaded} of {} parameters",
                gen.params.len()
            )));
        }
        Ok((gen, meta.codec_id))
    }
}

pub fn one_hot(seq: &[usize], classes: usize) -> Mat {
    let mut m = Mat::zeros((seq.len(), classes));
    for (i, &k) in seq.iter().enumerate() {
        m[[i, k]] = 1.0;
    }
    m
}

/// Loss terms of one generator step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GeneratorLoss {
    pub diffusion: f64,
    pub duration: f64,
    pub pitch: f64,
}

impl GeneratorLoss {
    pub fn total(&self) -> f64 {
        self.diffusion + self.duration + self.pitch
    }
}

fn example_loss(
    gen: &Generator,
    t: &mut Tape,
    ex: &GeneratorExample,
    prompt: &Mat,
    rng: &mut ChaCha8Rng,
) -> (Var, GeneratorLoss) {
    let cfg = &gen.config;
    let zp_in = t.leaf(prompt.clone());
    let zp = gen.prompt.forward(t, zp_in);

    let tokens = t.leaf(one_hot(&ex.phonemes, gen.vocab));
    let h = gen.variance.token_hidden(t, tokens);
    let log_d = gen.variance.duration.forward(t, h, zp);
    let target_d = Mat::from_shape_fn((ex.durations.len(), 1), |(i, _)| (ex.durations[i] as f64).ln());
    let dur_loss = t.mse(log_d, &target_d, None);

    let expanded = gen.variance.expand(t, h, &ex.durations);
    let frames = ex.latent.nrows();
    let crop = cfg.crop.min(frames);
    let start = rng.random_range(0..=frames - crop);
    let rows: Vec<usize> = (start..start + crop).collect();

    let pitch_out = gen.variance.pitch.forward(t, expanded, zp);
    let target_p = Mat::from_shape_fn((frames, 1), |(i, _)| pitch_target(ex.pitch[i].max(0.0)));
    let voiced: Vec<bool> = ex.pitch.iter().map(|&f| f > 0.0).collect();
    let pitch_loss = t.mse(pitch_out, &target_p, Some(&voiced));

    let cond = gen.variance.condition(t, expanded, &ex.pitch);
    let cond = t.gather_rows(cond, rows.clone());
    let z0 = gen
        .normalize_latent(&ex.latent)
        .select(ndarray::Axis(0), &rows);
    let time = rng.random_range(cfg.t_min..=1.0);
    let noise = Mat::from_shape_fn(z0.dim(), |_| gaussian(rng));
    let zt = forward_marginal(&z0, time, &noise, &cfg.schedule).expect("time in range");
    let zt = t.leaf(zt);
    let pred = gen.backbone.forward(t, zt, time, cond, zp);
    let diff_loss = t.mse(pred, &z0, None);

    let loss = t.add(diff_loss, dur_loss);
    let loss = t.add(loss, pitch_loss);
    let parts = GeneratorLoss {
        diffusion: t.scalar(diff_loss),
        duration: t.scalar(dur_loss),
        pitch: t.scalar(pitch_loss),
    };
    (loss, parts)
}

/// Random window of at most `len` frames.
fn crop_rows(m: &Mat, len: usize, rng: &mut ChaCha8Rng) -> Mat {
    let n = m.nrows();
    let len = len.min(n);
    let s = rng.random_range(0..=n - len);
    m.slice(ndarray::s![s..s + len, ..]).to_owned()
}

/// Jointly trains prompt encoder, variance adaptor and backbone with
/// teacher forcing. Each example's prompt comes from a different utterance
/// of the same speaker. `on_checkpoint` runs every `checkpoint_every` steps
/// and at the end.
pub fn train_generator(
    examples: &[GeneratorExample],
    vocab: usize,
    cfg: &GeneratorConfig,
    checkpoint_every: usize,
    mut on_checkpoint: impl FnMut(&Generator, &[GeneratorLoss]) -> Result<()>,
) -> Result<(Generator, Vec<GeneratorLoss>)> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("no generator training examples".into()));
    }
    let latent_dim = examples[0].latent.ncols();
    for ex in examples {
        if ex.latent.nrows() != ex.durations.iter().sum::<usize>() || ex.pitch.len() != ex.latent.nrows() {
            return Err(Error::shape(
                "training latent frames",
                ex.durations.iter().sum::<usize>(),
                ex.latent.nrows(),
            ));
        }
    }
    let mut gen = Generator::new(vocab, latent_dim, cfg.clone());
    let latents: Vec<&Mat> = examples.iter().map(|e| &e.latent).collect();
    gen.fit_normalization(&latents);
    let prompts: Vec<Mat> = examples.iter().map(|e| gen.normalize_latent(&e.prompt)).collect();

    let mut by_speaker: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, ex) in examples.iter().enumerate() {
        by_speaker.entry(ex.speaker).or_default().push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xD1FF);
    let mut opt = Adam::new(&gen.params);
    let mut curve = Vec::with_capacity(cfg.steps);
    let mut good = gen.params.clone();
    for step in 0..cfg.steps {
        let mut grads = crate::autograd::Grads::zeros_like(&gen.params);
        let mut parts = GeneratorLoss::default();
        for _ in 0..cfg.batch {
            let i = rng.random_range(0..examples.len());
            let ex = &examples[i];
            let same = &by_speaker[&ex.speaker];
            let j = if same.len() > 1 {
                loop {
                    let j = same[rng.random_range(0..same.len())];
                    if j != i {
                        break j;
                    }
                }
            } else {
                i
            };
            let prompt = crop_rows(&prompts[j], cfg.prompt_frames, &mut rng);
            let mut t = Tape::new(&gen.params);
            let (loss, p) = example_loss(&gen, &mut t, ex, &prompt, &mut rng);
            grads.accumulate(&t.backward(loss).param_grads());
            parts.diffusion += p.diffusion / cfg.batch as f64;
            parts.duration += p.duration / cfg.batch as f64;
            parts.pitch += p.pitch / cfg.batch as f64;
        }
        grads.scale(1.0 / cfg.batch as f64);
        if !grads.is_finite() || !parts.total().is_finite() {
            gen.params = good;
            return Err(Error::Diverged { step });
        }
        clip_grad_norm(&mut grads, 1.0);
        let lr = cosine_lr(cfg.lr, step, cfg.steps, 100.min(cfg.steps / 10 + 1));
        opt.step(&mut gen.params, &grads, lr);
        curve.push(parts);
        if (step + 1) % 100 == 0 {
            let n = curve.len().min(100);
            let recent = &curve[curve.len() - n..];
            log::info!(
                "generator step {} diffusion {:.4} duration {:.4} pitch {:.4}",
                step + 1,
                recent.iter().map(|p| p.diffusion).sum::<f64>() / n as f64,
                recent.iter().map(|p| p.duration).sum::<f64>() / n as f64,
                recent.iter().map(|p| p.pitch).sum::<f64>() / n as f64,
            );
        }
        if checkpoint_every > 0 && (step + 1) % checkpoint_every == 0 {
            good = gen.params.clone();
            on_checkpoint(&gen, &curve)?;
        }
    }
    on_checkpoint(&gen, &curve)?;
    Ok((gen, curve))
}

pub fn write_generator_curve(path: &Path, curve: &[GeneratorLoss]) -> Result<()> {
    let mut s = String::from("step,diffusion,duration,pitch\n");
    for (i, p) in curve.iter().enumerate() {
        s.push_str(&format!(
            "{},{:.6},{:.6},{:.6}\n",
            i + 1,
            p.diffusion,
            p.duration,
            p.pitch
        ));
    }
    fs::write(path, s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::{max_rel_error_in, param_rel_error};
    use approx::assert_abs_diff_eq;

    fn rand_mat(r: usize, c: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_shape_fn((r, c), |_| gaussian(&mut rng))
    }

    #[test]
    fn schedule_values() {
        let s = NoiseSchedule::default();
        assert_abs_diff_eq!(s.big_b(1.0), 10.05, epsilon = 1e-12);
        assert_abs_diff_eq!(s.mean_coef(1.0), (-5.025f64).exp(), epsilon = 1e-15);
        assert_eq!(s.big_b(0.0), 0.0);
        assert!(s.beta(0.0) > 0.0);
    }

    #[test]
    fn marginal_and_score_identities() {
        let s = NoiseSchedule::default();
        let z0 = rand_mat(5, 3, 1);
        let eps = rand_mat(5, 3, 2);
        assert_eq!(forward_marginal(&z0, 0.0, &eps, &s).unwrap(), z0);
        assert!(forward_marginal(&z0, 1.5, &eps, &s).is_err());
        assert!(forward_marginal(&z0, 0.5, &rand_mat(2, 3, 0), &s).is_err());
        let t = 0.37;
        let zt = forward_marginal(&z0, t, &eps, &s).unwrap();
        let score = score_from_z0(&z0, &zt, t, &s).unwrap();
        let expect = &eps / -s.variance(t).sqrt();
        for (a, b) in score.iter().zip(expect.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
        assert!(score_from_z0(&z0, &zt, 0.0, &s).is_err());
        let near_one = score_from_z0(&z0, &zt, 1.0, &s).unwrap();
        for (a, b) in near_one.iter().zip(zt.iter()) {
            assert!((a + b).abs() < 0.05);
        }
    }

    #[test]
    fn gaussian_oracle_gives_analytic_score() {
        let s = NoiseSchedule::default();
        let oracle = GaussianPosteriorMean { mean: 0.0, std: 0.7, schedule: s };
        let zt = rand_mat(4, 2, 3);
        for t in [0.05, 0.3, 0.9] {
            let score = score_from_z0(&oracle.predict_z0(&zt, t).unwrap(), &zt, t, &s).unwrap();
            let a = s.mean_coef(t);
            let denom = 0.49 * a * a + s.variance(t);
            for (sc, z) in score.iter().zip(zt.iter()) {
                assert_abs_diff_eq!(*sc, -z / denom, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn sampler_contracts() {
        let s = NoiseSchedule::default();
        let oracle = GaussianPosteriorMean { mean: 1.0, std: 0.5, schedule: s };
        let one = SamplerConfig { steps: 1, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = reverse_sample(&oracle, (3, 2), &s, &one, &mut rng).unwrap();
        assert!(out.iter().all(|v| v.is_finite()));
        let cfg = SamplerConfig { steps: 20, ..Default::default() };
        let a = reverse_sample(&oracle, (3, 2), &s, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = reverse_sample(&oracle, (3, 2), &s, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        let zero = SamplerConfig { steps: 0, ..Default::default() };
        assert!(reverse_sample(&oracle, (3, 2), &s, &zero, &mut rng).is_err());
    }

    fn tiny() -> (ParamSet, Backbone) {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bb = {
            let mut b = Builder::new(&mut params, "g", &mut rng);
            Backbone::new(&mut b, 3, 4, 4, 4, 2, 3, 2)
        };
        (params, bb)
    }

    #[test]
    fn backbone_shapes_and_identity_film() {
        let (mut params, bb) = tiny();
        let z = rand_mat(7, 3, 1);
        let c = rand_mat(7, 4, 2);
        let p = rand_mat(5, 4, 3);
        assert_eq!(bb.predict_z0(&params, &z, 0.3, &c, &p).unwrap().dim(), (7, 3));
        assert!(bb.predict_z0(&params, &z, 0.3, &rand_mat(6, 4, 2), &p).is_err());
        bb.zero_film(&mut params);
        let h = rand_mat(7, 4, 5);
        let mut t = Tape::new(&params);
        let hv = t.leaf(h);
        let cv = t.leaf(c);
        let pv = t.leaf(p);
        let a = bb.block(&mut t, 1, hv, 0.6, cv, pv);
        let b = bb.unmodulated_block(&mut t, 1, hv, pv);
        assert_eq!(t.value(a), t.value(b));
    }

    #[test]
    fn backbone_gradients_match_finite_differences() {
        let (params, bb) = tiny();
        let c = rand_mat(6, 4, 2);
        let p = rand_mat(5, 4, 3);
        let target = rand_mat(6, 3, 4);
        let z = rand_mat(6, 3, 1);
        let err = max_rel_error_in(&params, &z, |t, v| {
            let cv = t.leaf(c.clone());
            let pv = t.leaf(p.clone());
            let y = bb.forward(t, v, 0.4, cv, pv);
            t.mse(y, &target, None)
        });
        assert!(err < 1e-4, "input {err}");
        let err = param_rel_error(&params, "g.backbone", |t| {
            let zv = t.leaf(z.clone());
            let cv = t.leaf(c.clone());
            let pv = t.leaf(p.clone());
            let y = bb.forward(t, zv, 0.4, cv, pv);
            t.mse(y, &target, None)
        });
        assert!(err < 1e-4, "params {err}");
    }

    #[test]
    fn loss_extremes() {
        let s = NoiseSchedule::default();
        let batch = vec![rand_mat(4, 2, 1), rand_mat(3, 2, 2)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let perfect = diffusion_loss(&|_, _, i| Ok(batch[i].clone()), &batch, &s, 1e-3, &mut rng).unwrap();
        assert_eq!(perfect, 0.0);
        let zero = diffusion_loss(&|zt, _, _| Ok(Mat::zeros(zt.dim())), &batch, &s, 1e-3, &mut rng).unwrap();
        let expect = batch.iter().map(|m| m.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / 14.0;
        assert_abs_diff_eq!(zero, expect, epsilon = 1e-12);
    }

    fn toy_examples(n: usize) -> Vec<GeneratorExample> {
        (0..n)
            .map(|i| {
                let phonemes = vec![i % 3, (i + 1) % 3];
                let durations = vec![3, 4];
                let latent = Mat::from_shape_fn((7, 2), |(f, c)| {
                    let ph = if f < 3 { phonemes[0] } else { phonemes[1] };
                    (ph as f64 - 1.0) * if c == 0 { 1.0 } else { -0.5 } + 0.1 * (i % 2) as f64
                });
                GeneratorExample {
                    speaker: i % 2,
                    phonemes,
                    durations,
                    pitch: vec![120.0 + 40.0 * (i % 2) as f64; 7],
                    prompt: latent.clone(),
                    latent,
                }
            })
            .collect()
    }

    fn toy_cfg(steps: usize) -> GeneratorConfig {
        GeneratorConfig {
            hidden: 8,
            blocks: 2,
            heads: 2,
            prompt_blocks: 1,
            steps,
            batch: 4,
            lr: 5e-3,
            crop: 7,
            prompt_frames: 7,
            sampler_steps: 10,
            ..Default::default()
        }
    }

    #[test]
    fn generator_training_reduces_loss_and_round_trips() {
        let ex = toy_examples(16);
        let (gen, curve) = train_generator(&ex, 3, &toy_cfg(300), 0, |_, _| Ok(())).unwrap();
        let first: f64 = curve[..20].iter().map(|p| p.total()).sum::<f64>() / 20.0;
        let last: f64 = curve[curve.len() - 20..].iter().map(|p| p.total()).sum::<f64>() / 20.0;
        assert!(last < first * 0.5, "{first} -> {last}");
        let dir = tempfile::tempdir().unwrap();
        gen.save(dir.path(), "codec", "hash").unwrap();
        let (back, codec_id) = Generator::load(dir.path()).unwrap();
        assert_eq!(codec_id, "codec");
        let tokens = one_hot(&[0, 2], 3);
        let sampler = SamplerConfig { steps: 10, ..Default::default() };
        let a = gen
            .generate(&tokens, &ex[0].prompt, &sampler, &mut ChaCha8Rng::seed_from_u64(3))
            .unwrap();
        let b = back
            .generate(&tokens, &ex[0].prompt, &sampler, &mut ChaCha8Rng::seed_from_u64(3))
            .unwrap();
        assert_eq!(a, b);
        assert_eq!(
            a.latent.nrows(),
            a.adaptor.durations.frames.iter().sum::<usize>()
        );
    }
}
