//! Layers and optimizer built on the [`autograd`](crate::autograd) tape.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Grads, Mat, ParamId, ParamSet, Tape, Var};

/// Adds parameters under a common name prefix.
pub struct Builder<'a> {
    params: &'a mut ParamSet,
    prefix: String,
    rng: &'a mut ChaCha8Rng,
}

impl<'a> Builder<'a> {
    pub fn new(params: &'a mut ParamSet, prefix: &str, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            params,
            prefix: prefix.to_string(),
            rng,
        }
    }

    pub fn sub(&mut self, name: &str) -> Builder<'_> {
        Builder {
            params: self.params,
            prefix: format!("{}.{}", self.prefix, name),
            rng: self.rng,
        }
    }

    fn name(&self, leaf: &str) -> String {
        format!("{}.{}", self.prefix, leaf)
    }

    /// Uniform Glorot initialization.
    pub fn glorot(&mut self, leaf: &str, fan_in: usize, fan_out: usize) -> ParamId {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let rng = &mut *self.rng;
        let m = Mat::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-a..a));
        let name = self.name(leaf);
        self.params.add(name, m)
    }

    pub fn constant(&mut self, leaf: &str, rows: usize, cols: usize, value: f64) -> ParamId {
        let name = self.name(leaf);
        self.params.add(name, Mat::from_elem((rows, cols), value))
    }

    pub fn normal(&mut self, leaf: &str, rows: usize, cols: usize, std: f64) -> ParamId {
        let rng = &mut *self.rng;
        let m = Mat::from_shape_fn((rows, cols), |_| std * gaussian(rng));
        let name = self.name(leaf);
        self.params.add(name, m)
    }
}

pub fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    StandardNormal.sample(rng)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(b: &mut Builder, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let mut s = b.sub(name);
        Self {
            w: s.glorot("w", in_dim, out_dim),
            b: s.constant("b", 1, out_dim, 0.0),
            in_dim,
            out_dim,
        }
    }

    /// Same as [`Linear::new`] but with all weights at zero.
    pub fn zeros(b: &mut Builder, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let mut s = b.sub(name);
        Self {
            w: s.constant("w", in_dim, out_dim, 0.0),
            b: s.constant("b", 1, out_dim, 0.0),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let w = t.param(self.w);
        let b = t.param(self.b);
        let y = t.matmul(x, w);
        t.add_row(y, b)
    }
}

/// Same-padded 1-D convolution over the frame axis.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub lin: Linear,
    pub kernel: usize,
    pub dilation: usize,
}

impl Conv1d {
    pub fn new(
        b: &mut Builder,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        kernel: usize,
        dilation: usize,
    ) -> Self {
        assert!(kernel % 2 == 1, "odd kernels only");
        Self {
            lin: Linear::new(b, name, in_dim * kernel, out_dim),
            kernel,
            dilation,
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let cols = t.im2col(x, self.kernel, self.dilation);
        self.lin.forward(t, cols)
    }

    /// Frames of context seen on each side of the centre frame.
    pub fn half_width(&self) -> usize {
        (self.kernel / 2) * self.dilation
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(b: &mut Builder, name: &str, dim: usize) -> Self {
        let mut s = b.sub(name);
        Self {
            gain: s.constant("g", 1, dim, 1.0),
            bias: s.constant("b", 1, dim, 0.0),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let n = t.layer_norm(x, 1e-5);
        let g = t.param(self.gain);
        let b = t.param(self.bias);
        let y = t.mul_row(n, g);
        t.add_row(y, b)
    }
}

/// Multi-head query-key-value attention. Queries come from one sequence, keys
/// and values from another (or the same one for self-attention).
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(b: &mut Builder, name: &str, q_dim: usize, kv_dim: usize, heads: usize) -> Self {
        assert!(q_dim % heads == 0, "width must divide into heads");
        let mut s = b.sub(name);
        Self {
            q: Linear::new(&mut s, "q", q_dim, q_dim),
            k: Linear::new(&mut s, "k", kv_dim, q_dim),
            v: Linear::new(&mut s, "v", kv_dim, q_dim),
            out: Linear::new(&mut s, "o", q_dim, q_dim),
            heads,
        }
    }

    pub fn forward(&self, t: &mut Tape, query: Var, context: Var) -> Var {
        let q = self.q.forward(t, query);
        let k = self.k.forward(t, context);
        let v = self.v.forward(t, context);
        let width = self.q.out_dim;
        let hd = width / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    t.slice_cols(q, h * hd, hd),
                    t.slice_cols(k, h * hd, hd),
                    t.slice_cols(v, h * hd, hd),
                )
            };
            let scores = t.matmul_nt(qh, kh);
            let scores = t.scale(scores, scale);
            let attn = t.softmax_rows(scores);
            outs.push(t.matmul(attn, vh));
        }
        let joined = if outs.len() == 1 {
            outs[0]
        } else {
            t.concat_cols(&outs)
        };
        self.out.forward(t, joined)
    }
}

/// Adam with decoupled learning-rate control.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Mat> = params.iter().map(|(_, _, p)| Mat::zeros(p.dim())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &Grads, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (i, g) in grads.slots().iter().enumerate() {
            let Some(g) = g else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            v.zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let p = params.get_mut(ParamId(i));
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
            });
        }
    }
}

/// Cosine decay from `base` to `base * floor` with a linear warmup.
pub fn cosine_lr(base: f64, step: usize, total: usize, warmup: usize) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let floor = 0.05;
    let span = total.saturating_sub(warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    base * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Rescales `grads` so the global norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut Grads, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Sinusoidal embedding of a scalar position (diffusion time, etc.).
pub fn sinusoidal_embedding(x: f64, dim: usize, scale: f64) -> Mat {
    let half = dim / 2;
    let mut out = Mat::zeros((1, dim));
    for i in 0..half {
        let freq = (-(10000f64).ln() * i as f64 / half.max(1) as f64).exp();
        let a = x * scale * freq;
        out[[0, i]] = a.sin();
        out[[0, half + i]] = a.cos();
    }
    out
}
