//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every model in this crate works on 2-D arrays laid out as `frames x channels`.
//! A [`Tape`] records operations as they are evaluated; [`Tape::backward`] then
//! walks the tape in reverse and accumulates gradients for leaves and
//! parameters. Parameters live in a [`ParamSet`] that the tape borrows, so many
//! tapes (one per training example) can share the same weights.

use std::io::{Read, Write};

use ndarray::{s, Array2, Axis};

use crate::error::{Error, Result};

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named collection of trainable matrices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Mat>,
}

const PARAM_MAGIC: &[u8; 4] = b"DSRP";
const PARAM_VERSION: u8 = 1;

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(
            self.id_of(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Mat)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Serialize the parameters whose names start with `prefix`.
    pub fn write_filtered<W: Write>(&self, mut w: W, prefix: &str) -> Result<()> {
        let selected: Vec<_> = self
            .iter()
            .filter(|(_, n, _)| n.starts_with(prefix))
            .collect();
        w.write_all(PARAM_MAGIC)?;
        w.write_all(&[PARAM_VERSION])?;
        w.write_all(&(selected.len() as u32).to_le_bytes())?;
        for (_, name, value) in selected {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(value.nrows() as u32).to_le_bytes())?;
            w.write_all(&(value.ncols() as u32).to_le_bytes())?;
            for x in value.iter() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        self.write_filtered(w, "")
    }

    /// Overwrite parameters from a blob written by [`ParamSet::write_filtered`].
    /// Every stored name must exist here with the same shape.
    pub fn load_from<R: Read>(&mut self, mut r: R) -> Result<usize> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != PARAM_MAGIC {
            return Err(Error::Format("parameter blob: bad magic".into()));
        }
        let mut version = [0u8; 1];
        r.read_exact(&mut version)?;
        if version[0] != PARAM_VERSION {
            return Err(Error::Format(format!(
                "parameter blob: unsupported version {}",
                version[0]
            )));
        }
        let count = read_u32(&mut r)? as usize;
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("parameter blob: non-utf8 name".into()))?;
            let rows = read_u32(&mut r)? as usize;
            let cols = read_u32(&mut r)? as usize;
            let id = self
                .id_of(&name)
                .ok_or_else(|| Error::Format(format!("parameter blob: unknown tensor {name}")))?;
            let dst = &mut self.values[id.0];
            if dst.dim() != (rows, cols) {
                return Err(Error::Shape {
                    what: format!("parameter {name}"),
                    expected: format!("{:?}", dst.dim()),
                    got: format!("{:?}", (rows, cols)),
                });
            }
            let mut buf = [0u8; 8];
            for x in dst.iter_mut() {
                r.read_exact(&mut buf)?;
                *x = f64::from_le_bytes(buf);
            }
        }
        Ok(count)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Per-parameter gradient accumulator, aligned with a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Grads {
    slots: Vec<Option<Mat>>,
}

impl Grads {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Self {
            slots: vec![None; params.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.slots.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn accumulate(&mut self, other: &Grads) {
        for (dst, src) in self.slots.iter_mut().zip(&other.slots) {
            if let Some(src) = src {
                match dst {
                    Some(d) => *d += src,
                    None => *dst = Some(src.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for g in self.slots.iter_mut().flatten() {
            g.mapv_inplace(|x| x * k);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.slots
            .iter()
            .flatten()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.slots
            .iter()
            .flatten()
            .all(|g| g.iter().all(|x| x.is_finite()))
    }

    pub(crate) fn slots(&self) -> &[Option<Mat>] {
        &self.slots
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Im2Col { x: Var, kernel: usize, dilation: usize },
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SumRows(Var),
    MeanAll(Var),
    MeanStdPool(Var),
    L2NormalizeRows(Var),
    /// Loss node whose gradient with respect to the input was computed
    /// during the forward pass.
    Precomputed { x: Var, grad: Mat },
}

struct Node {
    value: Option<Mat>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
}

pub struct Backward {
    grads: Vec<Option<Mat>>,
    param_of_node: Vec<Option<ParamId>>,
    n_params: usize,
}

impl Backward {
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    pub fn param_grads(&self) -> Grads {
        let mut slots = vec![None; self.n_params];
        for (node, pid) in self.param_of_node.iter().enumerate() {
            if let (Some(pid), Some(g)) = (pid, &self.grads[node]) {
                slots[pid.0] = Some(g.clone());
            }
        }
        Grads { slots }
    }
}

fn sum_rows(m: &Mat) -> Mat {
    m.sum_axis(Axis(0)).insert_axis(Axis(0))
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.push(out, Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        self.push(out, Op::Mul(a, b))
    }

    /// Adds a `1 x C` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.value(row).nrows(), 1);
        let out = self.value(a) + self.value(row);
        self.push(out, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a `1 x C` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.value(row).nrows(), 1);
        let out = self.value(a) * self.value(row);
        self.push(out, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a) * k;
        self.push(out, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a) + k;
        self.push(out, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let out = log_softmax_rows(self.value(a));
        self.push(out, Op::LogSoftmaxRows(a))
    }

    /// Per-row standardization without affine terms.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        self.push(out, Op::LayerNorm { x: a, inv_std })
    }

    /// Unfolds a `T x C` sequence into `T x (kernel*C)` windows centred on each
    /// frame (zero padded), so a 1-D convolution becomes a matrix product.
    pub fn im2col(&mut self, a: Var, kernel: usize, dilation: usize) -> Var {
        let out = im2col(self.value(a), kernel, dilation);
        self.push(out, Op::Im2Col { x: a, kernel, dilation })
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let x = self.value(a);
        let mut out = Mat::zeros((idx.len(), x.ncols()));
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).assign(&x.row(i));
        }
        self.push(out, Op::GatherRows(a, idx))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("column counts agree");
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let out = sum_rows(self.value(a));
        self.push(out, Op::SumRows(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let out = Mat::from_elem((1, 1), m.sum() / m.len() as f64);
        self.push(out, Op::MeanAll(a))
    }

    /// `T x C -> 1 x 2C` concatenation of per-column mean and standard deviation.
    pub fn mean_std_pool(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let t = x.nrows() as f64;
        let c = x.ncols();
        let mean = x.sum_axis(Axis(0)) / t;
        let mut out = Mat::zeros((1, 2 * c));
        for j in 0..c {
            let var = x.column(j).iter().map(|v| (v - mean[j]).powi(2)).sum::<f64>() / t;
            out[[0, j]] = mean[j];
            out[[0, c + j]] = (var + POOL_EPS).sqrt();
        }
        self.push(out, Op::MeanStdPool(a))
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
            row.mapv_inplace(|v| v / n);
        }
        self.push(out, Op::L2NormalizeRows(a))
    }

    /// Mean squared error against a constant target, optionally restricted to
    /// the rows where `row_mask` is true.
    pub fn mse(&mut self, pred: Var, target: &Mat, row_mask: Option<&[bool]>) -> Var {
        let p = self.value(pred);
        assert_eq!(p.dim(), target.dim(), "mse shape mismatch");
        let mut diff = p - target;
        if let Some(mask) = row_mask {
            for (mut row, &keep) in diff.rows_mut().into_iter().zip(mask) {
                if !keep {
                    row.fill(0.0);
                }
            }
        }
        let active_rows = row_mask.map_or(p.nrows(), |m| m.iter().filter(|&&k| k).count());
        let n = (active_rows * p.ncols()).max(1) as f64;
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
        let grad = diff * (2.0 / n);
        self.push(Mat::from_elem((1, 1), loss), Op::Precomputed { x: pred, grad })
    }

    /// Negative mean of selected entries, i.e. a cross-entropy when `a` holds
    /// log-probabilities.
    pub fn nll_picked(&mut self, a: Var, picks: &[(usize, usize)]) -> Var {
        let x = self.value(a);
        let n = picks.len().max(1) as f64;
        let mut grad = Mat::zeros(x.dim());
        let mut loss = 0.0;
        for &(r, c) in picks {
            loss -= x[[r, c]];
            grad[[r, c]] -= 1.0 / n;
        }
        self.push(Mat::from_elem((1, 1), loss / n), Op::Precomputed { x: a, grad })
    }

    /// Records a scalar loss whose input gradient is supplied by the caller.
    pub fn precomputed_loss(&mut self, a: Var, loss: f64, grad: Mat) -> Var {
        assert_eq!(self.value(a).dim(), grad.dim());
        self.push(Mat::from_elem((1, 1), loss), Op::Precomputed { x: a, grad })
    }

    pub fn backward(&self, loss: Var) -> Backward {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Mat>> = vec![None; n];
        grads[loss.0] = Some(Mat::ones(self.value(loss).dim()));

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(d) => *d += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let out = self.nodes[i].value.as_ref();
            match &self.nodes[i].op {
                Op::Leaf | Op::Param(_) => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulNT(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(a, r) => {
                    acc(&mut grads, *r, sum_rows(&g));
                    acc(&mut grads, *a, g);
                }
                Op::MulRow(a, r) => {
                    let gr = sum_rows(&(&g * self.value(*a)));
                    let ga = &g * self.value(*r);
                    acc(&mut grads, *r, gr);
                    acc(&mut grads, *a, ga);
                }
                Op::Scale(a, k) => acc(&mut grads, *a, g * *k),
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let mut ga = g;
                    ga.zip_mut_with(x, |d, &xv| {
                        if xv <= 0.0 {
                            *d = 0.0
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let y = out.unwrap();
                    let mut ga = g;
                    ga.zip_mut_with(y, |d, &yv| *d *= 1.0 - yv * yv);
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let y = out.unwrap();
                    let mut ga = g;
                    ga.zip_mut_with(y, |d, &yv| *d *= yv * (1.0 - yv));
                    acc(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = out.unwrap();
                    let mut ga = g;
                    for (mut gr, yr) in ga.rows_mut().into_iter().zip(y.rows()) {
                        let dot: f64 = gr.iter().zip(yr.iter()).map(|(a, b)| a * b).sum();
                        gr.zip_mut_with(&yr, |d, &yv| *d = yv * (*d - dot));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = out.unwrap();
                    let mut ga = g;
                    for (mut gr, yr) in ga.rows_mut().into_iter().zip(y.rows()) {
                        let total: f64 = gr.sum();
                        gr.zip_mut_with(&yr, |d, &yv| *d -= yv.exp() * total);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm { x, inv_std } => {
                    let y = out.unwrap();
                    let mut ga = g;
                    for ((mut gr, yr), &is) in ga.rows_mut().into_iter().zip(y.rows()).zip(inv_std)
                    {
                        let n = gr.len() as f64;
                        let mean_g = gr.sum() / n;
                        let mean_gy: f64 =
                            gr.iter().zip(yr.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                        gr.zip_mut_with(&yr, |d, &yv| *d = is * (*d - mean_g - yv * mean_gy));
                    }
                    acc(&mut grads, *x, ga);
                }
                Op::Im2Col { x, kernel, dilation } => {
                    let (t, c) = self.value(*x).dim();
                    let ga = col2im(&g, t, c, *kernel, *dilation);
                    acc(&mut grads, *x, ga);
                }
                Op::GatherRows(a, idx) => {
                    let mut ga = Mat::zeros(self.value(*a).dim());
                    for (o, &src) in idx.iter().enumerate() {
                        let mut dst = ga.row_mut(src);
                        dst += &g.row(o);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Mat::zeros(self.value(*a).dim());
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        acc(&mut grads, p, g.slice(s![.., off..off + w]).to_owned());
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let h = self.value(p).nrows();
                        acc(&mut grads, p, g.slice(s![off..off + h, ..]).to_owned());
                        off += h;
                    }
                }
                Op::SumRows(a) => {
                    let rows = self.value(*a).nrows();
                    let ga = g
                        .broadcast((rows, g.ncols()))
                        .expect("row broadcast")
                        .to_owned();
                    acc(&mut grads, *a, ga);
                }
                Op::MeanAll(a) => {
                    let x = self.value(*a);
                    let k = g[[0, 0]] / x.len() as f64;
                    acc(&mut grads, *a, Mat::from_elem(x.dim(), k));
                }
                Op::MeanStdPool(a) => {
                    let x = self.value(*a);
                    let y = out.unwrap();
                    let (t, c) = x.dim();
                    let tf = t as f64;
                    let mut ga = Mat::zeros((t, c));
                    for j in 0..c {
                        let mean = y[[0, j]];
                        let std = y[[0, c + j]];
                        let gm = g[[0, j]] / tf;
                        let gs = g[[0, c + j]] / (std * tf);
                        for r in 0..t {
                            ga[[r, j]] = gm + gs * (x[[r, j]] - mean);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::L2NormalizeRows(a) => {
                    let x = self.value(*a);
                    let y = out.unwrap();
                    let mut ga = g;
                    for ((mut gr, yr), xr) in ga.rows_mut().into_iter().zip(y.rows()).zip(x.rows())
                    {
                        let n = xr.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
                        let dot: f64 = gr.iter().zip(yr.iter()).map(|(a, b)| a * b).sum();
                        gr.zip_mut_with(&yr, |d, &yv| *d = (*d - yv * dot) / n);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Precomputed { x, grad } => {
                    let k = g[[0, 0]];
                    acc(&mut grads, *x, grad * k);
                }
            }
        }

        let param_of_node = self
            .nodes
            .iter()
            .map(|n| match n.op {
                Op::Param(id) => Some(id),
                _ => None,
            })
            .collect();
        Backward {
            grads,
            param_of_node,
            n_params: self.params.len(),
        }
    }
}

const POOL_EPS: f64 = 1e-6;
const NORM_EPS: f64 = 1e-12;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    out
}

pub fn log_softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

fn im2col(x: &Mat, kernel: usize, dilation: usize) -> Mat {
    let (t, c) = x.dim();
    let half = (kernel / 2) as isize;
    let mut out = Mat::zeros((t, kernel * c));
    for j in 0..kernel {
        let shift = (j as isize - half) * dilation as isize;
        for r in 0..t {
            let src = r as isize + shift;
            if src >= 0 && (src as usize) < t {
                out.slice_mut(s![r, j * c..(j + 1) * c])
                    .assign(&x.row(src as usize));
            }
        }
    }
    out
}

fn col2im(g: &Mat, t: usize, c: usize, kernel: usize, dilation: usize) -> Mat {
    let half = (kernel / 2) as isize;
    let mut out = Mat::zeros((t, c));
    for j in 0..kernel {
        let shift = (j as isize - half) * dilation as isize;
        for r in 0..t {
            let src = r as isize + shift;
            if src >= 0 && (src as usize) < t {
                let mut dst = out.row_mut(src as usize);
                dst += &g.slice(s![r, j * c..(j + 1) * c]);
            }
        }
    }
    out
}

/// Central finite-difference checks of tape gradients.
pub mod gradcheck {
    use super::*;

    const H: f64 = 1e-6;

    fn rel_err(a: f64, n: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
    }

    /// Largest relative error between the tape gradient of `f` with respect to
    /// `x` and central finite differences.
    pub fn max_rel_error<F>(x: &Mat, f: F) -> f64
    where
        F: Fn(&mut Tape, Var) -> Var,
    {
        max_rel_error_in(&ParamSet::new(), x, f)
    }

    /// As [`max_rel_error`], with parameters available on the tape.
    pub fn max_rel_error_in<F>(params: &ParamSet, x: &Mat, f: F) -> f64
    where
        F: Fn(&mut Tape, Var) -> Var,
    {
        let mut tape = Tape::new(params);
        let v = tape.leaf(x.clone());
        let loss = f(&mut tape, v);
        let analytic = tape.backward(loss).wrt(v).cloned().unwrap();
        let eval = |m: &Mat| {
            let mut t = Tape::new(params);
            let v = t.leaf(m.clone());
            let l = f(&mut t, v);
            t.scalar(l)
        };
        let mut worst: f64 = 0.0;
        for idx in 0..x.len() {
            let mut plus = x.clone();
            let mut minus = x.clone();
            plus.as_slice_mut().unwrap()[idx] += H;
            minus.as_slice_mut().unwrap()[idx] -= H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            worst = worst.max(rel_err(analytic.as_slice().unwrap()[idx], numeric));
        }
        worst
    }

    /// Largest relative error over every entry of every parameter whose name
    /// starts with `prefix`.
    pub fn param_rel_error<F>(params: &ParamSet, prefix: &str, f: F) -> f64
    where
        F: Fn(&mut Tape) -> Var,
    {
        let tape_grads = {
            let mut t = Tape::new(params);
            let l = f(&mut t);
            t.backward(l).param_grads()
        };
        let eval = |p: &ParamSet| {
            let mut t = Tape::new(p);
            let l = f(&mut t);
            t.scalar(l)
        };
        let mut worst: f64 = 0.0;
        let ids: Vec<ParamId> = params
            .iter()
            .filter(|(_, name, _)| name.starts_with(prefix))
            .map(|(id, _, _)| id)
            .collect();
        for id in ids {
            let n = params.get(id).len();
            for idx in 0..n {
                let mut plus = params.clone();
                let mut minus = params.clone();
                plus.get_mut(id).as_slice_mut().unwrap()[idx] += H;
                minus.get_mut(id).as_slice_mut().unwrap()[idx] -= H;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
                let a = tape_grads
                    .get(id)
                    .map_or(0.0, |g| g[[idx / g.ncols(), idx % g.ncols()]]);
                worst = worst.max(rel_err(a, numeric));
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::max_rel_error;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn elementwise_and_matmul_grads() {
        let w = rand_mat(4, 3, 1);
        let x = rand_mat(5, 4, 2);
        let err = max_rel_error(&x, |t, v| {
            let w = t.leaf(w.clone());
            let h = t.matmul(v, w);
            let h = t.tanh(h);
            let s = t.sigmoid(h);
            let m = t.mul(s, h);
            t.mean_all(m)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn softmax_family_grads() {
        let x = rand_mat(4, 6, 3);
        let err = max_rel_error(&x, |t, v| {
            let a = t.softmax_rows(v);
            let b = t.log_softmax_rows(v);
            let c = t.mul(a, b);
            let d = t.layer_norm(c, 1e-5);
            let e = t.l2_normalize_rows(d);
            let k = t.leaf(rand_mat(4, 6, 9));
            let f = t.mul(e, k);
            t.mean_all(f)
        });
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn conv_gather_pool_grads() {
        let x = rand_mat(7, 3, 4);
        let err = max_rel_error(&x, |t, v| {
            let cols = t.im2col(v, 3, 2);
            let w = t.leaf(rand_mat(9, 2, 5));
            let y = t.matmul(cols, w);
            let g = t.gather_rows(y, vec![0, 0, 3, 6, 2]);
            let p = t.mean_std_pool(g);
            let q = t.matmul_nt(p, p);
            let sl = t.slice_cols(g, 1, 1);
            let sr = t.sum_rows(sl);
            let cat = t.concat_cols(&[q, sr]);
            let head = t.slice_cols(p, 1, 2);
            let stacked = t.concat_rows(&[cat, head, cat]);
            let k = t.leaf(rand_mat(3, 2, 6));
            let m = t.mul(stacked, k);
            t.mean_all(m)
        });
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn row_broadcast_grads() {
        let x = rand_mat(1, 4, 6);
        let base = rand_mat(5, 4, 7);
        let err = max_rel_error(&x, |t, v| {
            let b = t.leaf(base.clone());
            let a = t.add_row(b, v);
            let m = t.mul_row(a, v);
            let r = t.relu(m);
            t.mse(r, &Mat::ones((5, 4)), Some(&[true, false, true, true, false]))
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn im2col_centres_kernel() {
        let x = Mat::from_shape_vec((3, 1), vec![1.0, 2.0, 3.0]).unwrap();
        let c = im2col(&x, 3, 1);
        assert_eq!(c.row(0).to_vec(), vec![0.0, 1.0, 2.0]);
        assert_eq!(c.row(2).to_vec(), vec![2.0, 3.0, 0.0]);
    }

    #[test]
    fn param_blob_round_trip() {
        let mut p = ParamSet::new();
        p.add("a.w", rand_mat(2, 3, 1));
        p.add("b.w", rand_mat(1, 4, 2));
        let mut buf = Vec::new();
        p.write_filtered(&mut buf, "a.").unwrap();
        let mut q = p.clone();
        q.get_mut(ParamId(0)).fill(0.0);
        assert_eq!(q.load_from(&buf[..]).unwrap(), 1);
        assert_eq!(p, q);
    }
}
