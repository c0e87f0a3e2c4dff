//! Tape of differentiable operations.
//!
//! Nodes are appended in creation order, so the node vector is already a
//! topological order and backward is a single reverse sweep.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::Params;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Additive mask value for excluded attention logits.
pub const MASK_NEG: f64 = -1e9;
/// Variance floor inside layer normalisation.
pub const LN_EPS: f64 = 1e-5;
/// Lower clamp applied to log arguments.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
pub(crate) struct ConvGeom {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
}

/// Batch of right-padded sequences that share one attention call.
#[derive(Debug, Clone)]
pub struct AttnLayout {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    /// Valid positions per sequence; keys at or beyond this are padding.
    pub lens: Vec<usize>,
}

impl AttnLayout {
    fn key_allowed(&self, b: usize, query: usize, key: usize) -> bool {
        key <= query && key < self.lens[b]
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    AddBias(Var, Var),
    MulCols(Var, Var),
    Add(Var, Var),
    AddConst(Var),
    Affine(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    MaskedSoftmax(Var),
    LayerNorm { x: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Dropout { x: Var, keep: Vec<f64> },
    Mse { pred: Var, target: Tensor, rows: Vec<bool>, count: usize },
    WeightedSum { x: Var, weights: Tensor },
    Sum(Var),
    Reshape(Var),
    Transpose(Var),
    GatherRows { x: Var, index: Vec<Option<usize>> },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Attention { q: Var, k: Var, v: Var, layout: AttnLayout, probs: Vec<f64> },
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::MulCols(..) => "mul_cols",
            Op::Add(..) => "add",
            Op::AddConst(..) => "add_const",
            Op::Affine(..) => "affine",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Log(..) => "log",
            Op::MaskedSoftmax(..) => "masked_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Dropout { .. } => "dropout",
            Op::Mse { .. } => "mse",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::Sum(..) => "sum",
            Op::Reshape(..) => "reshape",
            Op::Transpose(..) => "transpose",
            Op::GatherRows { .. } => "gather_rows",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2 { .. } => "max_pool2",
            Op::Attention { .. } => "attention",
        }
    }
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
}

/// C = op(A) * op(B) (+ beta * C), with logical shapes (m, k) and (k, n).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths cover the strided extents described above.
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Softmax over `logits` after adding [`MASK_NEG`] where `allowed` is false.
/// Excluded entries come out exactly zero.
pub fn masked_softmax_row(logits: &[f64], allowed: impl Fn(usize) -> bool, out: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for (j, &z) in logits.iter().enumerate() {
        let z = if allowed(j) { z } else { z + MASK_NEG };
        out[j] = z;
        max = max.max(z);
    }
    let mut sum = 0.0;
    for o in out.iter_mut() {
        *o = (*o - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn im2col(img: &[f64], c_in: usize, h: usize, w: usize, k: usize, cols: &mut [f64]) {
    let pad = k / 2;
    let hw = h * w;
    for c in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    for x in 0..w {
                        let sx = x as isize + kx as isize - pad as isize;
                        dst[y * w + x] = if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                            img[(c * h + sy as usize) * w + sx as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], c_in: usize, h: usize, w: usize, k: usize, img: &mut [f64]) {
    let pad = k / 2;
    let hw = h * w;
    for c in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + kx as isize - pad as isize;
                        if sx >= 0 && sx < w as isize {
                            img[(c * h + sy as usize) * w + sx as usize] += src[y * w + x];
                        }
                    }
                }
            }
        }
    }
}

/// A single forward/backward computation.
///
/// Owned by one worker; nothing inside is shared.
pub struct Graph {
    nodes: Vec<Node>,
    mode: Mode,
    rng: ChaCha8Rng,
    param_vars: Vec<Option<Var>>,
}

impl Graph {
    pub fn new(mode: Mode, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            param_vars: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Non-trainable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Trainable leaf bound to slot `id` of `params`. Repeated calls return the same node.
    pub fn param(&mut self, params: &Params, id: usize) -> Var {
        if self.param_vars.len() < params.len() {
            self.param_vars.resize(params.len(), None);
        }
        if let Some(v) = self.param_vars[id] {
            return v;
        }
        let v = self.push(params.tensor(id).clone(), Op::Param);
        self.param_vars[id] = Some(v);
        v
    }

    pub fn param_named(&mut self, params: &Params, name: &str) -> Result<Var> {
        let id = params
            .id(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
        Ok(self.param(params, id))
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = self.value(v);
        t.dims2()
            .ok_or_else(|| Error::shape(op, t.shape(), &[0, 0]))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        self.push(t, op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b)))
    }

    /// `x[m, n] + b[n]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "add_bias")?;
        let bias = self.value(b);
        if bias.len() != n {
            return Err(Error::shape("add_bias", self.value(x).shape(), bias.shape()));
        }
        let mut out = self.value(x).data().to_vec();
        for r in 0..m {
            for (o, bv) in out[r * n..(r + 1) * n].iter_mut().zip(bias.data()) {
                *o += bv;
            }
        }
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::AddBias(x, b)))
    }

    /// `x[m, n] * g[n]` broadcast over rows.
    pub fn mul_cols(&mut self, x: Var, g: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "mul_cols")?;
        let gain = self.value(g);
        if gain.len() != n {
            return Err(Error::shape("mul_cols", self.value(x).shape(), gain.shape()));
        }
        let mut out = self.value(x).data().to_vec();
        for r in 0..m {
            for (o, gv) in out[r * n..(r + 1) * n].iter_mut().zip(gain.data()) {
                *o *= gv;
            }
        }
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MulCols(x, g)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b)))
    }

    /// Adds a constant tensor of the same shape (e.g. positional rows).
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        if self.value(x).shape() != c.shape() {
            return Err(Error::shape("add_const", self.value(x).shape(), c.shape()));
        }
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .zip(c.data())
            .map(|(a, b)| a + b)
            .collect();
        let shape = c.shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::AddConst(x)))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.map(x, |v| scale * v + shift, Op::Affine(x, scale))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    /// Natural log with arguments clamped below at [`LOG_FLOOR`].
    pub fn log(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(LOG_FLOOR).ln(), Op::Log(x))
    }

    /// Row-wise softmax of `x[m, n]`; positions where `allowed` is false get
    /// [`MASK_NEG`] added before normalising.
    pub fn masked_softmax(&mut self, x: Var, allowed: &[bool]) -> Result<Var> {
        let (m, n) = self.dims2(x, "masked_softmax")?;
        if allowed.len() != m * n {
            return Err(Error::shape("masked_softmax", &[m, n], &[allowed.len()]));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row_mask = &allowed[r * n..(r + 1) * n];
            masked_softmax_row(&src[r * n..(r + 1) * n], |j| row_mask[j], &mut out[r * n..(r + 1) * n]);
        }
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MaskedSoftmax(x)))
    }

    /// Row normalisation without affine terms.
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "layer_norm")?;
        let src = self.value(x).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for (o, v) in xhat[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let value = Tensor::new(vec![m, n], xhat.clone())?;
        Ok(self.push(value, Op::LayerNorm { x, xhat, inv_std }))
    }

    /// Inverted dropout; identity in eval mode or for `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if self.mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let scale = 1.0 / (1.0 - rate);
        let n = self.value(x).len();
        let keep: Vec<f64> = (0..n)
            .map(|_| if self.rng.random::<f64>() < rate { 0.0 } else { scale })
            .collect();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .zip(&keep)
            .map(|(v, k)| v * k)
            .collect();
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Dropout { x, keep }))
    }

    /// Mean squared error over the rows flagged in `rows`, against a constant target.
    pub fn mse_rows(&mut self, pred: Var, target: Tensor, rows: Vec<bool>) -> Result<Var> {
        let (m, n) = self.dims2(pred, "mse")?;
        if target.shape() != [m, n] || rows.len() != m {
            return Err(Error::shape("mse", &[m, n], target.shape()));
        }
        let count = rows.iter().filter(|&&r| r).count() * n;
        if count == 0 {
            return Err(Error::Contract("mse over zero valid rows".into()));
        }
        let p = self.value(pred).data();
        let mut acc = 0.0;
        for r in (0..m).filter(|&r| rows[r]) {
            for c in 0..n {
                acc += (p[r * n + c] - target.data()[r * n + c]).powi(2);
            }
        }
        let value = Tensor::scalar(acc / count as f64);
        Ok(self.push(value, Op::Mse { pred, target, rows, count }))
    }

    /// `sum(weights * x)` as a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        if self.value(x).shape() != weights.shape() {
            return Err(Error::shape("weighted_sum", self.value(x).shape(), weights.shape()));
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, w)| a * w)
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "transpose")?;
        let src = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                out[c * m + r] = src[r * n + c];
            }
        }
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(x)))
    }

    /// Builds rows `out[i] = x[index[i]]`, with `None` producing a zero row.
    pub fn gather_rows(&mut self, x: Var, index: Vec<Option<usize>>) -> Result<Var> {
        let (m, n) = self.dims2(x, "gather_rows")?;
        if index.is_empty() {
            return Err(Error::Contract("gather_rows needs at least one row".into()));
        }
        if let Some(bad) = index.iter().flatten().find(|&&i| i >= m) {
            return Err(Error::shape("gather_rows", &[m, n], &[*bad]));
        }
        let src = self.value(x);
        let mut out = vec![0.0; index.len() * n];
        for (i, src_row) in index.iter().enumerate() {
            if let Some(r) = src_row {
                out[i * n..(i + 1) * n].copy_from_slice(src.row(*r));
            }
        }
        let rows = index.len();
        Ok(self.push(Tensor::new(vec![rows, n], out)?, Op::GatherRows { x, index }))
    }

    /// Same-padded stride-1 convolution of `x[n, c_in, h, w]` with `w[c_out, c_in, k, k]` plus bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (n, c_in, h, wd) = match xs[..] {
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(Error::shape("conv2d", &xs, &ws)),
        };
        let (c_out, k) = match ws[..] {
            [o, c, k1, k2] if c == c_in && k1 == k2 && k1 % 2 == 1 => (o, k1),
            _ => return Err(Error::shape("conv2d", &xs, &ws)),
        };
        if self.value(b).len() != c_out {
            return Err(Error::shape("conv2d", &ws, self.value(b).shape()));
        }
        let geom = ConvGeom { n, c_in, h, w: wd, c_out, k };
        let hw = h * wd;
        let ck = c_in * k * k;
        let mut cols = vec![0.0; ck * hw];
        let mut out = vec![0.0; n * c_out * hw];
        let xin = self.value(x).data();
        let wt = self.value(w).data();
        let bias = self.value(b).data();
        for i in 0..n {
            im2col(&xin[i * c_in * hw..(i + 1) * c_in * hw], c_in, h, wd, k, &mut cols);
            let dst = &mut out[i * c_out * hw..(i + 1) * c_out * hw];
            for (o, bv) in bias.iter().enumerate() {
                dst[o * hw..(o + 1) * hw].fill(*bv);
            }
            gemm(c_out, ck, hw, wt, false, &cols, false, dst, 1.0);
        }
        let value = Tensor::new(vec![n, c_out, h, wd], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }))
    }

    /// 2x2 max pooling with stride 2 over `[n, c, h, w]`; odd trailing rows/cols are dropped.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let (n, c, h, w) = match xs[..] {
            [n, c, h, w] if h >= 2 && w >= 2 => (n, c, h, w),
            _ => return Err(Error::shape("max_pool2", &xs, &[2, 2])),
        };
        let (ho, wo) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = vec![0.0; n * c * ho * wo];
        let mut argmax = vec![0usize; out.len()];
        for plane in 0..n * c {
            let base = plane * h * w;
            for y in 0..ho {
                for xo in 0..wo {
                    let mut best = base + 2 * y * w + 2 * xo;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * y + dy) * w + 2 * xo + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    let o = (plane * ho + y) * wo + xo;
                    out[o] = src[best];
                    argmax[o] = best;
                }
            }
        }
        let value = Tensor::new(vec![n, c, ho, wo], out)?;
        Ok(self.push(value, Op::MaxPool2 { x, argmax }))
    }

    /// Multi-head scaled dot-product attention with causal and key-padding masks.
    ///
    /// `q`, `k`, `v` are `[batch * seq, d]`; heads split the columns evenly.
    /// The per-head probabilities are retained and can be read back with
    /// [`Graph::attention_probs`] as `[batch, heads, seq, seq]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttnLayout) -> Result<Var> {
        let (rows, d) = self.dims2(q, "attention")?;
        self.same_shape(q, k, "attention")?;
        self.same_shape(q, v, "attention")?;
        let AttnLayout { batch, seq, heads, .. } = layout;
        if rows != batch * seq || heads == 0 || d % heads != 0 || layout.lens.len() != batch {
            return Err(Error::shape("attention", &[rows, d], &[batch, seq, heads]));
        }
        if layout.lens.iter().any(|&l| l == 0 || l > seq) {
            return Err(Error::Data("attention needs 1..=seq valid positions per sequence".into()));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; rows * d];
        let mut logits = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq {
                    let qi = &qd[(b * seq + i) * d + off..][..dh];
                    for (j, l) in logits.iter_mut().enumerate() {
                        let kj = &kd[(b * seq + j) * d + off..][..dh];
                        *l = scale * qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>();
                    }
                    let p = &mut probs[((b * heads + h) * seq + i) * seq..][..seq];
                    masked_softmax_row(&logits, |j| layout.key_allowed(b, i, j), p);
                    let oi = &mut out[(b * seq + i) * d + off..][..dh];
                    for (j, &pij) in p.iter().enumerate() {
                        if pij == 0.0 {
                            continue;
                        }
                        let vj = &vd[(b * seq + j) * d + off..][..dh];
                        for (o, x) in oi.iter_mut().zip(vj) {
                            *o += pij * x;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![rows, d], out)?;
        Ok(self.push(value, Op::Attention { q, k, v, layout, probs }))
    }

    /// Probabilities saved by an attention node, `[batch, heads, seq, seq]`.
    pub fn attention_probs(&self, v: Var) -> Option<(&AttnLayout, &[f64])> {
        match &self.nodes[v.0].op {
            Op::Attention { layout, probs, .. } => Some((layout, probs)),
            _ => None,
        }
    }

    fn accumulate(&mut self, v: Var, g: Tensor) {
        let node = &mut self.nodes[v.0];
        match &mut node.grad {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Reverse sweep from a scalar `loss`, populating adjoints of every reachable node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[loss.0].grad = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contribs = self.local_grads(i, &g)?;
            self.nodes[i].grad = Some(g);
            for (v, t) in contribs {
                self.accumulate(v, t);
            }
        }
        Ok(())
    }

    fn like(&self, v: Var, data: Vec<f64>) -> Tensor {
        Tensor::new(self.value(v).shape().to_vec(), data).expect("shape preserved")
    }

    fn local_grads(&self, i: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[i];
        let gd = g.data();
        let out = node.value.data();
        let grads = match &node.op {
            Op::Leaf | Op::Param => vec![],
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).dims2().unwrap().1;
                let mut da = vec![0.0; m * k];
                gemm(m, n, k, gd, false, self.value(*b).data(), true, &mut da, 0.0);
                let mut db = vec![0.0; k * n];
                gemm(k, m, n, self.value(*a).data(), true, gd, false, &mut db, 0.0);
                vec![(*a, self.like(*a, da)), (*b, self.like(*b, db))]
            }
            Op::AddBias(x, b) => {
                let n = self.value(*b).len();
                let mut db = vec![0.0; n];
                for row in gd.chunks(n) {
                    for (d, r) in db.iter_mut().zip(row) {
                        *d += r;
                    }
                }
                vec![(*x, g.clone()), (*b, self.like(*b, db))]
            }
            Op::MulCols(x, gain) => {
                let gv = self.value(*gain).data();
                let xv = self.value(*x).data();
                let n = gv.len();
                let mut dx = vec![0.0; gd.len()];
                let mut dg = vec![0.0; n];
                for (r, row) in gd.chunks(n).enumerate() {
                    for c in 0..n {
                        dx[r * n + c] = row[c] * gv[c];
                        dg[c] += row[c] * xv[r * n + c];
                    }
                }
                vec![(*x, self.like(*x, dx)), (*gain, self.like(*gain, dg))]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::AddConst(x) | Op::Reshape(x) => vec![(*x, self.like(*x, gd.to_vec()))],
            Op::Affine(x, s) => vec![(*x, self.like(*x, gd.iter().map(|v| v * s).collect()))],
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let dx = gd.iter().zip(xv).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect();
                vec![(*x, self.like(*x, dx))]
            }
            Op::Sigmoid(x) => {
                let dx = gd.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect();
                vec![(*x, self.like(*x, dx))]
            }
            Op::Log(x) => {
                let xv = self.value(*x).data();
                let dx = gd
                    .iter()
                    .zip(xv)
                    .map(|(g, x)| if *x > LOG_FLOOR { g / x } else { 0.0 })
                    .collect();
                vec![(*x, self.like(*x, dx))]
            }
            Op::MaskedSoftmax(x) => {
                let (m, n) = self.value(*x).dims2().unwrap();
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    let p = &out[r * n..(r + 1) * n];
                    let gr = &gd[r * n..(r + 1) * n];
                    let dot: f64 = p.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..n {
                        dx[r * n + c] = p[c] * (gr[c] - dot);
                    }
                }
                vec![(*x, self.like(*x, dx))]
            }
            Op::LayerNorm { x, xhat, inv_std } => {
                let (m, n) = self.value(*x).dims2().unwrap();
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    let gr = &gd[r * n..(r + 1) * n];
                    let xr = &xhat[r * n..(r + 1) * n];
                    let mean_g = gr.iter().sum::<f64>() / n as f64;
                    let mean_gx = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for c in 0..n {
                        dx[r * n + c] = inv_std[r] * (gr[c] - mean_g - xr[c] * mean_gx);
                    }
                }
                vec![(*x, self.like(*x, dx))]
            }
            Op::Dropout { x, keep } => {
                let dx = gd.iter().zip(keep).map(|(g, k)| g * k).collect();
                vec![(*x, self.like(*x, dx))]
            }
            Op::Mse { pred, target, rows, count } => {
                let (m, n) = self.value(*pred).dims2().unwrap();
                let p = self.value(*pred).data();
                let s = 2.0 * gd[0] / *count as f64;
                let mut dp = vec![0.0; m * n];
                for r in (0..m).filter(|&r| rows[r]) {
                    for c in 0..n {
                        dp[r * n + c] = s * (p[r * n + c] - target.data()[r * n + c]);
                    }
                }
                vec![(*pred, self.like(*pred, dp))]
            }
            Op::WeightedSum { x, weights } => {
                vec![(*x, self.like(*x, weights.data().iter().map(|w| w * gd[0]).collect()))]
            }
            Op::Sum(x) => vec![(*x, Tensor::full(self.value(*x).shape(), gd[0]))],
            Op::Transpose(x) => {
                let (m, n) = self.value(*x).dims2().unwrap();
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    for c in 0..n {
                        dx[r * n + c] = gd[c * m + r];
                    }
                }
                vec![(*x, self.like(*x, dx))]
            }
            Op::GatherRows { x, index } => {
                let (m, n) = self.value(*x).dims2().unwrap();
                let mut dx = vec![0.0; m * n];
                for (i, src) in index.iter().enumerate() {
                    if let Some(r) = src {
                        for c in 0..n {
                            dx[r * n + c] += gd[i * n + c];
                        }
                    }
                }
                vec![(*x, self.like(*x, dx))]
            }
            Op::Conv2d { x, w, b, geom } => {
                let ConvGeom { n, c_in, h, w: wd, c_out, k } = *geom;
                let hw = h * wd;
                let ck = c_in * k * k;
                let xin = self.value(*x).data();
                let wt = self.value(*w).data();
                let mut dx = vec![0.0; n * c_in * hw];
                let mut dw = vec![0.0; c_out * ck];
                let mut db = vec![0.0; c_out];
                let mut cols = vec![0.0; ck * hw];
                let mut dcols = vec![0.0; ck * hw];
                for i in 0..n {
                    let go = &gd[i * c_out * hw..(i + 1) * c_out * hw];
                    for (o, d) in db.iter_mut().enumerate() {
                        *d += go[o * hw..(o + 1) * hw].iter().sum::<f64>();
                    }
                    im2col(&xin[i * c_in * hw..(i + 1) * c_in * hw], c_in, h, wd, k, &mut cols);
                    gemm(c_out, hw, ck, go, false, &cols, true, &mut dw, 1.0);
                    gemm(ck, c_out, hw, wt, true, go, false, &mut dcols, 0.0);
                    col2im(&dcols, c_in, h, wd, k, &mut dx[i * c_in * hw..(i + 1) * c_in * hw]);
                }
                vec![
                    (*x, self.like(*x, dx)),
                    (*w, self.like(*w, dw)),
                    (*b, self.like(*b, db)),
                ]
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += gd[o];
                }
                vec![(*x, self.like(*x, dx))]
            }
            Op::Attention { q, k, v, layout, probs } => {
                let (rows, d) = self.value(*q).dims2().unwrap();
                let AttnLayout { batch, seq, heads, .. } = *layout;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut dq = vec![0.0; rows * d];
                let mut dk = vec![0.0; rows * d];
                let mut dv = vec![0.0; rows * d];
                let mut dp = vec![0.0; seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let off = h * dh;
                        for i in 0..seq {
                            let p = &probs[((b * heads + h) * seq + i) * seq..][..seq];
                            let gi = &gd[(b * seq + i) * d + off..][..dh];
                            let mut dot = 0.0;
                            for j in 0..seq {
                                if p[j] == 0.0 {
                                    dp[j] = 0.0;
                                    continue;
                                }
                                let vj = &vd[(b * seq + j) * d + off..][..dh];
                                dp[j] = gi.iter().zip(vj).map(|(a, c)| a * c).sum();
                                dot += p[j] * dp[j];
                                let dvj = &mut dv[(b * seq + j) * d + off..][..dh];
                                for (dvv, gv) in dvj.iter_mut().zip(gi) {
                                    *dvv += p[j] * gv;
                                }
                            }
                            for j in 0..seq {
                                if p[j] == 0.0 {
                                    continue;
                                }
                                let ds = p[j] * (dp[j] - dot) * scale;
                                let (ri, rj) = ((b * seq + i) * d + off, (b * seq + j) * d + off);
                                for c in 0..dh {
                                    dq[ri + c] += ds * kd[rj + c];
                                    dk[rj + c] += ds * qd[ri + c];
                                }
                            }
                        }
                    }
                }
                vec![
                    (*q, self.like(*q, dq)),
                    (*k, self.like(*k, dk)),
                    (*v, self.like(*v, dv)),
                ]
            }
        };
        for (v, t) in &grads {
            if t.shape() != self.value(*v).shape() {
                return Err(Error::shape(node.op.tag(), t.shape(), self.value(*v).shape()));
            }
        }
        Ok(grads)
    }

    /// Adjoints for every parameter slot; unused slots get zeros.
    pub fn param_grads(&self, params: &Params) -> Vec<Tensor> {
        (0..params.len())
            .map(|id| {
                self.param_vars
                    .get(id)
                    .copied()
                    .flatten()
                    .and_then(|v| self.grad(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(params.tensor(id).shape()))
            })
            .collect()
    }
}
