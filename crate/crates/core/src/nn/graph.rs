use std::sync::atomic::{AtomicU64, Ordering};

use super::layers::{RunningStats, BN_EPS, BN_MOMENTUM};
use super::tensor::numel;
use super::{BnMode, NnError, ParamId, ParamStore, Result, Tensor};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    graph: u64,
    idx: usize,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    oc: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_spatial(&self) -> usize {
        self.oh * self.ow
    }
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    AddBias(usize, usize),
    Conv2d { x: usize, w: usize, b: usize, geom: ConvGeom, cols: Vec<f64> },
    BatchNorm { x: usize, gamma: usize, beta: usize, channels: usize, inner: usize, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool, per_sample: bool },
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Ln(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Attention { f: usize, g: usize, channels: usize, spatial: usize },
    GlobalMaxPool { x: usize, argmax: Vec<usize> },
    GlobalAvgPool { x: usize, spatial: usize },
    Clamp { x: usize, lo: f64, hi: f64 },
    Reshape(usize),
    SliceCols { x: usize, start: usize, width: usize },
    SliceRows { x: usize, start: usize },
    ConcatRows(Vec<usize>),
    Softmax(usize),
    LogSoftmax(usize),
    SoftmaxEntropy(usize),
    Pick { x: usize, idx: Vec<usize> },
    Sum(usize),
    WeightedSum { x: usize, weights: Vec<f64> },
    GaussianNll { v: usize, nu: usize, target: Vec<f64> },
    HalfSquaredError { v: usize, target: Vec<f64> },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Single-threaded computation tape.
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
    param_nodes: Vec<(ParamId, usize)>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// c = a·b + beta·c with optional transposed storage of a and b.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slice lengths were checked against the m×k, k×n, m×n extents above
    // and the strides address only elements inside those extents.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(d, s)| *d += s),
        None => *dst = Some(src.to_vec()),
    }
}

fn shape_err(op: &'static str, detail: String) -> NnError {
    NnError::ShapeMismatch { op, detail }
}

fn rows_cols(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(shape_err(op, format!("expected a 2-d tensor, got {shape:?}"))),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), param_nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.idx >= self.nodes.len() {
            return Err(NnError::Contract("variable does not belong to this graph".into()));
        }
        Ok(v.idx)
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if !value.iter().all(|v| v.is_finite()) {
            return Err(NnError::NonFinite { op: op_name });
        }
        self.nodes.push(Node { shape, value, op, needs_grad });
        Ok(Var { graph: self.id, idx: self.nodes.len() - 1 })
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.idx].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.idx].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.idx].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.idx];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape consistent")
    }

    /// Records a constant input. Constants never receive gradients.
    pub fn constant(&mut self, t: &Tensor) -> Result<Var> {
        self.push("constant", t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        self.push("constant", t.shape().to_vec(), t.into_data(), Op::Leaf, false)
    }

    /// Binds a parameter tensor. Binding the same id twice returns the same variable.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(&(_, idx)) = self.param_nodes.iter().find(|(p, _)| *p == id) {
            return Ok(Var { graph: self.id, idx });
        }
        let t = store.get(id);
        let v = self.push("param", t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)?;
        self.param_nodes.push((id, v.idx));
        Ok(v)
    }

    /// Copy of `x` with no gradient path back.
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        let i = self.idx(x)?;
        let (shape, value) = (self.nodes[i].shape.clone(), self.nodes[i].value.clone());
        self.push("detach", shape, value, Op::Leaf, false)
    }

    fn ng(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (m, k) = rows_cols(&self.nodes[ia].shape, "matmul")?;
        let (k2, n) = rows_cols(&self.nodes[ib].shape, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.nodes[ia].value, false, &self.nodes[ib].value, false, &mut out, 0.0);
        let ng = self.ng(ia) || self.ng(ib);
        self.push("matmul", vec![m, n], out, Op::MatMul(ia, ib), ng)
    }

    /// Adds a length-`n` bias to every row of an `[rows, n]` tensor.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (ix, ib) = (self.idx(x)?, self.idx(b)?);
        let (rows, n) = rows_cols(&self.nodes[ix].shape, "add_bias")?;
        if self.nodes[ib].value.len() != n {
            return Err(shape_err("add_bias", format!("bias of {} for width {n}", self.nodes[ib].value.len())));
        }
        let bias = &self.nodes[ib].value;
        let mut out = self.nodes[ix].value.clone();
        for r in 0..rows {
            out[r * n..(r + 1) * n].iter_mut().zip(bias).for_each(|(o, b)| *o += b);
        }
        let ng = self.ng(ix) || self.ng(ib);
        self.push("add_bias", vec![rows, n], out, Op::AddBias(ix, ib), ng)
    }

    /// Cross-correlation of `x: [n, c, h, w]` with `w: [oc, c, kh, kw]` plus bias `[oc]`,
    /// zero padding `pad` on every side.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (ix, iw, ib) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let (n, c, h, wd) = match self.nodes[ix].shape[..] {
            [n, c, h, w] => (n, c, h, w),
            ref s => return Err(shape_err("conv2d", format!("input must be 4-d, got {s:?}"))),
        };
        let (oc, c2, kh, kw) = match self.nodes[iw].shape[..] {
            [o, c, kh, kw] => (o, c, kh, kw),
            ref s => return Err(shape_err("conv2d", format!("kernel must be 4-d, got {s:?}"))),
        };
        if c != c2 {
            return Err(shape_err("conv2d", format!("input has {c} channels, kernel expects {c2}")));
        }
        if self.nodes[ib].value.len() != oc {
            return Err(shape_err("conv2d", format!("bias length {} for {oc} channels", self.nodes[ib].value.len())));
        }
        if stride == 0 {
            return Err(NnError::Contract("conv2d: stride must be positive".into()));
        }
        if kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(NnError::Contract(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                wd + 2 * pad
            )));
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w: wd,
            oc,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (wd + 2 * pad - kw) / stride + 1,
        };
        let (patch, spatial) = (geom.patch(), geom.out_spatial());
        let mut cols = vec![0.0; n * patch * spatial];
        let xs = &self.nodes[ix].value;
        for s in 0..n {
            let col = &mut cols[s * patch * spatial..(s + 1) * patch * spatial];
            im2col(&xs[s * c * h * wd..(s + 1) * c * h * wd], &geom, col);
        }
        let mut out = vec![0.0; n * oc * spatial];
        let (wv, bv) = (&self.nodes[iw].value, &self.nodes[ib].value);
        for s in 0..n {
            let o = &mut out[s * oc * spatial..(s + 1) * oc * spatial];
            for (ch, bias) in bv.iter().enumerate() {
                o[ch * spatial..(ch + 1) * spatial].fill(*bias);
            }
            gemm(oc, patch, spatial, wv, false, &cols[s * patch * spatial..(s + 1) * patch * spatial], false, o, 1.0);
        }
        let ng = self.ng(ix) || self.ng(iw) || self.ng(ib);
        let cols = if ng { cols } else { Vec::new() };
        self.push("conv2d", vec![n, oc, geom.oh, geom.ow], out, Op::Conv2d { x: ix, w: iw, b: ib, geom, cols }, ng)
    }

    /// Per-channel normalization over the batch and every trailing axis, or
    /// over each sample's trailing axes alone in [`BnMode::TrainPerSample`].
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: BnMode, stats: &mut RunningStats) -> Result<Var> {
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let shape = self.nodes[ix].shape.clone();
        if shape.len() < 2 || shape[0] == 0 {
            return Err(shape_err("batch_norm", format!("need [batch>=1, channels, ..], got {shape:?}")));
        }
        let (batch, channels) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        if self.nodes[ig].value.len() != channels || self.nodes[ib].value.len() != channels || stats.mean.len() != channels {
            return Err(shape_err("batch_norm", format!("{channels} channels vs scale/shift/stat extents")));
        }
        let xs = &self.nodes[ix].value;
        let (gv, bv) = (&self.nodes[ig].value, &self.nodes[ib].value);
        let per_sample = mode == BnMode::TrainPerSample;
        let (groups, group_len) = if per_sample { (batch, 1) } else { (1, batch) };
        let count = (group_len * inner) as f64;
        let mut xhat = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; groups * channels];
        let mut out = vec![0.0; xs.len()];
        let at = |n: usize, c: usize| (n * channels + c) * inner;
        for c in 0..channels {
            for grp in 0..groups {
                let samples = grp * group_len..(grp + 1) * group_len;
                let (mean, var) = match mode {
                    BnMode::Train | BnMode::TrainPerSample => {
                        let mut sum = 0.0;
                        for n in samples.clone() {
                            sum += xs[at(n, c)..at(n, c) + inner].iter().sum::<f64>();
                        }
                        let mean = sum / count;
                        let mut sq = 0.0;
                        for n in samples.clone() {
                            sq += xs[at(n, c)..at(n, c) + inner].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
                        }
                        let var = sq / count;
                        let unbiased = if count > 1.0 { sq / (count - 1.0) } else { var };
                        stats.mean[c] = BN_MOMENTUM * stats.mean[c] + (1.0 - BN_MOMENTUM) * mean;
                        stats.var[c] = BN_MOMENTUM * stats.var[c] + (1.0 - BN_MOMENTUM) * unbiased;
                        (mean, var)
                    }
                    BnMode::Eval => (stats.mean[c], stats.var[c]),
                };
                let is = 1.0 / (var + BN_EPS).sqrt();
                inv_std[grp * channels + c] = is;
                for n in samples {
                    for j in at(n, c)..at(n, c) + inner {
                        xhat[j] = (xs[j] - mean) * is;
                        out[j] = gv[c] * xhat[j] + bv[c];
                    }
                }
            }
        }
        let ng = self.ng(ix) || self.ng(ig) || self.ng(ib);
        let train = mode != BnMode::Eval;
        self.push(
            "batch_norm",
            shape,
            out,
            Op::BatchNorm { x: ix, gamma: ig, beta: ib, channels, inner, xhat, inv_std, train, per_sample },
            ng,
        )
    }

    fn unary(&mut self, x: Var, name: &'static str, f: impl Fn(f64) -> f64, op: impl FnOnce(usize) -> Op) -> Result<Var> {
        let ix = self.idx(x)?;
        let out: Vec<f64> = self.nodes[ix].value.iter().map(|&v| f(v)).collect();
        let (shape, ng) = (self.nodes[ix].shape.clone(), self.ng(ix));
        self.push(name, shape, out, op(ix), ng)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "relu", |v| v.max(0.0), Op::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "sigmoid", |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "tanh", f64::tanh, Op::Tanh)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "exp", f64::exp, Op::Exp)
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "ln", f64::ln, Op::Ln)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, "scale", |v| v * c, |i| Op::Scale(i, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, "add_scalar", |v| v + c, Op::AddScalar)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo < hi) {
            return Err(NnError::Contract(format!("clamp bounds [{lo}, {hi}] are not ordered")));
        }
        self.unary(x, "clamp", |v| v.clamp(lo, hi), |i| Op::Clamp { x: i, lo, hi })
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: fn(usize, usize) -> Op) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        if self.nodes[ia].shape != self.nodes[ib].shape {
            return Err(shape_err(name, format!("{:?} vs {:?}", self.nodes[ia].shape, self.nodes[ib].shape)));
        }
        let out = self.nodes[ia].value.iter().zip(&self.nodes[ib].value).map(|(&x, &y)| f(x, y)).collect();
        let ng = self.ng(ia) || self.ng(ib);
        let shape = self.nodes[ia].shape.clone();
        self.push(name, shape, out, op(ia, ib), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    /// Residual attention `(1 + f) * g`, with the single-channel map `f: [n, 1, h, w]`
    /// broadcast over the channels of `g: [n, c, h, w]`.
    pub fn attention_compose(&mut self, f: Var, g: Var) -> Result<Var> {
        let (jf, jg) = (self.idx(f)?, self.idx(g)?);
        let (fs, gs) = (&self.nodes[jf].shape, &self.nodes[jg].shape);
        if fs.len() != 4 || gs.len() != 4 || fs[1] != 1 || fs[0] != gs[0] || fs[2..] != gs[2..] {
            return Err(shape_err("attention_compose", format!("map {fs:?} cannot gate features {gs:?}")));
        }
        let (n, channels, spatial) = (gs[0], gs[1], gs[2] * gs[3]);
        let shape = gs.clone();
        let (fv, gv) = (&self.nodes[jf].value, &self.nodes[jg].value);
        let mut out = vec![0.0; gv.len()];
        for b in 0..n {
            let fmap = &fv[b * spatial..(b + 1) * spatial];
            for c in 0..channels {
                let base = (b * channels + c) * spatial;
                for s in 0..spatial {
                    out[base + s] = (1.0 + fmap[s]) * gv[base + s];
                }
            }
        }
        let ng = self.ng(jf) || self.ng(jg);
        self.push("attention_compose", shape, out, Op::Attention { f: jf, g: jg, channels, spatial }, ng)
    }

    fn single_channel_maps(&self, ix: usize, op: &'static str) -> Result<(usize, usize)> {
        let s = &self.nodes[ix].shape;
        if s.len() != 4 || s[1] != 1 {
            return Err(shape_err(op, format!("expected [batch, 1, h, w], got {s:?}")));
        }
        Ok((s[0], s[2] * s[3]))
    }

    /// Per-sample maximum of a single-channel map. Ties route the gradient to the
    /// first maximal element in row-major order.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let (n, spatial) = self.single_channel_maps(ix, "global_max_pool")?;
        let xs = &self.nodes[ix].value;
        let mut out = Vec::with_capacity(n);
        let mut argmax = Vec::with_capacity(n);
        for b in 0..n {
            let map = &xs[b * spatial..(b + 1) * spatial];
            let mut best = 0;
            for (j, v) in map.iter().enumerate() {
                if *v > map[best] {
                    best = j;
                }
            }
            argmax.push(b * spatial + best);
            out.push(map[best]);
        }
        let ng = self.ng(ix);
        self.push("global_max_pool", vec![n, 1], out, Op::GlobalMaxPool { x: ix, argmax }, ng)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let (n, spatial) = self.single_channel_maps(ix, "global_avg_pool")?;
        let xs = &self.nodes[ix].value;
        let out = (0..n).map(|b| xs[b * spatial..(b + 1) * spatial].iter().sum::<f64>() / spatial as f64).collect();
        let ng = self.ng(ix);
        self.push("global_avg_pool", vec![n, 1], out, Op::GlobalAvgPool { x: ix, spatial }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let ix = self.idx(x)?;
        if numel(&shape) != self.nodes[ix].value.len() {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", self.nodes[ix].shape)));
        }
        let (value, ng) = (self.nodes[ix].value.clone(), self.ng(ix));
        self.push("reshape", shape, value, Op::Reshape(ix), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let (rows, cols) = rows_cols(&self.nodes[ix].shape, "slice_cols")?;
        if start + width > cols {
            return Err(shape_err("slice_cols", format!("columns {start}..{} of {cols}", start + width)));
        }
        let xs = &self.nodes[ix].value;
        let out = (0..rows).flat_map(|r| xs[r * cols + start..r * cols + start + width].iter().copied()).collect();
        let ng = self.ng(ix);
        self.push("slice_cols", vec![rows, width], out, Op::SliceCols { x: ix, start, width }, ng)
    }

    /// Rows `start..start+len` of a tensor whose leading axis is the batch.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let shape = &self.nodes[ix].shape;
        if shape.is_empty() || start + len > shape[0] {
            return Err(shape_err("slice_rows", format!("rows {start}..{} of {shape:?}", start + len)));
        }
        let row: usize = shape[1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[0] = len;
        let out = self.nodes[ix].value[start * row..(start + len) * row].to_vec();
        let ng = self.ng(ix);
        self.push("slice_rows", out_shape, out, Op::SliceRows { x: ix, start }, ng)
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let ids = xs.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>>>()?;
        let first = ids.first().ok_or_else(|| NnError::Contract("concat_rows of nothing".into()))?;
        let tail = self.nodes[*first].shape[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &i in &ids {
            if self.nodes[i].shape[1..] != tail[..] {
                return Err(shape_err("concat_rows", format!("{:?} vs trailing {tail:?}", self.nodes[i].shape)));
            }
            rows += self.nodes[i].shape[0];
            out.extend_from_slice(&self.nodes[i].value);
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let ng = ids.iter().any(|&i| self.ng(i));
        self.push("concat_rows", shape, out, Op::ConcatRows(ids), ng)
    }

    fn row_softmax(xs: &[f64], cols: usize) -> Vec<f64> {
        let mut out = vec![0.0; xs.len()];
        for (row, o) in xs.chunks(cols).zip(out.chunks_mut(cols)) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (oj, &v) in o.iter_mut().zip(row) {
                *oj = (v - m).exp();
                z += *oj;
            }
            o.iter_mut().for_each(|v| *v /= z);
        }
        out
    }

    fn row_log_softmax(xs: &[f64], cols: usize) -> Vec<f64> {
        let mut out = vec![0.0; xs.len()];
        for (row, o) in xs.chunks(cols).zip(out.chunks_mut(cols)) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            o.iter_mut().zip(row).for_each(|(oj, v)| *oj = v - lse);
        }
        out
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let (rows, cols) = rows_cols(&self.nodes[ix].shape, "softmax")?;
        if cols == 0 {
            return Err(shape_err("softmax", "zero classes".into()));
        }
        let out = Self::row_softmax(&self.nodes[ix].value, cols);
        let ng = self.ng(ix);
        self.push("softmax", vec![rows, cols], out, Op::Softmax(ix), ng)
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let (rows, cols) = rows_cols(&self.nodes[ix].shape, "log_softmax")?;
        if cols == 0 {
            return Err(shape_err("log_softmax", "zero classes".into()));
        }
        let out = Self::row_log_softmax(&self.nodes[ix].value, cols);
        let ng = self.ng(ix);
        self.push("log_softmax", vec![rows, cols], out, Op::LogSoftmax(ix), ng)
    }

    /// Entropy of the softmax distribution of each row of logits, shape `[rows, 1]`.
    pub fn softmax_entropy(&mut self, logits: Var) -> Result<Var> {
        let ix = self.idx(logits)?;
        let (rows, cols) = rows_cols(&self.nodes[ix].shape, "softmax_entropy")?;
        let lp = Self::row_log_softmax(&self.nodes[ix].value, cols);
        let out = lp.chunks(cols).map(|r| -r.iter().map(|l| l.exp() * l).sum::<f64>()).collect();
        let ng = self.ng(ix);
        self.push("softmax_entropy", vec![rows, 1], out, Op::SoftmaxEntropy(ix), ng)
    }

    /// Selects column `idx[r]` from every row `r`, shape `[rows, 1]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let ix = self.idx(x)?;
        let (rows, cols) = rows_cols(&self.nodes[ix].shape, "pick")?;
        if idx.len() != rows || idx.iter().any(|&j| j >= cols) {
            return Err(shape_err("pick", format!("{} indices into [{rows}, {cols}]", idx.len())));
        }
        let xs = &self.nodes[ix].value;
        let out = idx.iter().enumerate().map(|(r, &j)| xs[r * cols + j]).collect();
        let ng = self.ng(ix);
        self.push("pick", vec![rows, 1], out, Op::Pick { x: ix, idx: idx.to_vec() }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let s = self.nodes[ix].value.iter().sum();
        let ng = self.ng(ix);
        self.push("sum", vec![1], vec![s], Op::Sum(ix), ng)
    }

    /// `sum_i x_i * w_i` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let ix = self.idx(x)?;
        if weights.len() != self.nodes[ix].value.len() {
            return Err(shape_err("weighted_sum", format!("{} weights for {} values", weights.len(), self.nodes[ix].value.len())));
        }
        let s = self.nodes[ix].value.iter().zip(weights).map(|(a, b)| a * b).sum();
        let ng = self.ng(ix);
        self.push("weighted_sum", vec![1], vec![s], Op::WeightedSum { x: ix, weights: weights.to_vec() }, ng)
    }

    /// Summed Gaussian negative log-likelihood of `target` under mean `v` and variance `nu`.
    pub fn gaussian_nll(&mut self, v: Var, nu: Var, target: &[f64]) -> Result<Var> {
        let (iv, inu) = (self.idx(v)?, self.idx(nu)?);
        let (vs, ns) = (&self.nodes[iv].value, &self.nodes[inu].value);
        if vs.len() != ns.len() || vs.len() != target.len() {
            return Err(shape_err("gaussian_nll", format!("{} means, {} variances, {} targets", vs.len(), ns.len(), target.len())));
        }
        if let Some(bad) = ns.iter().find(|n| !(**n > 0.0)) {
            return Err(NnError::Contract(format!("gaussian_nll: variance must be positive, got {bad}")));
        }
        let s = vs
            .iter()
            .zip(ns)
            .zip(target)
            .map(|((&m, &n), &r)| 0.5 * (2.0 * std::f64::consts::PI * n).ln() + (m - r) * (m - r) / (2.0 * n))
            .sum();
        let ng = self.ng(iv) || self.ng(inu);
        self.push("gaussian_nll", vec![1], vec![s], Op::GaussianNll { v: iv, nu: inu, target: target.to_vec() }, ng)
    }

    /// `sum_i (v_i - target_i)^2 / 2`.
    pub fn half_squared_error(&mut self, v: Var, target: &[f64]) -> Result<Var> {
        let iv = self.idx(v)?;
        let vs = &self.nodes[iv].value;
        if vs.len() != target.len() {
            return Err(shape_err("half_squared_error", format!("{} values, {} targets", vs.len(), target.len())));
        }
        let s = vs.iter().zip(target).map(|(&m, &r)| 0.5 * (m - r) * (m - r)).sum();
        let ng = self.ng(iv);
        self.push("half_squared_error", vec![1], vec![s], Op::HalfSquaredError { v: iv, target: target.to_vec() }, ng)
    }

    /// Reverse pass from a scalar. The tape is left intact, so calling this
    /// twice gives identical results.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let li = self.idx(loss)?;
        if self.nodes[li].value.len() != 1 {
            return Err(NnError::Contract(format!("backward needs a scalar loss, got shape {:?}", self.nodes[li].shape)));
        }
        if !self.nodes[li].needs_grad {
            return Err(NnError::Contract("backward on a value with no recorded dependence on parameters".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[li] = Some(vec![1.0]);
        for i in (0..=li).rev() {
            let Some(dy) = grads[i].take() else { continue };
            self.backprop_node(i, &dy, &mut grads)?;
            grads[i] = Some(dy);
        }
        if grads.iter().flatten().any(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(NnError::NonFinite { op: "backward" });
        }
        Ok(Gradients { graph: self.id, grads, params: self.param_nodes.clone() })
    }

    /// Runs [`Graph::backward`] and accumulates parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        self.backward(loss)?.accumulate_into(store)
    }

    fn backprop_node(&self, i: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        let ng = |j: usize| self.nodes[j].needs_grad;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let n = self.nodes[b].shape[1];
                if ng(a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, dy, false, val(b), true, &mut da, 0.0);
                    add_into(&mut grads[a], &da);
                }
                if ng(b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, val(a), true, dy, false, &mut db, 0.0);
                    add_into(&mut grads[b], &db);
                }
            }
            &Op::AddBias(x, b) => {
                if ng(x) {
                    add_into(&mut grads[x], dy);
                }
                if ng(b) {
                    let n = self.nodes[b].value.len();
                    let mut db = vec![0.0; n];
                    for row in dy.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                    add_into(&mut grads[b], &db);
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let (patch, spatial) = (geom.patch(), geom.out_spatial());
                let per_out = geom.oc * spatial;
                if ng(*b) {
                    let mut db = vec![0.0; geom.oc];
                    for s in 0..geom.n {
                        for (ch, d) in db.iter_mut().enumerate() {
                            *d += dy[s * per_out + ch * spatial..s * per_out + (ch + 1) * spatial].iter().sum::<f64>();
                        }
                    }
                    add_into(&mut grads[*b], &db);
                }
                if ng(*w) {
                    let mut dw = vec![0.0; geom.oc * patch];
                    for s in 0..geom.n {
                        let col = &cols[s * patch * spatial..(s + 1) * patch * spatial];
                        gemm(geom.oc, spatial, patch, &dy[s * per_out..(s + 1) * per_out], false, col, true, &mut dw, 1.0);
                    }
                    add_into(&mut grads[*w], &dw);
                }
                if ng(*x) {
                    let in_per = geom.c * geom.h * geom.w;
                    let mut dx = vec![0.0; geom.n * in_per];
                    let mut dcol = vec![0.0; patch * spatial];
                    for s in 0..geom.n {
                        gemm(patch, geom.oc, spatial, val(*w), true, &dy[s * per_out..(s + 1) * per_out], false, &mut dcol, 0.0);
                        col2im(&dcol, geom, &mut dx[s * in_per..(s + 1) * in_per]);
                    }
                    add_into(&mut grads[*x], &dx);
                }
            }
            Op::BatchNorm { x, gamma, beta, channels, inner, xhat, inv_std, train, per_sample } => {
                let (channels, inner) = (*channels, *inner);
                let batch = self.nodes[*x].shape[0];
                let (groups, group_len) = if *per_sample { (batch, 1) } else { (1, batch) };
                let count = (group_len * inner) as f64;
                let gv = val(*gamma);
                let at = |n: usize, c: usize| (n * channels + c) * inner;
                let mut dgamma = vec![0.0; channels];
                let mut dbeta = vec![0.0; channels];
                let mut dx = vec![0.0; dy.len()];
                for c in 0..channels {
                    for grp in 0..groups {
                        let samples = grp * group_len..(grp + 1) * group_len;
                        let (mut sdy, mut sdyx) = (0.0, 0.0);
                        for n in samples.clone() {
                            for j in at(n, c)..at(n, c) + inner {
                                sdy += dy[j];
                                sdyx += dy[j] * xhat[j];
                            }
                        }
                        dgamma[c] += sdyx;
                        dbeta[c] += sdy;
                        let (g, is) = (gv[c], inv_std[grp * channels + c]);
                        for n in samples {
                            for j in at(n, c)..at(n, c) + inner {
                                dx[j] = if *train {
                                    g * is / count * (count * dy[j] - sdy - xhat[j] * sdyx)
                                } else {
                                    g * is * dy[j]
                                };
                            }
                        }
                    }
                }
                if ng(*x) {
                    add_into(&mut grads[*x], &dx);
                }
                if ng(*gamma) {
                    add_into(&mut grads[*gamma], &dgamma);
                }
                if ng(*beta) {
                    add_into(&mut grads[*beta], &dbeta);
                }
            }
            &Op::Relu(x) => {
                let d: Vec<f64> = dy.iter().zip(val(x)).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect();
                add_into(&mut grads[x], &d);
            }
            &Op::Sigmoid(x) => {
                let d: Vec<f64> = dy.iter().zip(&node.value).map(|(g, s)| g * s * (1.0 - s)).collect();
                add_into(&mut grads[x], &d);
            }
            &Op::Tanh(x) => {
                let d: Vec<f64> = dy.iter().zip(&node.value).map(|(g, t)| g * (1.0 - t * t)).collect();
                add_into(&mut grads[x], &d);
            }
            &Op::Exp(x) => {
                let d: Vec<f64> = dy.iter().zip(&node.value).map(|(g, e)| g * e).collect();
                add_into(&mut grads[x], &d);
            }
            &Op::Ln(x) => {
                let d: Vec<f64> = dy.iter().zip(val(x)).map(|(g, v)| g / v).collect();
                add_into(&mut grads[x], &d);
            }
            &Op::Add(a, b) => {
                if ng(a) {
                    add_into(&mut grads[a], dy);
                }
                if ng(b) {
                    add_into(&mut grads[b], dy);
                }
            }
            &Op::Sub(a, b) => {
                if ng(a) {
                    add_into(&mut grads[a], dy);
                }
                if ng(b) {
                    let d: Vec<f64> = dy.iter().map(|g| -g).collect();
                    add_into(&mut grads[b], &d);
                }
            }
            &Op::Mul(a, b) => {
                if ng(a) {
                    let d: Vec<f64> = dy.iter().zip(val(b)).map(|(g, y)| g * y).collect();
                    add_into(&mut grads[a], &d);
                }
                if ng(b) {
                    let d: Vec<f64> = dy.iter().zip(val(a)).map(|(g, x)| g * x).collect();
                    add_into(&mut grads[b], &d);
                }
            }
            &Op::Scale(x, c) => {
                let d: Vec<f64> = dy.iter().map(|g| g * c).collect();
                add_into(&mut grads[x], &d);
            }
            &Op::AddScalar(x) | &Op::Reshape(x) => add_into(&mut grads[x], dy),
            &Op::Attention { f, g, channels, spatial } => {
                let (fv, gv) = (val(f), val(g));
                let n = fv.len() / spatial;
                if ng(g) {
                    let mut dg = vec![0.0; gv.len()];
                    for b in 0..n {
                        for c in 0..channels {
                            let base = (b * channels + c) * spatial;
                            for s in 0..spatial {
                                dg[base + s] = dy[base + s] * (1.0 + fv[b * spatial + s]);
                            }
                        }
                    }
                    add_into(&mut grads[g], &dg);
                }
                if ng(f) {
                    let mut df = vec![0.0; fv.len()];
                    for b in 0..n {
                        for c in 0..channels {
                            let base = (b * channels + c) * spatial;
                            for s in 0..spatial {
                                df[b * spatial + s] += dy[base + s] * gv[base + s];
                            }
                        }
                    }
                    add_into(&mut grads[f], &df);
                }
            }
            Op::GlobalMaxPool { x, argmax } => {
                let mut d = vec![0.0; self.nodes[*x].value.len()];
                for (g, &j) in dy.iter().zip(argmax) {
                    d[j] += g;
                }
                add_into(&mut grads[*x], &d);
            }
            &Op::GlobalAvgPool { x, spatial } => {
                let d: Vec<f64> = dy.iter().flat_map(|g| std::iter::repeat_n(g / spatial as f64, spatial)).collect();
                add_into(&mut grads[x], &d);
            }
            &Op::Clamp { x, lo, hi } => {
                let d: Vec<f64> = dy.iter().zip(val(x)).map(|(g, &v)| if (lo..=hi).contains(&v) { *g } else { 0.0 }).collect();
                add_into(&mut grads[x], &d);
            }
            &Op::SliceCols { x, start, width } => {
                let cols = self.nodes[x].shape[1];
                let mut d = vec![0.0; self.nodes[x].value.len()];
                for (r, row) in dy.chunks(width).enumerate() {
                    d[r * cols + start..r * cols + start + width].copy_from_slice(row);
                }
                add_into(&mut grads[x], &d);
            }
            &Op::SliceRows { x, start } => {
                let mut d = vec![0.0; self.nodes[x].value.len()];
                d[start * dy.len() / node.shape[0].max(1)..][..dy.len()].copy_from_slice(dy);
                add_into(&mut grads[x], &d);
            }
            Op::ConcatRows(ids) => {
                let mut off = 0;
                for &j in ids {
                    let len = self.nodes[j].value.len();
                    if ng(j) {
                        add_into(&mut grads[j], &dy[off..off + len]);
                    }
                    off += len;
                }
            }
            &Op::Softmax(x) => {
                let cols = node.shape[1];
                let mut d = vec![0.0; dy.len()];
                for ((s, g), o) in node.value.chunks(cols).zip(dy.chunks(cols)).zip(d.chunks_mut(cols)) {
                    let dot: f64 = s.iter().zip(g).map(|(a, b)| a * b).sum();
                    o.iter_mut().zip(s.iter().zip(g)).for_each(|(o, (s, g))| *o = s * (g - dot));
                }
                add_into(&mut grads[x], &d);
            }
            &Op::LogSoftmax(x) => {
                let cols = node.shape[1];
                let mut d = vec![0.0; dy.len()];
                for ((lp, g), o) in node.value.chunks(cols).zip(dy.chunks(cols)).zip(d.chunks_mut(cols)) {
                    let total: f64 = g.iter().sum();
                    o.iter_mut().zip(lp.iter().zip(g)).for_each(|(o, (l, g))| *o = g - l.exp() * total);
                }
                add_into(&mut grads[x], &d);
            }
            &Op::SoftmaxEntropy(x) => {
                let cols = self.nodes[x].shape[1];
                let lp = Self::row_log_softmax(val(x), cols);
                let mut d = vec![0.0; lp.len()];
                for (r, (row, o)) in lp.chunks(cols).zip(d.chunks_mut(cols)).enumerate() {
                    let h = node.value[r];
                    o.iter_mut().zip(row).for_each(|(o, l)| *o = -dy[r] * l.exp() * (l + h));
                }
                add_into(&mut grads[x], &d);
            }
            Op::Pick { x, idx } => {
                let cols = self.nodes[*x].shape[1];
                let mut d = vec![0.0; self.nodes[*x].value.len()];
                for (r, &j) in idx.iter().enumerate() {
                    d[r * cols + j] = dy[r];
                }
                add_into(&mut grads[*x], &d);
            }
            &Op::Sum(x) => {
                let d = vec![dy[0]; self.nodes[x].value.len()];
                add_into(&mut grads[x], &d);
            }
            Op::WeightedSum { x, weights } => {
                let d: Vec<f64> = weights.iter().map(|w| w * dy[0]).collect();
                add_into(&mut grads[*x], &d);
            }
            Op::GaussianNll { v, nu, target } => {
                let (vs, ns) = (val(*v), val(*nu));
                if ng(*v) {
                    let d: Vec<f64> = vs.iter().zip(ns).zip(target).map(|((m, n), r)| dy[0] * (m - r) / n).collect();
                    add_into(&mut grads[*v], &d);
                }
                if ng(*nu) {
                    let d: Vec<f64> = vs
                        .iter()
                        .zip(ns)
                        .zip(target)
                        .map(|((m, n), r)| dy[0] * (0.5 / n - (m - r) * (m - r) / (2.0 * n * n)))
                        .collect();
                    add_into(&mut grads[*nu], &d);
                }
            }
            Op::HalfSquaredError { v, target } => {
                let d: Vec<f64> = val(*v).iter().zip(target).map(|(m, r)| dy[0] * (m - r)).collect();
                add_into(&mut grads[*v], &d);
            }
        }
        Ok(())
    }
}

fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let spatial = g.out_spatial();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * spatial..(row + 1) * spatial];
                for oi in 0..g.oh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    for oj in 0..g.ow {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        dst[oi * g.ow + oj] = if ii >= 0 && jj >= 0 && (ii as usize) < g.h && (jj as usize) < g.w {
                            x[(c * g.h + ii as usize) * g.w + jj as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let spatial = g.out_spatial();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * spatial..(row + 1) * spatial];
                for oi in 0..g.oh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii as usize >= g.h {
                        continue;
                    }
                    for oj in 0..g.ow {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && (jj as usize) < g.w {
                            dx[(c * g.h + ii as usize) * g.w + jj as usize] += src[oi * g.ow + oj];
                        }
                    }
                }
            }
        }
    }
}

/// Node gradients from one reverse pass.
pub struct Gradients {
    graph: u64,
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get(v.idx).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.iter().find(|(p, _)| *p == id).and_then(|&(_, i)| self.grads[i].as_deref())
    }

    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for &(id, i) in &self.params {
            if let Some(g) = &self.grads[i] {
                store.get_mut(id).accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}
