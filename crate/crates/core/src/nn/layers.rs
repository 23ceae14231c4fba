use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Graph, NnError, ParamId, ParamStore, Result, Tensor, Var};

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.99;

fn uniform(rng: &mut impl Rng, shape: Vec<usize>, bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("extent matches")
}

/// Batch-norm statistics source.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    /// Normalize by the statistics of the current batch and update the running estimate.
    Train,
    /// Like `Train`, but each sample is normalized by its own statistics, as if
    /// the batch were fed one sample at a time.
    TrainPerSample,
    /// Normalize by the running estimate.
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }
}

/// `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.register(format!("{name}.weight"), uniform(rng, vec![in_dim, out_dim], bound))?;
        let bias = store.register(format!("{name}.bias"), uniform(rng, vec![out_dim], bound))?;
        Ok(Self { weight, bias, in_dim, out_dim })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        if g.shape(x).len() != 2 || g.shape(x)[1] != self.in_dim {
            return Err(NnError::ShapeMismatch {
                op: "dense",
                detail: format!("input {:?}, layer expects [_, {}]", g.shape(x), self.in_dim),
            });
        }
        let w = g.param(store, self.weight)?;
        let b = g.param(store, self.bias)?;
        let xw = g.matmul(x, w)?;
        g.add_bias(xw, b)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
        let weight = store.register(format!("{name}.weight"), uniform(rng, vec![out_ch, in_ch, kernel, kernel], bound))?;
        let bias = store.register(format!("{name}.bias"), uniform(rng, vec![out_ch], bound))?;
        Ok(Self { weight, bias, in_ch, out_ch, kernel, stride, padding })
    }

    /// Output spatial extent for an input extent, or `None` if the kernel does not fit.
    pub fn out_extent(&self, extent: usize) -> Option<usize> {
        let padded = extent + 2 * self.padding;
        (padded >= self.kernel).then(|| (padded - self.kernel) / self.stride + 1)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight)?;
        let b = g.param(store, self.bias)?;
        g.conv2d(x, w, b, self.stride, self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let gamma = store.register(format!("{name}.gamma"), Tensor::filled(vec![channels], 1.0))?;
        let beta = store.register(format!("{name}.beta"), Tensor::zeros(vec![channels]))?;
        Ok(Self { gamma, beta, channels })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: BnMode, stats: &mut RunningStats) -> Result<Var> {
        let gamma = g.param(store, self.gamma)?;
        let beta = g.param(store, self.beta)?;
        g.batch_norm(x, gamma, beta, mode, stats)
    }
}

/// Hidden and cell state of an LSTM, each `[1, hidden]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        Self { h: Tensor::zeros(vec![1, hidden]), c: Tensor::zeros(vec![1, hidden]) }
    }
}

/// LSTM cell with gate columns ordered input, forget, candidate, output.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_ih = store.register(format!("{name}.w_ih"), uniform(rng, vec![input, 4 * hidden], bound))?;
        let w_hh = store.register(format!("{name}.w_hh"), uniform(rng, vec![hidden, 4 * hidden], bound))?;
        let bias = store.register(format!("{name}.bias"), uniform(rng, vec![4 * hidden], bound))?;
        Ok(Self { w_ih, w_hh, bias, input, hidden })
    }

    /// One step for a batch: `x: [b, input]`, `h, c: [b, hidden]`. Returns `(h', c')`.
    pub fn step(&self, g: &mut Graph, store: &ParamStore, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let hs = self.hidden;
        if g.shape(h) != g.shape(c) || g.shape(h).get(1) != Some(&hs) || g.shape(x).get(1) != Some(&self.input) {
            return Err(NnError::ShapeMismatch {
                op: "lstm_step",
                detail: format!("x {:?}, h {:?}, c {:?} for input {} hidden {hs}", g.shape(x), g.shape(h), g.shape(c), self.input),
            });
        }
        let w_ih = g.param(store, self.w_ih)?;
        let w_hh = g.param(store, self.w_hh)?;
        let b = g.param(store, self.bias)?;
        let xi = g.matmul(x, w_ih)?;
        let hh = g.matmul(h, w_hh)?;
        let pre = g.add(xi, hh)?;
        let pre = g.add_bias(pre, b)?;
        let i = g.slice_cols(pre, 0, hs)?;
        let f = g.slice_cols(pre, hs, hs)?;
        let cand = g.slice_cols(pre, 2 * hs, hs)?;
        let o = g.slice_cols(pre, 3 * hs, hs)?;
        let i = g.sigmoid(i)?;
        let f = g.sigmoid(f)?;
        let cand = g.tanh(cand)?;
        let o = g.sigmoid(o)?;
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        let c_next = g.add(keep, write)?;
        let squashed = g.tanh(c_next)?;
        let h_next = g.mul(o, squashed)?;
        Ok((h_next, c_next))
    }
}
