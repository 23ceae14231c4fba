//! Attention-branch actor-critic with an optional reward-variance head.
//!
//! ```text
//! obs ─ trunk ─ g ─┬─ value branch ─ f ── max pool ─ V
//!                  ├─ variance branch ─ m ── avg pool ─ clamp ─ exp ─ ν
//!                  └─ (1 + f) * g ─ policy conv ─ LSTM ─ dense ─ logits
//! ```
//!
//! Trunk convolutions are unpadded. Value and variance branch convolutions are
//! stride 1 with `kernel / 2` padding so that `f` lines up with `g` pixel for
//! pixel.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{BatchNorm, BnMode, Conv2d, Dense, Graph, LstmCell, LstmState, NnError, ParamStore, RunningStats, Tensor, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub actions: usize,
    pub trunk_channels: Vec<usize>,
    pub value_channels: Vec<usize>,
    pub variance_channels: Vec<usize>,
    pub policy_channels: usize,
    pub lstm_hidden: usize,
    pub kernel: usize,
    pub stride: usize,
    pub policy_padding: usize,
    pub variance_branch: bool,
    pub batchnorm: bool,
    /// Stop variance-branch gradients at the trunk.
    pub detach_variance: bool,
    /// Report ν = 1 regardless of the variance head. Turns the Gaussian NLL into
    /// a shifted squared error.
    pub freeze_nu: bool,
    pub log_var_min: f64,
    pub log_var_max: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            frames: 4,
            height: 10,
            width: 10,
            actions: 3,
            trunk_channels: vec![16, 32],
            value_channels: vec![32, 64, 1],
            variance_channels: vec![32, 64, 1],
            policy_channels: 32,
            lstm_hidden: 64,
            kernel: 3,
            stride: 1,
            policy_padding: 0,
            variance_branch: true,
            batchnorm: true,
            detach_variance: false,
            freeze_nu: false,
            log_var_min: -10.0,
            log_var_max: 10.0,
        }
    }
}

impl NetworkConfig {
    /// Full-size layout for 84×84 four-frame stacks.
    pub fn full_scale(actions: usize) -> Self {
        Self { height: 84, width: 84, actions, lstm_hidden: 256, kernel: 5, stride: 2, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.actions < 2 {
            return bad(format!("actions must be at least 2, got {}", self.actions));
        }
        if self.frames == 0 || self.trunk_channels.is_empty() || self.trunk_channels.contains(&0) {
            return bad("frames and trunk channels must be positive".into());
        }
        for (name, ch) in [("value_channels", &self.value_channels), ("variance_channels", &self.variance_channels)] {
            if ch.last() != Some(&1) || ch.contains(&0) {
                return bad(format!("{name} must be positive and end in a single-channel map, got {ch:?}"));
            }
        }
        if self.kernel % 2 == 0 || self.stride == 0 {
            return bad(format!("kernel must be odd and stride positive, got kernel {} stride {}", self.kernel, self.stride));
        }
        if self.policy_channels == 0 || self.lstm_hidden == 0 {
            return bad("policy channels and LSTM width must be positive".into());
        }
        if !(self.log_var_min.is_finite() && self.log_var_max.is_finite() && self.log_var_min < self.log_var_max) {
            return bad(format!("log-variance clamp [{}, {}] must be finite and ordered", self.log_var_min, self.log_var_max));
        }
        let (h, w) = self.feature_extent().ok_or_else(|| {
            ModelError::Config(format!("{}x{} observations do not fit the trunk convolutions", self.height, self.width))
        })?;
        if h < 2 || w < 2 {
            return bad(format!("trunk output is {h}x{w}; observations must leave at least a 2x2 feature map"));
        }
        if self.policy_extent().is_none() {
            return bad(format!("policy convolution does not fit the {h}x{w} feature map"));
        }
        Ok(())
    }

    fn conv_out(&self, extent: usize, pad: usize, stride: usize) -> Option<usize> {
        let padded = extent + 2 * pad;
        (padded >= self.kernel).then(|| (padded - self.kernel) / stride + 1)
    }

    /// Spatial extent of the trunk output `g`.
    pub fn feature_extent(&self) -> Option<(usize, usize)> {
        let mut hw = (self.height, self.width);
        for _ in &self.trunk_channels {
            hw = (self.conv_out(hw.0, 0, self.stride)?, self.conv_out(hw.1, 0, self.stride)?);
        }
        Some(hw)
    }

    fn policy_extent(&self) -> Option<(usize, usize)> {
        let (h, w) = self.feature_extent()?;
        Some((self.conv_out(h, self.policy_padding, 1)?, self.conv_out(w, self.policy_padding, 1)?))
    }

    pub fn obs_len(&self) -> usize {
        self.frames * self.height * self.width
    }
}

/// Per-worker running statistics, one entry per batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub layers: Vec<RunningStats>,
}

impl BnStats {
    /// Elementwise mean over several workers' statistics.
    pub fn average(all: &[BnStats]) -> Option<BnStats> {
        let first = all.first()?;
        let mut out = first.clone();
        for (l, layer) in out.layers.iter_mut().enumerate() {
            for c in 0..layer.mean.len() {
                layer.mean[c] = all.iter().map(|s| s.layers[l].mean[c]).sum::<f64>() / all.len() as f64;
                layer.var[c] = all.iter().map(|s| s.layers[l].var[c]).sum::<f64>() / all.len() as f64;
            }
        }
        Some(out)
    }
}

#[derive(Clone, Debug)]
struct ConvBlock {
    conv: Conv2d,
    bn: Option<(BatchNorm, usize)>,
    relu: bool,
}

impl ConvBlock {
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: BnMode, stats: &mut BnStats) -> Result<Var> {
        let mut y = self.conv.forward(g, store, x)?;
        if let Some((bn, slot)) = &self.bn {
            y = bn.forward(g, store, y, mode, &mut stats.layers[*slot])?;
        }
        if self.relu {
            y = g.relu(y)?;
        }
        Ok(y)
    }
}

/// Taped outputs of a batched forward pass over `T` consecutive observations.
pub struct ForwardPass {
    pub features: Var,
    pub value_map: Var,
    /// `[T, 1]`
    pub value: Var,
    pub variance_map: Option<Var>,
    /// Clamped log-variance `[T, 1]`, when the variance head drives ν.
    pub log_nu: Option<Var>,
    /// `[T, 1]`; `None` means ν is the constant 1.
    pub nu: Option<Var>,
    /// `[T, actions]`
    pub logits: Var,
    /// Recurrent state after each row.
    pub lstm: Vec<(Var, Var)>,
}

/// Concrete outputs for one observation.
#[derive(Clone, Debug)]
pub struct NetworkOutputs {
    pub policy_logits: Vec<f64>,
    pub value: f64,
    pub nu: f64,
    pub value_map: Tensor,
    pub variance_map: Option<Tensor>,
    pub lstm_state: LstmState,
}

#[derive(Clone, Debug)]
pub struct Network {
    cfg: NetworkConfig,
    trunk: Vec<ConvBlock>,
    value: Vec<ConvBlock>,
    variance: Vec<ConvBlock>,
    policy_conv: ConvBlock,
    lstm: LstmCell,
    head: Dense,
    bn_channels: Vec<usize>,
    policy_flat: usize,
}

impl Network {
    /// Builds the network and its parameters. Base-model parameters are drawn
    /// first, so enabling the variance branch does not change their initial values.
    pub fn new(cfg: NetworkConfig, seed: u64) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut bn_channels = Vec::new();
        let k = cfg.kernel;
        let mut block = |store: &mut ParamStore, rng: &mut ChaCha8Rng, name: String, cin, cout, stride, pad, relu| -> Result<ConvBlock> {
            let conv = Conv2d::new(store, &format!("{name}.conv"), cin, cout, k, stride, pad, rng)?;
            let bn = if cfg.batchnorm {
                bn_channels.push(cout);
                Some((BatchNorm::new(store, &format!("{name}.bn"), cout)?, bn_channels.len() - 1))
            } else {
                None
            };
            Ok(ConvBlock { conv, bn, relu })
        };

        let mut trunk = Vec::new();
        let mut cin = cfg.frames;
        for (i, &c) in cfg.trunk_channels.iter().enumerate() {
            trunk.push(block(&mut store, &mut rng, format!("trunk{i}"), cin, c, cfg.stride, 0, true)?);
            cin = c;
        }
        let g_ch = cin;
        let branch = |store: &mut ParamStore, rng: &mut ChaCha8Rng, block: &mut dyn FnMut(&mut ParamStore, &mut ChaCha8Rng, String, usize, usize, usize, usize, bool) -> Result<ConvBlock>, name: &str, chans: &[usize]| -> Result<Vec<ConvBlock>> {
            let mut out = Vec::new();
            let mut cin = g_ch;
            for (i, &c) in chans.iter().enumerate() {
                let last = i + 1 == chans.len();
                out.push(block(store, rng, format!("{name}{i}"), cin, c, 1, k / 2, !last)?);
                cin = c;
            }
            Ok(out)
        };
        let value = branch(&mut store, &mut rng, &mut block, "value", &cfg.value_channels)?;
        let policy_conv = block(&mut store, &mut rng, "policy0".into(), g_ch, cfg.policy_channels, 1, cfg.policy_padding, true)?;
        let (ph, pw) = cfg.policy_extent().expect("validated");
        let policy_flat = cfg.policy_channels * ph * pw;
        let lstm = LstmCell::new(&mut store, "policy.lstm", policy_flat, cfg.lstm_hidden, &mut rng)?;
        let head = Dense::new(&mut store, "policy.head", cfg.lstm_hidden, cfg.actions, &mut rng)?;
        let variance = if cfg.variance_branch {
            branch(&mut store, &mut rng, &mut block, "variance", &cfg.variance_channels)?
        } else {
            Vec::new()
        };
        drop(block);
        let net = Self { cfg, trunk, value, variance, policy_conv, lstm, head, bn_channels, policy_flat };
        Ok((net, store))
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn new_bn_stats(&self) -> BnStats {
        BnStats { layers: self.bn_channels.iter().map(|&c| RunningStats::new(c)).collect() }
    }

    pub fn zero_lstm(&self) -> LstmState {
        LstmState::zeros(self.cfg.lstm_hidden)
    }

    /// Trunk feature map `g` for a batch `[T, frames, h, w]`.
    pub fn feature_extract(&self, g: &mut Graph, store: &ParamStore, obs: Var, mode: BnMode, stats: &mut BnStats) -> Result<Var> {
        let mut x = obs;
        for b in &self.trunk {
            x = b.forward(g, store, x, mode, stats)?;
        }
        Ok(x)
    }

    /// Returns the single-channel map `f` and `V = max(f)`.
    pub fn value_branch(&self, g: &mut Graph, store: &ParamStore, features: Var, mode: BnMode, stats: &mut BnStats) -> Result<(Var, Var)> {
        let mut x = features;
        for b in &self.value {
            x = b.forward(g, store, x, mode, stats)?;
        }
        let v = g.global_max_pool(x)?;
        Ok((x, v))
    }

    /// Returns the variance map, the clamped log-variance and `ν = exp(log ν)`.
    pub fn variance_branch(&self, g: &mut Graph, store: &ParamStore, features: Var, mode: BnMode, stats: &mut BnStats) -> Result<(Var, Var, Var)> {
        if self.variance.is_empty() {
            return Err(ModelError::Config("variance branch is disabled".into()));
        }
        let mut x = features;
        for b in &self.variance {
            x = b.forward(g, store, x, mode, stats)?;
        }
        let pooled = g.global_avg_pool(x)?;
        let log_nu = g.clamp(pooled, self.cfg.log_var_min, self.cfg.log_var_max)?;
        let nu = g.exp(log_nu)?;
        Ok((x, log_nu, nu))
    }

    /// `g' = (1 + f) * g`
    pub fn attention_compose(&self, g: &mut Graph, f: Var, features: Var) -> Result<Var> {
        Ok(g.attention_compose(f, features)?)
    }

    /// Runs the recurrent policy over the rows of `composed` in order, starting from `state`.
    pub fn policy_branch(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        composed: Var,
        state: &LstmState,
        mode: BnMode,
        stats: &mut BnStats,
    ) -> Result<(Var, Vec<(Var, Var)>)> {
        let x = self.policy_conv.forward(g, store, composed, mode, stats)?;
        let rows = g.shape(x)[0];
        let flat = g.reshape(x, vec![rows, self.policy_flat])?;
        let mut h = g.constant(&state.h)?;
        let mut c = g.constant(&state.c)?;
        let mut states = Vec::with_capacity(rows);
        for t in 0..rows {
            let xt = g.slice_rows(flat, t, 1)?;
            (h, c) = self.lstm.step(g, store, xt, h, c)?;
            states.push((h, c));
        }
        let hs: Vec<Var> = states.iter().map(|s| s.0).collect();
        let hs = g.concat_rows(&hs)?;
        let logits = self.head.forward(g, store, hs)?;
        Ok((logits, states))
    }

    /// Full forward pass over `obs: [T, frames, h, w]`, treating rows as consecutive steps.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        obs: &Tensor,
        state: &LstmState,
        mode: BnMode,
        stats: &mut BnStats,
    ) -> Result<ForwardPass> {
        let c = &self.cfg;
        let expect = [c.frames, c.height, c.width];
        if obs.shape().len() != 4 || obs.shape()[1..] != expect || obs.shape()[0] == 0 {
            return Err(NnError::ShapeMismatch { op: "forward", detail: format!("observation batch {:?}, expected [T, {expect:?}]", obs.shape()) }.into());
        }
        let x = g.constant(obs)?;
        let features = self.feature_extract(g, store, x, mode, stats)?;
        let (value_map, value) = self.value_branch(g, store, features, mode, stats)?;
        let (variance_map, log_nu, nu) = if c.variance_branch {
            let input = if c.detach_variance { g.detach(features)? } else { features };
            let (m, l, n) = self.variance_branch(g, store, input, mode, stats)?;
            (Some(m), Some(l), Some(n))
        } else {
            (None, None, None)
        };
        let (log_nu, nu) = if c.freeze_nu { (None, None) } else { (log_nu, nu) };
        let composed = self.attention_compose(g, value_map, features)?;
        let (logits, lstm) = self.policy_branch(g, store, composed, state, mode, stats)?;
        Ok(ForwardPass { features, value_map, value, variance_map, log_nu, nu, logits, lstm })
    }

    /// Forward pass for a single observation `[frames, h, w]` with concrete outputs.
    pub fn infer(&self, store: &ParamStore, obs: &[f64], state: &LstmState, mode: BnMode, stats: &mut BnStats) -> Result<NetworkOutputs> {
        let c = &self.cfg;
        let obs = Tensor::new(vec![1, c.frames, c.height, c.width], obs.to_vec())?;
        let mut g = Graph::new();
        let out = self.forward(&mut g, store, &obs, state, mode, stats)?;
        let (h, cs) = out.lstm[0];
        Ok(NetworkOutputs {
            policy_logits: g.value(out.logits).to_vec(),
            value: g.scalar(out.value),
            nu: out.nu.map_or(1.0, |n| g.scalar(n)),
            value_map: g.tensor(out.value_map),
            variance_map: out.variance_map.map(|m| g.tensor(m)),
            lstm_state: LstmState { h: g.tensor(h), c: g.tensor(cs) },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> NetworkConfig {
        NetworkConfig {
            height: 8,
            width: 8,
            trunk_channels: vec![3, 4],
            value_channels: vec![4, 1],
            variance_channels: vec![3, 1],
            policy_channels: 2,
            lstm_hidden: 5,
            ..NetworkConfig::default()
        }
    }

    #[test]
    fn validation_rejects_bad_configs() {
        assert!(NetworkConfig::default().validate().is_ok());
        assert!(NetworkConfig::full_scale(6).validate().is_ok());
        let cases = [
            NetworkConfig { actions: 1, ..small() },
            NetworkConfig { value_channels: vec![4, 2], ..small() },
            NetworkConfig { log_var_min: 3.0, log_var_max: 3.0, ..small() },
            NetworkConfig { log_var_max: f64::INFINITY, ..small() },
            NetworkConfig { height: 5, ..small() },
            NetworkConfig { kernel: 2, ..small() },
        ];
        for c in cases {
            assert!(matches!(Network::new(c, 0), Err(ModelError::Config(_))));
        }
    }

    #[test]
    fn feature_extent_for_desk_default() {
        // two unpadded 3x3 convolutions on 10x10
        assert_eq!(NetworkConfig::default().feature_extent(), Some((6, 6)));
        let (net, store) = Network::new(NetworkConfig::default(), 1).unwrap();
        let mut stats = net.new_bn_stats();
        let mut g = Graph::new();
        let x = g.constant(&Tensor::filled(vec![2, 4, 10, 10], 0.3)).unwrap();
        let f = net.feature_extract(&mut g, &store, x, BnMode::Train, &mut stats).unwrap();
        assert_eq!(g.shape(f), &[2, 32, 6, 6]);
    }

    #[test]
    fn zero_observation_and_biases_give_zero_features() {
        let (net, mut store) = Network::new(NetworkConfig::default(), 2).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            if store.name(id).starts_with("trunk") && store.name(id).ends_with("bias") {
                store.get_mut(id).data_mut().fill(0.0);
            }
        }
        let mut stats = net.new_bn_stats();
        let mut g = Graph::new();
        let x = g.constant(&Tensor::zeros(vec![1, 4, 10, 10])).unwrap();
        let f = net.feature_extract(&mut g, &store, x, BnMode::Train, &mut stats).unwrap();
        assert!(g.value(f).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let (net, store) = Network::new(small(), 3).unwrap();
        let mut stats = net.new_bn_stats();
        let obs: Vec<f64> = (0..4 * 64).map(|i| (i % 7) as f64 / 7.0).collect();
        let a = net.infer(&store, &obs, &net.zero_lstm(), BnMode::Eval, &mut stats).unwrap();
        let b = net.infer(&store, &obs, &net.zero_lstm(), BnMode::Eval, &mut stats).unwrap();
        assert_eq!(a.policy_logits, b.policy_logits);
        assert_eq!(a.value.to_bits(), b.value.to_bits());
        assert_eq!(a.value_map, b.value_map);
    }

    #[test]
    fn value_is_max_of_value_map_and_nu_positive() {
        let (net, store) = Network::new(small(), 4).unwrap();
        let mut stats = net.new_bn_stats();
        let obs: Vec<f64> = (0..4 * 64).map(|i| ((i * 13) % 11) as f64 / 11.0).collect();
        let out = net.infer(&store, &obs, &net.zero_lstm(), BnMode::Train, &mut stats).unwrap();
        let max = out.value_map.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(out.value, max);
        let mean = out.variance_map.as_ref().unwrap().data().iter().sum::<f64>() / 36.0;
        assert!((out.nu.ln() - mean.clamp(-10.0, 10.0)).abs() < 1e-12);
        assert!(out.nu > 0.0);
    }

    #[test]
    fn disabled_variance_branch_reports_unit_nu() {
        let cfg = NetworkConfig { variance_branch: false, ..small() };
        let (net, store) = Network::new(cfg, 5).unwrap();
        assert!(store.names().iter().all(|n| !n.starts_with("variance")));
        let mut stats = net.new_bn_stats();
        let out = net.infer(&store, &vec![0.5; 256], &net.zero_lstm(), BnMode::Train, &mut stats).unwrap();
        assert_eq!(out.nu, 1.0);
        assert!(out.variance_map.is_none());
    }

    #[test]
    fn base_parameters_do_not_depend_on_variance_flag() {
        let (_, with) = Network::new(small(), 6).unwrap();
        let (_, without) = Network::new(NetworkConfig { variance_branch: false, ..small() }, 6).unwrap();
        for id in without.ids() {
            let other = with.find(without.name(id)).unwrap();
            assert_eq!(with.get(other).data(), without.get(id).data());
        }
    }

    #[test]
    fn recurrent_state_advances() {
        let (net, store) = Network::new(small(), 7).unwrap();
        let mut stats = net.new_bn_stats();
        let obs: Vec<f64> = (0..256).map(|i| (i % 5) as f64 / 5.0).collect();
        let first = net.infer(&store, &obs, &net.zero_lstm(), BnMode::Eval, &mut stats).unwrap();
        let second = net.infer(&store, &obs, &first.lstm_state, BnMode::Eval, &mut stats).unwrap();
        assert_ne!(first.lstm_state.h, second.lstm_state.h);
        assert_ne!(first.policy_logits, second.policy_logits);
    }

    #[test]
    fn zeroed_policy_head_gives_uniform_policy() {
        let (net, mut store) = Network::new(small(), 8).unwrap();
        for name in ["policy.head.weight", "policy.head.bias"] {
            let id = store.find(name).unwrap();
            store.get_mut(id).data_mut().fill(0.0);
        }
        let mut stats = net.new_bn_stats();
        let out = net.infer(&store, &vec![0.2; 256], &net.zero_lstm(), BnMode::Eval, &mut stats).unwrap();
        assert!(out.policy_logits.iter().all(|l| *l == 0.0));
    }

    #[test]
    fn huge_variance_preactivation_is_clamped() {
        let (net, mut store) = Network::new(small(), 9).unwrap();
        let beta = store.find("variance1.bn.beta").unwrap();
        store.get_mut(beta).data_mut().fill(1e6);
        let mut stats = net.new_bn_stats();
        let out = net.infer(&store, &vec![0.2; 256], &net.zero_lstm(), BnMode::Train, &mut stats).unwrap();
        assert_eq!(out.nu, 10f64.exp());
        store.get_mut(beta).data_mut().fill(0.05f64.ln());
        // with a constant input the normalized map is flat, so the pooled value is the shift
        let out = net.infer(&store, &vec![0.0; 256], &net.zero_lstm(), BnMode::Train, &mut stats).unwrap();
        assert!((out.nu - 0.05).abs() < 1e-9, "{}", out.nu);
    }
}
