//! n-step returns, advantages and the composite actor-critic objective.
//!
//! The critic is trained either by squared error or by the Gaussian negative
//! log-likelihood `½ ln(2πν) + (V − R)² / (2ν)`, which divides the residual by
//! the predicted variance so noisy targets move `V` less.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Graph, NnError, Var};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("trajectory contract violated: {0}")]
    Trajectory(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T, E = LossError> = std::result::Result<T, E>;

/// One rollout of at most `k` steps.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub actions: Vec<usize>,
    /// Observed (possibly noisy) rewards `r_t .. r_{t+n-1}`.
    pub rewards: Vec<f64>,
    /// Critic values `V(s_t) .. V(s_{t+n-1})`, treated as constants.
    pub values: Vec<f64>,
    pub terminal: bool,
    /// `V(s_{t+n})`, exactly 0 when terminal.
    pub bootstrap: f64,
}

impl Trajectory {
    pub fn new(actions: Vec<usize>, rewards: Vec<f64>, values: Vec<f64>, terminal: bool, bootstrap: f64) -> Result<Self> {
        let t = Self { actions, rewards, values, terminal, bootstrap };
        t.check()?;
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    fn check(&self) -> Result<()> {
        let n = self.rewards.len();
        if n == 0 {
            return Err(LossError::Trajectory("empty trajectory".into()));
        }
        if self.actions.len() != n || self.values.len() != n {
            return Err(LossError::Trajectory(format!(
                "{} rewards, {} actions, {} values",
                n,
                self.actions.len(),
                self.values.len()
            )));
        }
        if self.terminal && self.bootstrap != 0.0 {
            return Err(LossError::Trajectory(format!("terminal rollout bootstraps from {}", self.bootstrap)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub value_weight: f64,
    pub entropy_beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { value_weight: 0.5, entropy_beta: 0.01 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueLoss {
    GaussianNll,
    SquaredError,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub policy_loss: f64,
    pub value_nll_loss: f64,
    pub entropy_bonus: f64,
    pub total: f64,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

/// `R_t = r_t + γ R_{t+1}`, seeded with the bootstrap value.
pub fn n_step_returns(rewards: &[f64], bootstrap: f64, gamma: f64) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(LossError::Trajectory("empty trajectory".into()));
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(LossError::Trajectory(format!("discount {gamma} outside (0, 1]")));
    }
    let mut out = vec![0.0; rewards.len()];
    let mut acc = bootstrap;
    for (o, r) in out.iter_mut().zip(rewards).rev() {
        acc = r + gamma * acc;
        *o = acc;
    }
    Ok(out)
}

pub fn advantages(returns: &[f64], values: &[f64]) -> Vec<f64> {
    returns.iter().zip(values).map(|(r, v)| r - v).collect()
}

/// Per-step Gaussian negative log-likelihood of target `r` under mean `v`, variance `nu`.
pub fn gaussian_nll(v: f64, nu: f64, r: f64) -> f64 {
    0.5 * (2.0 * std::f64::consts::PI * nu).ln() + (v - r) * (v - r) / (2.0 * nu)
}

/// `(∂/∂v, ∂/∂ν)` of [`gaussian_nll`].
pub fn gaussian_nll_grad(v: f64, nu: f64, r: f64) -> (f64, f64) {
    ((v - r) / nu, 0.5 / nu - (v - r) * (v - r) / (2.0 * nu * nu))
}

/// Taped network outputs a loss is built from. Rows beyond the trajectory
/// length (a bootstrap observation) are ignored.
#[derive(Clone, Copy, Debug)]
pub struct LossInputs {
    pub logits: Var,
    pub value: Var,
    /// `None` means ν ≡ 1.
    pub nu: Option<Var>,
}

fn leading_rows(g: &mut Graph, x: Var, n: usize) -> Result<Var> {
    Ok(if g.shape(x)[0] == n { x } else { g.slice_rows(x, 0, n)? })
}

/// Value loss summed over steps.
pub fn value_loss(g: &mut Graph, value: Var, nu: Option<Var>, returns: &[f64], kind: ValueLoss) -> Result<Var> {
    let n = returns.len();
    let value = leading_rows(g, value, n)?;
    Ok(match kind {
        ValueLoss::SquaredError => g.half_squared_error(value, returns)?,
        ValueLoss::GaussianNll => {
            let nu = match nu {
                Some(nu) => leading_rows(g, nu, n)?,
                None => g.constant_from(vec![n, 1], vec![1.0; n])?,
            };
            g.gaussian_nll(value, nu, returns)?
        }
    })
}

/// `(−Σ log π(a_t|s_t)·adv_t, Σ H(π(·|s_t)))`, with advantages held constant.
pub fn policy_loss(g: &mut Graph, logits: Var, actions: &[usize], advantages: &[f64]) -> Result<(Var, Var)> {
    let n = actions.len();
    let logits = leading_rows(g, logits, n)?;
    let logp = g.log_softmax(logits)?;
    let chosen = g.pick(logp, actions)?;
    let neg_adv: Vec<f64> = advantages.iter().map(|a| -a).collect();
    let pg = g.weighted_sum(chosen, &neg_adv)?;
    let ent = g.softmax_entropy(logits)?;
    let ent = g.sum(ent)?;
    Ok((pg, ent))
}

/// `total = policy + value_weight · value − entropy_beta · entropy`.
pub fn total_loss(
    g: &mut Graph,
    inputs: LossInputs,
    traj: &Trajectory,
    gamma: f64,
    weights: LossWeights,
    kind: ValueLoss,
) -> Result<(Var, LossBreakdown)> {
    traj.check()?;
    let returns = n_step_returns(&traj.rewards, traj.bootstrap, gamma)?;
    let adv = advantages(&returns, &traj.values);
    let (pg, ent) = policy_loss(g, inputs.logits, &traj.actions, &adv)?;
    let vl = value_loss(g, inputs.value, inputs.nu, &returns, kind)?;
    let wv = g.scale(vl, weights.value_weight)?;
    let we = g.scale(ent, weights.entropy_beta)?;
    let total = g.add(pg, wv)?;
    let total = g.sub(total, we)?;
    let breakdown = LossBreakdown {
        policy_loss: g.scalar(pg),
        value_nll_loss: g.scalar(vl),
        entropy_bonus: g.scalar(ent),
        total: g.scalar(total),
        advantages: adv,
        returns,
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ParamStore, Tensor};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Explicit `Σ_{i<n} γ^i r_{t+i} + γ^n V(s_{t+n})` for every start `t`.
    fn brute_force_returns(rewards: &[f64], bootstrap: f64, gamma: f64) -> Vec<f64> {
        let n = rewards.len();
        (0..n)
            .map(|t| {
                let horizon = n - t;
                let mut s = 0.0;
                for i in 0..horizon {
                    s += gamma.powi(i as i32) * rewards[t + i];
                }
                s + gamma.powi(horizon as i32) * bootstrap
            })
            .collect()
    }

    #[test]
    fn returns_hand_cases() {
        assert_eq!(n_step_returns(&[0.0, 0.0, 0.0], 0.0, 0.99).unwrap(), vec![0.0; 3]);
        assert_eq!(n_step_returns(&[1.0, 1.0, 1.0], 2.0, 1.0).unwrap(), vec![5.0, 4.0, 3.0]);
        assert_eq!(n_step_returns(&[1.0, 0.0, 0.0, 0.0, 0.0], 0.0, 0.99).unwrap(), vec![1.0, 0.0, 0.0, 0.0, 0.0]);
        let r = n_step_returns(&[1.0, 1.0, 1.0], 2.0, 1.0).unwrap();
        assert_eq!(advantages(&r, &[0.0; 3])[0], 5.0);
        assert_eq!(advantages(&r, &r), vec![0.0; 3]);
    }

    #[test]
    fn returns_reject_bad_inputs() {
        assert!(n_step_returns(&[], 0.0, 0.9).is_err());
        assert!(n_step_returns(&[1.0], 0.0, 0.0).is_err());
        assert!(n_step_returns(&[1.0], 0.0, 1.5).is_err());
        assert!(Trajectory::new(vec![0], vec![1.0], vec![0.0], true, 0.5).is_err());
        assert!(Trajectory::new(vec![], vec![], vec![], true, 0.0).is_err());
    }

    #[test]
    fn returns_match_explicit_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let n = rng.random_range(1..=5);
            let gamma = [0.9, 0.99, 1.0][rng.random_range(0..3)];
            let rewards: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let boot = if rng.random_bool(0.3) { 0.0 } else { rng.random_range(-3.0..3.0) };
            let fast = n_step_returns(&rewards, boot, gamma).unwrap();
            let slow = brute_force_returns(&rewards, boot, gamma);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn nll_closed_forms() {
        let nu0 = 1.0 / (2.0 * std::f64::consts::PI);
        assert!(gaussian_nll(0.3, nu0, 0.3).abs() < 1e-15);
        let (v, r) = (0.7, -0.4);
        let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((gaussian_nll(v, 1.0, r) - (half_ln_2pi + 0.5 * (v - r) * (v - r))).abs() < 1e-15);
        assert_eq!(gaussian_nll_grad(v, 1.0, r).0, v - r);
        // stationary in ν at the squared residual
        assert!(gaussian_nll_grad(v, (v - r) * (v - r), r).1.abs() < 1e-15);
    }

    #[test]
    fn nll_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-6;
        for _ in 0..200 {
            let v = rng.random_range(-2.0..2.0);
            let r = rng.random_range(-2.0..2.0);
            let nu = rng.random_range(0.05..3.0);
            let (dv, dnu) = gaussian_nll_grad(v, nu, r);
            let ndv = (gaussian_nll(v + h, nu, r) - gaussian_nll(v - h, nu, r)) / (2.0 * h);
            let ndnu = (gaussian_nll(v, nu + h, r) - gaussian_nll(v, nu - h, r)) / (2.0 * h);
            assert!((dv - ndv).abs() <= 1e-6 * dv.abs().max(1.0));
            assert!((dnu - ndnu).abs() <= 1e-6 * dnu.abs().max(1.0));
        }
    }

    #[test]
    fn nll_minimized_at_squared_residual() {
        let (v, r) = (1.3, 0.9);
        let star = (v - r) * (v - r);
        let grid: Vec<f64> = (1..4000).map(|i| i as f64 * 1e-4).collect();
        let best = grid.iter().copied().min_by(|a, b| gaussian_nll(v, *a, r).total_cmp(&gaussian_nll(v, *b, r))).unwrap();
        assert!((best - star).abs() <= 1e-4, "{best} vs {star}");
    }

    #[test]
    fn graph_nll_matches_scalar_formulas() {
        let mut store = ParamStore::new();
        let v = store.register("v", Tensor::new(vec![2, 1], vec![0.2, -1.0]).unwrap()).unwrap();
        let nu = store.register("nu", Tensor::new(vec![2, 1], vec![0.5, 2.0]).unwrap()).unwrap();
        let r = [1.0, 0.5];
        let mut g = Graph::new();
        let (vv, nv) = (g.param(&store, v).unwrap(), g.param(&store, nu).unwrap());
        let loss = value_loss(&mut g, vv, Some(nv), &r, ValueLoss::GaussianNll).unwrap();
        let grads = g.backward(loss).unwrap();
        let expect = gaussian_nll(0.2, 0.5, 1.0) + gaussian_nll(-1.0, 2.0, 0.5);
        assert!((g.scalar(loss) - expect).abs() < 1e-14);
        assert_eq!(grads.param(v).unwrap()[1], gaussian_nll_grad(-1.0, 2.0, 0.5).0);
        assert_eq!(grads.param(nu).unwrap()[0], gaussian_nll_grad(0.2, 0.5, 1.0).1);

        let mut g = Graph::new();
        let nv = g.constant_from(vec![2, 1], vec![0.0, 1.0]).unwrap();
        let vv = g.param(&store, v).unwrap();
        assert!(matches!(value_loss(&mut g, vv, Some(nv), &r, ValueLoss::GaussianNll), Err(LossError::Nn(NnError::Contract(_)))));
    }

    #[test]
    fn zero_advantage_and_beta_give_zero_policy_loss() {
        let mut store = ParamStore::new();
        let z = store.register("z", Tensor::new(vec![2, 3], vec![0.1, 0.5, -0.2, 1.0, 0.0, 0.3]).unwrap()).unwrap();
        let mut g = Graph::new();
        let zv = g.param(&store, z).unwrap();
        let (pg, _) = policy_loss(&mut g, zv, &[0, 2], &[0.0, 0.0]).unwrap();
        assert_eq!(g.scalar(pg), 0.0);
        let grads = g.backward(pg).unwrap();
        assert!(grads.param(z).unwrap().iter().all(|d| *d == 0.0));
    }

    #[test]
    fn uniform_policy_has_log_n_entropy() {
        let mut g = Graph::new();
        let z = g.constant_from(vec![3, 4], vec![0.7; 12]).unwrap();
        let (_, ent) = policy_loss(&mut g, z, &[0, 1, 2], &[1.0; 3]).unwrap();
        assert!((g.scalar(ent) - 3.0 * 4f64.ln()).abs() < 1e-12);
        let d = g.constant_from(vec![1, 3], vec![0.0, 800.0, 0.0]).unwrap();
        let (_, ent) = policy_loss(&mut g, d, &[1], &[1.0]).unwrap();
        assert!(g.scalar(ent).abs() < 1e-12);
    }

    #[test]
    fn chosen_logit_gradient_is_minus_one_minus_pi() {
        let mut store = ParamStore::new();
        let logits = [0.3, -0.5, 1.1];
        let z = store.register("z", Tensor::new(vec![1, 3], logits.to_vec()).unwrap()).unwrap();
        let mut g = Graph::new();
        let zv = g.param(&store, z).unwrap();
        let (pg, _) = policy_loss(&mut g, zv, &[2], &[1.0]).unwrap();
        let grads = g.backward(pg).unwrap();
        let zsum: f64 = logits.iter().map(|l| l.exp()).sum();
        let pi = logits[2].exp() / zsum;
        assert!((grads.param(z).unwrap()[2] + (1.0 - pi)).abs() < 1e-15);
    }

    fn toy_total(kind: ValueLoss, nu: Option<f64>, weights: LossWeights) -> (f64, Vec<f64>, Vec<f64>) {
        let mut store = ParamStore::new();
        let z = store.register("z", Tensor::new(vec![3, 2], vec![0.1, -0.3, 0.4, 0.2, 0.0, 0.9]).unwrap()).unwrap();
        let v = store.register("v", Tensor::new(vec![3, 1], vec![0.2, 0.5, -0.1]).unwrap()).unwrap();
        let traj = Trajectory::new(vec![1, 0, 1], vec![0.0, 1.0, 0.3], vec![0.2, 0.5, -0.1], false, 0.4).unwrap();
        let mut g = Graph::new();
        let (zv, vv) = (g.param(&store, z).unwrap(), g.param(&store, v).unwrap());
        let nu = nu.map(|n| g.constant_from(vec![3, 1], vec![n; 3]).unwrap());
        let (total, b) = total_loss(&mut g, LossInputs { logits: zv, value: vv, nu }, &traj, 0.99, weights, kind).unwrap();
        assert_eq!(b.total, b.policy_loss + weights.value_weight * b.value_nll_loss - weights.entropy_beta * b.entropy_bonus);
        let grads = g.backward(total).unwrap();
        (g.scalar(total), grads.param(z).unwrap().to_vec(), grads.param(v).unwrap().to_vec())
    }

    #[test]
    fn unit_variance_nll_matches_squared_error_gradients() {
        let w = LossWeights::default();
        let (_, dz_a, dv_a) = toy_total(ValueLoss::SquaredError, None, w);
        let (_, dz_b, dv_b) = toy_total(ValueLoss::GaussianNll, None, w);
        let (_, dz_c, dv_c) = toy_total(ValueLoss::GaussianNll, Some(1.0), w);
        assert_eq!(dv_a, dv_b);
        assert_eq!(dv_a, dv_c);
        assert_eq!(dz_a, dz_b);
        assert_eq!(dz_a, dz_c);
    }

    #[test]
    fn zero_value_weight_cuts_value_gradient() {
        let (_, _, dv) = toy_total(ValueLoss::GaussianNll, Some(0.3), LossWeights { value_weight: 0.0, entropy_beta: 0.01 });
        assert!(dv.iter().all(|d| *d == 0.0));
    }

    proptest! {
        #[test]
        fn residual_weight_falls_with_variance(res in 0.01f64..5.0, nu in 0.01f64..10.0, k in 1.01f64..10.0) {
            let g1 = gaussian_nll_grad(res, nu, 0.0).0.abs();
            let g2 = gaussian_nll_grad(res, nu * k, 0.0).0.abs();
            prop_assert!(g2 < g1);
            prop_assert!((g1 - res / nu).abs() <= 1e-12 * g1.max(1.0));
        }

        #[test]
        fn returns_recursion_equals_explicit_sum(
            rewards in proptest::collection::vec(-3.0f64..3.0, 1..8),
            boot in -3.0f64..3.0,
            gamma in 0.01f64..=1.0,
        ) {
            let fast = n_step_returns(&rewards, boot, gamma).unwrap();
            let slow = brute_force_returns(&rewards, boot, gamma);
            for (a, b) in fast.iter().zip(&slow) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
