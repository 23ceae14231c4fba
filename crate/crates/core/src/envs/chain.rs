use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EnvError, Game, Result};

const ROW_TOL: f64 = 1e-9;
const MAX_SWEEPS: usize = 1_000_000;

/// Finite MDP with dense `P[s][a][s']` and mean rewards `R[s][a]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainMdp {
    transitions: Vec<Vec<Vec<f64>>>,
    rewards: Vec<Vec<f64>>,
    gamma: f64,
}

impl ChainMdp {
    pub fn new(transitions: Vec<Vec<Vec<f64>>>, rewards: Vec<Vec<f64>>, gamma: f64) -> Result<Self> {
        let n = transitions.len();
        if n == 0 {
            return Err(EnvError::Contract("an MDP needs at least one state".into()));
        }
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(EnvError::Contract(format!("gamma must lie in (0, 1], got {gamma}")));
        }
        if rewards.len() != n {
            return Err(EnvError::Contract(format!("{} reward rows for {n} states", rewards.len())));
        }
        let actions = transitions[0].len();
        if actions == 0 {
            return Err(EnvError::Contract("an MDP needs at least one action".into()));
        }
        for (s, (rows, r)) in transitions.iter().zip(&rewards).enumerate() {
            if rows.len() != actions || r.len() != actions {
                return Err(EnvError::Contract(format!("state {s} does not have {actions} actions")));
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(EnvError::Contract(format!("state {s} has a non-finite reward")));
            }
            for (a, row) in rows.iter().enumerate() {
                let sum: f64 = row.iter().sum();
                if row.len() != n || row.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > ROW_TOL {
                    return Err(EnvError::Contract(format!(
                        "transition row P[{s}][{a}] is not a distribution over {n} states"
                    )));
                }
            }
        }
        Ok(Self { transitions, rewards, gamma })
    }

    /// `s0 -> s1` paying `reward`, then `s1` absorbs with reward 0.
    pub fn two_state(reward: f64, gamma: f64) -> Result<Self> {
        Self::chain(2, 1, reward, gamma)
    }

    /// Deterministic line of `len` states where every action advances one state;
    /// entering the last, absorbing state pays `reward`.
    pub fn chain(len: usize, actions: usize, reward: f64, gamma: f64) -> Result<Self> {
        if len < 2 || actions == 0 {
            return Err(EnvError::Config("a chain needs at least 2 states and 1 action".into()));
        }
        let mut transitions = vec![vec![vec![0.0; len]; actions]; len];
        let mut rewards = vec![vec![0.0; actions]; len];
        for s in 0..len {
            let next = (s + 1).min(len - 1);
            for a in 0..actions {
                transitions[s][a][next] = 1.0;
                if s + 2 == len {
                    rewards[s][a] = reward;
                }
            }
        }
        Self::new(transitions, rewards, gamma)
    }

    pub fn num_states(&self) -> usize {
        self.transitions.len()
    }

    pub fn num_actions(&self) -> usize {
        self.transitions[0].len()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        &self.transitions[s][a]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.rewards[s][a]
    }

    /// Every action loops back with zero reward.
    pub fn is_absorbing(&self, s: usize) -> bool {
        (0..self.num_actions()).all(|a| self.transitions[s][a][s] == 1.0 && self.rewards[s][a] == 0.0)
    }

    fn backup(&self, values: &[f64], s: usize, a: usize) -> f64 {
        let next: f64 = self.transitions[s][a].iter().zip(values).map(|(p, v)| p * v).sum();
        self.rewards[s][a] + self.gamma * next
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValueIteration {
    pub values: Vec<f64>,
    pub policy: Vec<usize>,
    pub sweeps: usize,
}

/// Optimal state values within `tol` in sup norm, and a greedy policy with
/// ties going to the lowest action index.
pub fn value_iteration_oracle(mdp: &ChainMdp, tol: f64) -> Result<ValueIteration> {
    if !(tol > 0.0) {
        return Err(EnvError::Contract(format!("tol must be positive, got {tol}")));
    }
    let n = mdp.num_states();
    let gamma = mdp.gamma;
    let stop = if gamma < 1.0 { tol * (1.0 - gamma) / gamma } else { tol };
    let mut values = vec![0.0; n];
    let mut next = vec![0.0; n];
    for sweep in 1..=MAX_SWEEPS {
        let mut delta: f64 = 0.0;
        for s in 0..n {
            next[s] = (0..mdp.num_actions()).map(|a| mdp.backup(&values, s, a)).fold(f64::NEG_INFINITY, f64::max);
            delta = delta.max((next[s] - values[s]).abs());
        }
        std::mem::swap(&mut values, &mut next);
        if !delta.is_finite() {
            return Err(EnvError::Contract("value iteration diverged".into()));
        }
        if delta <= stop {
            let policy = (0..n)
                .map(|s| {
                    let q: Vec<f64> = (0..mdp.num_actions()).map(|a| mdp.backup(&values, s, a)).collect();
                    let best = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    q.iter().position(|v| *v == best).unwrap_or(0)
                })
                .collect();
            return Ok(ValueIteration { values, policy, sweeps: sweep });
        }
    }
    Err(EnvError::Contract(format!("value iteration did not converge in {MAX_SWEEPS} sweeps")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainConfig {
    pub length: usize,
    pub actions: usize,
    pub reward: f64,
    pub height: usize,
    pub width: usize,
    /// Ends episodes that never reach an absorbing state.
    pub step_limit: usize,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self { length: 2, actions: 2, reward: 1.0, height: 6, width: 6, step_limit: 100 }
    }
}

/// Samples a [`ChainMdp`], rendering the state as one lit pixel. Entering an
/// absorbing state ends the episode.
#[derive(Clone, Debug)]
pub struct ChainEnv {
    mdp: ChainMdp,
    start: usize,
    shape: (usize, usize),
    step_limit: usize,
    state: usize,
    steps: usize,
}

impl ChainEnv {
    pub fn new(cfg: ChainConfig) -> Result<Self> {
        let mdp = ChainMdp::chain(cfg.length, cfg.actions, cfg.reward, 1.0)?;
        Self::from_mdp(mdp, 0, (cfg.height, cfg.width), cfg.step_limit)
    }

    pub fn from_mdp(mdp: ChainMdp, start: usize, shape: (usize, usize), step_limit: usize) -> Result<Self> {
        if mdp.num_states() > shape.0 * shape.1 {
            return Err(EnvError::Config(format!(
                "{} states do not fit a {}x{} frame",
                mdp.num_states(),
                shape.0,
                shape.1
            )));
        }
        if start >= mdp.num_states() || step_limit == 0 {
            return Err(EnvError::Config("start state out of range or zero step limit".into()));
        }
        Ok(Self { mdp, start, shape, step_limit, state: start, steps: 0 })
    }

    pub fn mdp(&self) -> &ChainMdp {
        &self.mdp
    }

    pub fn state(&self) -> usize {
        self.state
    }
}

impl Game for ChainEnv {
    fn num_actions(&self) -> usize {
        self.mdp.num_actions()
    }

    fn frame_shape(&self) -> (usize, usize) {
        self.shape
    }

    fn reset(&mut self, _rng: &mut ChaCha8Rng) {
        self.state = self.start;
        self.steps = 0;
    }

    fn step(&mut self, action: usize, rng: &mut ChaCha8Rng) -> (f64, bool) {
        let r = self.mdp.reward(self.state, action);
        let row = self.mdp.transition_row(self.state, action);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut next = row.iter().rposition(|p| *p > 0.0).unwrap_or(self.state);
        for (s, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                next = s;
                break;
            }
        }
        self.state = next;
        self.steps += 1;
        (r, self.mdp.is_absorbing(next) || self.steps >= self.step_limit)
    }

    fn render(&self, frame: &mut [f64]) {
        frame.fill(0.0);
        frame[self.state] = 1.0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{EnvConfig, NoiseSpec};

    #[test]
    fn absorbing_zero_state() {
        let mdp = ChainMdp::new(vec![vec![vec![1.0]]], vec![vec![0.0]], 0.99).unwrap();
        let vi = value_iteration_oracle(&mdp, 1e-10).unwrap();
        assert_eq!(vi.values, vec![0.0]);
    }

    #[test]
    fn two_state_chain_closed_form() {
        let vi = value_iteration_oracle(&ChainMdp::two_state(1.0, 0.99).unwrap(), 1e-10).unwrap();
        assert!((vi.values[0] - 1.0).abs() < 1e-10);
        assert!(vi.values[1].abs() < 1e-10);
    }

    #[test]
    fn self_loop_geometric_series() {
        let mdp = ChainMdp::new(vec![vec![vec![1.0]]], vec![vec![1.0]], 0.9).unwrap();
        let vi = value_iteration_oracle(&mdp, 1e-10).unwrap();
        assert!((vi.values[0] - 10.0).abs() < 1e-10, "{}", vi.values[0]);
    }

    #[test]
    fn greedy_policy_prefers_larger_reward() {
        // action 1 pays 2 then absorbs; action 0 pays 1 then absorbs
        let p = vec![vec![vec![0.0, 1.0]; 2], vec![vec![0.0, 1.0]; 2]];
        let r = vec![vec![1.0, 2.0], vec![0.0, 0.0]];
        let vi = value_iteration_oracle(&ChainMdp::new(p, r, 0.9).unwrap(), 1e-12).unwrap();
        assert_eq!(vi.policy[0], 1);
        assert!((vi.values[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn stochastic_values_match_linear_solve() {
        // s0: stay w.p. 0.5 with reward 1, else absorb in s1; V0 = 1 + 0.9*0.5*V0
        let p = vec![vec![vec![0.5, 0.5]], vec![vec![0.0, 1.0]]];
        let r = vec![vec![1.0], vec![0.0]];
        let vi = value_iteration_oracle(&ChainMdp::new(p, r, 0.9).unwrap(), 1e-12).unwrap();
        assert!((vi.values[0] - 1.0 / (1.0 - 0.45)).abs() < 1e-11);
    }

    #[test]
    fn invalid_rows_are_contract_violations() {
        let bad = ChainMdp::new(vec![vec![vec![0.5, 0.4]], vec![vec![0.0, 1.0]]], vec![vec![0.0], vec![0.0]], 0.9);
        assert!(matches!(bad, Err(EnvError::Contract(_))));
        let neg = ChainMdp::new(vec![vec![vec![1.5, -0.5]], vec![vec![0.0, 1.0]]], vec![vec![0.0], vec![0.0]], 0.9);
        assert!(matches!(neg, Err(EnvError::Contract(_))));
    }

    #[test]
    fn env_follows_chain() {
        let cfg = ChainConfig { length: 4, ..Default::default() };
        let mut env = EnvConfig::Chain(cfg).build(NoiseSpec::default(), 0).unwrap();
        let obs = env.reset();
        assert_eq!(obs[0], 1.0);
        let mut rewards = Vec::new();
        loop {
            let s = env.step_traced(1).unwrap();
            rewards.push(s.true_reward);
            if s.terminal {
                break;
            }
        }
        assert_eq!(rewards, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn stochastic_env_sampling_frequencies() {
        let p = vec![vec![vec![0.0, 0.25, 0.75]], vec![vec![0.0, 1.0, 0.0]], vec![vec![0.0, 0.0, 1.0]]];
        let r = vec![vec![0.0]; 3];
        let mdp = ChainMdp::new(p, r, 0.9).unwrap();
        let mut game = ChainEnv::from_mdp(mdp, 0, (2, 2), 10).unwrap();
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
        let n = 20_000;
        let mut hits = 0;
        for _ in 0..n {
            game.reset(&mut rng);
            game.step(0, &mut rng);
            hits += (game.state() == 1) as usize;
        }
        let f = hits as f64 / n as f64;
        assert!((f - 0.25).abs() < 4.0 * (0.25 * 0.75 / n as f64).sqrt(), "{f}");
    }
}
