use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ChainMdp, EnvError, Game, Result};

pub const PELLET_REWARD: f64 = 0.1;
pub const GOAL_REWARD: f64 = 1.0;
const MAX_PELLETS: usize = 12;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridLayout {
    pub agent: (usize, usize),
    pub goal: (usize, usize),
    pub pellets: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridCollectConfig {
    pub width: usize,
    pub height: usize,
    pub pellets: usize,
    pub step_limit: usize,
    /// Seeds the fixed layout when `layout` is absent.
    pub layout_seed: u64,
    pub layout: Option<GridLayout>,
}

impl Default for GridCollectConfig {
    fn default() -> Self {
        Self { width: 6, height: 6, pellets: 3, step_limit: 40, layout_seed: 0, layout: None }
    }
}

impl GridCollectConfig {
    pub fn resolve_layout(&self) -> Result<GridLayout> {
        if self.width < 6 || self.height < 6 {
            return Err(EnvError::Config(format!("grid must be at least 6x6, got {}x{}", self.height, self.width)));
        }
        if self.step_limit == 0 {
            return Err(EnvError::Config("step_limit must be positive".into()));
        }
        let layout = match &self.layout {
            Some(l) => l.clone(),
            None => {
                if self.pellets + 2 > self.width * self.height {
                    return Err(EnvError::Config("too many pellets for the grid".into()));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(self.layout_seed);
                let cells = sample(&mut rng, self.width * self.height, self.pellets + 2).into_vec();
                let at = |i: usize| (cells[i] / self.width, cells[i] % self.width);
                GridLayout { agent: at(0), goal: at(1), pellets: (2..cells.len()).map(at).collect() }
            }
        };
        let mut seen = vec![layout.agent, layout.goal];
        seen.extend(layout.pellets.iter().copied());
        for &(r, c) in &seen {
            if r >= self.height || c >= self.width {
                return Err(EnvError::Config(format!("layout cell ({r}, {c}) is outside the grid")));
            }
        }
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != layout.pellets.len() + 2 {
            return Err(EnvError::Config("layout cells must be distinct".into()));
        }
        if layout.pellets.len() > MAX_PELLETS {
            return Err(EnvError::Config(format!("at most {MAX_PELLETS} pellets are supported")));
        }
        Ok(layout)
    }
}

/// The agent moves up, down, left or right on a fixed layout. Pellets pay 0.1
/// once each; reaching the goal pays 1 and ends the episode, as does the step
/// limit. Moves into a wall leave the agent in place.
#[derive(Clone, Debug)]
pub struct GridCollect {
    cfg: GridCollectConfig,
    layout: GridLayout,
    agent: (usize, usize),
    /// Bit `i` set while pellet `i` is uncollected.
    mask: u32,
    steps: usize,
}

impl GridCollect {
    pub fn new(cfg: GridCollectConfig) -> Result<Self> {
        let layout = cfg.resolve_layout()?;
        let agent = layout.agent;
        let mask = full_mask(layout.pellets.len());
        Ok(Self { cfg, layout, agent, mask, steps: 0 })
    }

    pub fn layout(&self) -> &GridLayout {
        &self.layout
    }

    fn moved(&self, pos: (usize, usize), action: usize) -> (usize, usize) {
        let (r, c) = pos;
        match action {
            0 => (r.saturating_sub(1), c),
            1 => ((r + 1).min(self.cfg.height - 1), c),
            2 => (r, c.saturating_sub(1)),
            _ => (r, (c + 1).min(self.cfg.width - 1)),
        }
    }

    /// Pure transition on `(position, mask)`: `(next position, next mask, reward, reached goal)`.
    fn transition(&self, pos: (usize, usize), mask: u32, action: usize) -> ((usize, usize), u32, f64, bool) {
        let next = self.moved(pos, action);
        if next == self.layout.goal {
            return (next, mask, GOAL_REWARD, true);
        }
        match self.layout.pellets.iter().position(|&p| p == next) {
            Some(i) if mask & (1 << i) != 0 => (next, mask & !(1 << i), PELLET_REWARD, false),
            _ => (next, mask, 0.0, false),
        }
    }

    /// Tabular form without the step limit: states are `(cell, pellet mask)`
    /// pairs plus one absorbing terminal state. Returns the MDP and the start
    /// state index.
    pub fn to_mdp(&self, gamma: f64) -> Result<(ChainMdp, usize)> {
        let cells = self.cfg.width * self.cfg.height;
        let masks = 1usize << self.layout.pellets.len();
        let n = cells * masks + 1;
        let terminal = n - 1;
        let index = |pos: (usize, usize), mask: u32| (pos.0 * self.cfg.width + pos.1) * masks + mask as usize;
        let mut transitions = vec![vec![vec![0.0; n]; 4]; n];
        let mut rewards = vec![vec![0.0; 4]; n];
        for cell in 0..cells {
            let pos = (cell / self.cfg.width, cell % self.cfg.width);
            for mask in 0..masks as u32 {
                let s = index(pos, mask);
                for a in 0..4 {
                    if pos == self.layout.goal {
                        transitions[s][a][terminal] = 1.0;
                        continue;
                    }
                    let (next, next_mask, r, done) = self.transition(pos, mask, a);
                    let t = if done { terminal } else { index(next, next_mask) };
                    transitions[s][a][t] = 1.0;
                    rewards[s][a] = r;
                }
            }
        }
        for a in 0..4 {
            transitions[terminal][a][terminal] = 1.0;
        }
        let start = index(self.layout.agent, full_mask(self.layout.pellets.len()));
        Ok((ChainMdp::new(transitions, rewards, gamma)?, start))
    }

    /// Index of the current state in [`GridCollect::to_mdp`].
    pub fn state_index(&self) -> usize {
        let masks = 1usize << self.layout.pellets.len();
        (self.agent.0 * self.cfg.width + self.agent.1) * masks + self.mask as usize
    }
}

fn full_mask(pellets: usize) -> u32 {
    ((1u64 << pellets) - 1) as u32
}

impl Game for GridCollect {
    fn num_actions(&self) -> usize {
        4
    }

    fn frame_shape(&self) -> (usize, usize) {
        (self.cfg.height, self.cfg.width)
    }

    fn reset(&mut self, _rng: &mut ChaCha8Rng) {
        self.agent = self.layout.agent;
        self.mask = full_mask(self.layout.pellets.len());
        self.steps = 0;
    }

    fn step(&mut self, action: usize, _rng: &mut ChaCha8Rng) -> (f64, bool) {
        let (next, mask, r, done) = self.transition(self.agent, self.mask, action);
        self.agent = next;
        self.mask = mask;
        self.steps += 1;
        (r, done || self.steps >= self.cfg.step_limit)
    }

    fn render(&self, frame: &mut [f64]) {
        frame.fill(0.0);
        let w = self.cfg.width;
        for (i, &(r, c)) in self.layout.pellets.iter().enumerate() {
            if self.mask & (1 << i) != 0 {
                frame[r * w + c] = 0.3;
            }
        }
        frame[self.layout.goal.0 * w + self.layout.goal.1] = 0.6;
        frame[self.agent.0 * w + self.agent.1] = 1.0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{value_iteration_oracle, EnvConfig, NoiseSpec};

    fn fixed(pellets: Vec<(usize, usize)>, step_limit: usize) -> GridCollectConfig {
        GridCollectConfig {
            layout: Some(GridLayout { agent: (0, 0), goal: (0, 1), pellets }),
            step_limit,
            ..Default::default()
        }
    }

    #[test]
    fn goal_adjacent_single_step() {
        let mut env = EnvConfig::GridCollect(fixed(vec![], 10)).build(NoiseSpec::default(), 0).unwrap();
        env.reset();
        let s = env.step_traced(3).unwrap();
        assert_eq!((s.true_reward, s.terminal), (1.0, true));
    }

    #[test]
    fn step_limit_terminates() {
        let mut env = EnvConfig::GridCollect(fixed(vec![], 3)).build(NoiseSpec::default(), 0).unwrap();
        env.reset();
        assert!(!env.step(0).unwrap().terminal);
        assert!(!env.step(0).unwrap().terminal);
        let s = env.step_traced(0).unwrap();
        assert_eq!((s.true_reward, s.terminal), (0.0, true));
    }

    #[test]
    fn pellets_pay_once() {
        let mut env = EnvConfig::GridCollect(fixed(vec![(1, 0)], 10)).build(NoiseSpec::default(), 0).unwrap();
        env.reset();
        assert_eq!(env.step_traced(1).unwrap().true_reward, PELLET_REWARD);
        assert_eq!(env.step_traced(0).unwrap().true_reward, 0.0);
        assert_eq!(env.step_traced(1).unwrap().true_reward, 0.0);
    }

    #[test]
    fn greedy_rollout_matches_value_iteration() {
        let gamma = 0.95;
        for seed in 0..4 {
            let cfg = GridCollectConfig { layout_seed: seed, step_limit: 500, ..Default::default() };
            let mut game = GridCollect::new(cfg).unwrap();
            let (mdp, start) = game.to_mdp(gamma).unwrap();
            let vi = value_iteration_oracle(&mdp, 1e-12).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            game.reset(&mut rng);
            assert_eq!(game.state_index(), start);
            let (mut ret, mut disc) = (0.0, 1.0);
            loop {
                let (r, done) = game.step(vi.policy[game.state_index()], &mut rng);
                ret += disc * r;
                disc *= gamma;
                if done {
                    break;
                }
            }
            assert!((ret - vi.values[start]).abs() < 1e-9, "seed {seed}: {ret} vs {}", vi.values[start]);
            // collecting every pellet on the way can never beat the undiscounted total
            let cap = GOAL_REWARD + PELLET_REWARD * game.layout().pellets.len() as f64;
            assert!(vi.values[start] > 0.0 && vi.values[start] <= cap);
        }
    }

    #[test]
    fn layout_is_fixed_per_seed() {
        let a = GridCollectConfig::default().resolve_layout().unwrap();
        let b = GridCollectConfig::default().resolve_layout().unwrap();
        assert_eq!(a, b);
        assert_eq!(a.pellets.len(), 3);
    }

    #[test]
    fn bad_layouts_rejected() {
        assert!(GridCollect::new(GridCollectConfig { width: 5, ..Default::default() }).is_err());
        assert!(GridCollect::new(fixed(vec![(0, 1)], 10)).is_err());
        assert!(GridCollect::new(fixed(vec![(9, 0)], 10)).is_err());
    }
}
