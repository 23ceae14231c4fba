use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EnvError, Game, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BanditConfig {
    pub mean: f64,
    /// All actions pay the same; more than one exists only because the policy
    /// head needs at least two logits.
    pub actions: usize,
    pub height: usize,
    pub width: usize,
    /// Seeds the fixed observation pattern.
    pub pattern_seed: u64,
}

impl Default for BanditConfig {
    fn default() -> Self {
        Self { mean: 0.5, actions: 2, height: 6, width: 6, pattern_seed: 0 }
    }
}

/// One-step episodes from a single fixed observation, paying `mean` before noise.
#[derive(Clone, Debug)]
pub struct FixedStateBandit {
    cfg: BanditConfig,
    pattern: Vec<f64>,
}

impl FixedStateBandit {
    pub fn new(cfg: BanditConfig) -> Result<Self> {
        if cfg.actions == 0 || cfg.height == 0 || cfg.width == 0 || !cfg.mean.is_finite() {
            return Err(EnvError::Config("bandit needs a finite mean, an action and a non-empty frame".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.pattern_seed);
        let pattern = (0..cfg.height * cfg.width).map(|_| rng.random::<f64>()).collect();
        Ok(Self { cfg, pattern })
    }

    pub fn mean(&self) -> f64 {
        self.cfg.mean
    }
}

impl Game for FixedStateBandit {
    fn num_actions(&self) -> usize {
        self.cfg.actions
    }

    fn frame_shape(&self) -> (usize, usize) {
        (self.cfg.height, self.cfg.width)
    }

    fn reset(&mut self, _rng: &mut ChaCha8Rng) {}

    fn step(&mut self, _action: usize, _rng: &mut ChaCha8Rng) -> (f64, bool) {
        (self.cfg.mean, true)
    }

    fn render(&self, frame: &mut [f64]) {
        frame.copy_from_slice(&self.pattern);
    }
}
