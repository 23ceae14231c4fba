//! Toy environments with stacked grayscale observations and Gaussian reward noise.
//!
//! Each game renders single frames in `[0, 1]`; [`Env`] stacks the last four
//! frames, adds noise to rewards, and keeps the noise-free reward out of the
//! training-facing [`Env::step`] result.

mod bandit;
mod catch;
mod chain;
mod grid;

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bandit::{BanditConfig, FixedStateBandit};
pub use catch::{Catch, CatchConfig};
pub use chain::{value_iteration_oracle, ChainConfig, ChainEnv, ChainMdp, ValueIteration};
pub use grid::{GridCollect, GridCollectConfig, GridLayout};

pub const STACK: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("invalid environment config: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("step called after the episode ended; call reset first")]
    EpisodeOver,
    #[error("action {action} out of range for {actions} actions")]
    BadAction { action: usize, actions: usize },
}

pub type Result<T, E = EnvError> = std::result::Result<T, E>;

/// Episode dynamics with noise-free rewards and single-frame rendering.
pub trait Game: Send {
    fn num_actions(&self) -> usize;
    /// `(height, width)` of one frame.
    fn frame_shape(&self) -> (usize, usize);
    fn reset(&mut self, rng: &mut ChaCha8Rng);
    /// Returns `(true_reward, terminal)`.
    fn step(&mut self, action: usize, rng: &mut ChaCha8Rng) -> (f64, bool);
    fn render(&self, frame: &mut [f64]);
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseGate {
    /// Every reward, zeros included.
    #[default]
    All,
    /// Only rewards that are nonzero before noise.
    NonZeroOnly,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    pub sigma2: f64,
    pub gate: NoiseGate,
}

impl NoiseSpec {
    pub fn new(sigma2: f64) -> Result<Self> {
        let s = Self { sigma2, gate: NoiseGate::All };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2 >= 0.0 && self.sigma2.is_finite()) {
            return Err(EnvError::Config(format!("sigma2 must be a finite value >= 0, got {}", self.sigma2)));
        }
        Ok(())
    }
}

/// `r_true + ξ`, `ξ ~ N(0, σ²)`. With `σ² = 0` the reward is returned unchanged
/// and no random draw is consumed.
pub fn noisy_reward(r_true: f64, spec: &NoiseSpec, rng: &mut ChaCha8Rng) -> f64 {
    if spec.sigma2 == 0.0 || (spec.gate == NoiseGate::NonZeroOnly && r_true == 0.0) {
        return r_true;
    }
    let normal = Normal::new(0.0, spec.sigma2.sqrt()).expect("validated variance");
    r_true + normal.sample(rng)
}

/// Training-facing transition.
#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub terminal: bool,
}

/// Transition with the noise-free reward, for telemetry and tests.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvStep {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub true_reward: f64,
    pub terminal: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum EnvConfig {
    Catch(CatchConfig),
    GridCollect(GridCollectConfig),
    Chain(ChainConfig),
    Bandit(BanditConfig),
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig::Catch(CatchConfig::default())
    }
}

impl EnvConfig {
    pub fn build_game(&self) -> Result<Box<dyn Game>> {
        Ok(match self {
            EnvConfig::Catch(c) => Box::new(Catch::new(c.clone())?),
            EnvConfig::GridCollect(c) => Box::new(GridCollect::new(c.clone())?),
            EnvConfig::Chain(c) => Box::new(ChainEnv::new(c.clone())?),
            EnvConfig::Bandit(c) => Box::new(FixedStateBandit::new(c.clone())?),
        })
    }

    pub fn build(&self, noise: NoiseSpec, seed: u64) -> Result<Env> {
        Env::new(self.build_game()?, noise, seed)
    }

    pub fn name(&self) -> &'static str {
        match self {
            EnvConfig::Catch(_) => "catch",
            EnvConfig::GridCollect(_) => "grid_collect",
            EnvConfig::Chain(_) => "chain",
            EnvConfig::Bandit(_) => "bandit",
        }
    }
}

/// A game with frame stacking and reward noise. Dynamics and noise draw from
/// separate streams derived from one seed.
pub struct Env {
    game: Box<dyn Game>,
    rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    noise: NoiseSpec,
    frames: Vec<f64>,
    frame_len: usize,
    done: bool,
}

impl Env {
    pub fn new(game: Box<dyn Game>, noise: NoiseSpec, seed: u64) -> Result<Self> {
        noise.validate()?;
        let (h, w) = game.frame_shape();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
        noise_rng.set_stream(2);
        Ok(Self { game, rng, noise_rng, noise, frames: vec![0.0; STACK * h * w], frame_len: h * w, done: true })
    }

    pub fn num_actions(&self) -> usize {
        self.game.num_actions()
    }

    pub fn frame_shape(&self) -> (usize, usize) {
        self.game.frame_shape()
    }

    /// `[STACK, h, w]`
    pub fn obs_shape(&self) -> [usize; 3] {
        let (h, w) = self.frame_shape();
        [STACK, h, w]
    }

    pub fn noise(&self) -> &NoiseSpec {
        &self.noise
    }

    pub fn reset(&mut self) -> Vec<f64> {
        self.game.reset(&mut self.rng);
        let mut frame = vec![0.0; self.frame_len];
        self.game.render(&mut frame);
        for k in 0..STACK {
            self.frames[k * self.frame_len..(k + 1) * self.frame_len].copy_from_slice(&frame);
        }
        self.done = false;
        self.frames.clone()
    }

    pub fn step(&mut self, action: usize) -> Result<Step> {
        let s = self.step_traced(action)?;
        Ok(Step { observation: s.observation, reward: s.reward, terminal: s.terminal })
    }

    pub fn step_traced(&mut self, action: usize) -> Result<EnvStep> {
        if self.done {
            return Err(EnvError::EpisodeOver);
        }
        let actions = self.game.num_actions();
        if action >= actions {
            return Err(EnvError::BadAction { action, actions });
        }
        let (true_reward, terminal) = self.game.step(action, &mut self.rng);
        self.frames.copy_within(self.frame_len.., 0);
        let start = (STACK - 1) * self.frame_len;
        self.game.render(&mut self.frames[start..]);
        self.done = terminal;
        let reward = noisy_reward(true_reward, &self.noise, &mut self.noise_rng);
        Ok(EnvStep { observation: self.frames.clone(), reward, true_reward, terminal })
    }
}

/// One step of a recorded episode.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub action: usize,
    pub reward: f64,
    pub true_reward: f64,
    pub terminal: bool,
}

pub fn write_trace_csv(rows: &[TraceRow], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "step,action,reward,true_reward,terminal")?;
    for r in rows {
        writeln!(out, "{},{},{},{},{}", r.step, r.action, r.reward, r.true_reward, r.terminal as u8)?;
    }
    Ok(())
}
