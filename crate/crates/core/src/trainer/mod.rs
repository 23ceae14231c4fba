//! Asynchronous actor-critic training: workers roll out `k` steps against their
//! own environment, build the composite loss and push gradients to a shared
//! RMSprop store.

mod checkpoint;
mod eval;
mod worker;

use std::panic::{self, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{mpsc, Arc};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::{EnvConfig, EnvError, NoiseSpec, STACK};
use crate::losses::{LossError, LossWeights, ValueLoss};
use crate::model::{BnStats, ModelError, Network, NetworkConfig};
use crate::nn::{BnMode, NnError, ParamStore};
use crate::optimizer::{OptimError, RmsPropConfig, SharedRmsprop};

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use eval::{evaluate, EvalPolicy, EvalResult};
pub use worker::{greedy_action, run_worker, sample_action};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid trainer config: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("worker {worker} failed: {message}")]
    WorkerFailed { worker: usize, message: String, partial: Box<TrainMetrics> },
}

impl From<NnError> for TrainError {
    fn from(e: NnError) -> Self {
        TrainError::Model(ModelError::Nn(e))
    }
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub workers: usize,
    /// Rollout length `k`.
    pub rollout: usize,
    pub gamma: f64,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub rms_alpha: f64,
    pub rms_eps: f64,
    pub max_grad_norm: Option<f64>,
    /// Environment steps summed over workers.
    pub total_steps: u64,
    /// Steps between evaluations; 0 disables them.
    pub eval_period: u64,
    pub eval_episodes: usize,
    pub eval_policy: EvalPolicy,
    /// Batch-norm mode of the acting forward passes during rollouts.
    pub rollout_bn: BnMode,
    /// Batch-norm mode of the learning pass over a rollout.
    pub learn_bn: BnMode,
    /// Batch-norm mode used when scoring.
    pub eval_bn: BnMode,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            workers: 8,
            rollout: 5,
            gamma: 0.99,
            learning_rate: 7e-4,
            lr_schedule: LrSchedule::Constant,
            rms_alpha: 0.99,
            rms_eps: 1e-8,
            max_grad_norm: Some(40.0),
            total_steps: 200_000,
            eval_period: 10_000,
            eval_episodes: 20,
            eval_policy: EvalPolicy::Greedy,
            rollout_bn: BnMode::Train,
            learn_bn: BnMode::TrainPerSample,
            eval_bn: BnMode::Train,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn full_scale() -> Self {
        Self { workers: 32, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if self.rollout == 0 {
            return bad("rollout length must be at least 1".into());
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.rms_alpha) || !(self.rms_eps > 0.0) {
            return bad("rms_alpha must lie in [0, 1) and rms_eps must be positive".into());
        }
        if matches!(self.max_grad_norm, Some(n) if !(n > 0.0)) {
            return bad("max_grad_norm must be positive when set".into());
        }
        if self.eval_period > 0 && self.eval_episodes == 0 {
            return bad("eval_episodes must be at least 1 when evaluation is enabled".into());
        }
        Ok(())
    }

    /// Learning rate for an update applied when `step` steps have been taken.
    pub fn learning_rate_at(&self, step: u64) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Linear => {
                let left = 1.0 - step as f64 / self.total_steps.max(1) as f64;
                self.learning_rate * left.max(0.0)
            }
        }
    }

    pub fn rmsprop(&self) -> RmsPropConfig {
        RmsPropConfig { lr: self.learning_rate, alpha: self.rms_alpha, eps: self.rms_eps, max_grad_norm: self.max_grad_norm }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Decays linearly from the configured rate to 0 at the step budget.
    Linear,
}

/// Everything one training run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSetup {
    pub env: EnvConfig,
    pub noise: NoiseSpec,
    pub network: NetworkConfig,
    pub trainer: TrainerConfig,
    pub loss: LossWeights,
    pub value_loss: ValueLoss,
}

impl TrainSetup {
    /// Copies frame size and action count from the environment into the network config.
    pub fn fit_network_to_env(&mut self) -> Result<()> {
        let game = self.env.build_game()?;
        let (h, w) = game.frame_shape();
        self.network.frames = STACK;
        self.network.height = h;
        self.network.width = w;
        self.network.actions = game.num_actions();
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.trainer.validate()?;
        self.noise.validate()?;
        self.network.validate()?;
        let game = self.env.build_game()?;
        let (h, w) = game.frame_shape();
        let n = &self.network;
        if (n.frames, n.height, n.width, n.actions) != (STACK, h, w, game.num_actions()) {
            return Err(TrainError::Config(format!(
                "network expects {}x{}x{} observations and {} actions; the environment gives {STACK}x{h}x{w} and {}",
                n.frames,
                n.height,
                n.width,
                n.actions,
                game.num_actions()
            )));
        }
        if self.value_loss == ValueLoss::SquaredError && n.variance_branch && !n.freeze_nu {
            return Err(TrainError::Config("squared-error value loss ignores the variance branch; disable it".into()));
        }
        for (name, v) in [("value_weight", self.loss.value_weight), ("entropy_beta", self.loss.entropy_beta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(TrainError::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Independent 64-bit seeds for each `(purpose, index)` pair.
pub fn derive_seed(base: u64, purpose: u64, index: u64) -> u64 {
    let mut z = base ^ purpose.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    for _ in 0..2 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

pub(crate) const SEED_INIT: u64 = 1;
pub(crate) const SEED_ENV: u64 = 2;
pub(crate) const SEED_ACTIONS: u64 = 3;
pub(crate) const SEED_EVAL: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeStats {
    pub episode_return: f64,
    pub length: usize,
}

/// One applied (or skipped) update.
#[derive(Clone, Debug, PartialEq)]
pub struct UpdateRow {
    /// Global step counter after this rollout was counted.
    pub global_step: u64,
    pub worker_id: usize,
    /// Set when an episode ended inside this rollout; the return is noise-free.
    pub episode: Option<EpisodeStats>,
    pub policy_loss: f64,
    pub value_nll_loss: f64,
    pub entropy: f64,
    pub mean_nu: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    /// Parameter version the rollout acted with.
    pub snapshot_version: u64,
    /// Version after applying, or `None` when the update was skipped.
    pub applied_version: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub global_step: u64,
    pub mean_return: f64,
    pub returns: Vec<f64>,
    /// What was scored. Workers keep training while the event is in flight, so
    /// consumers that need the evaluated network must use this rather than the
    /// live shared state. Dropped when the row is stored in [`TrainMetrics`].
    pub snapshot: Option<Arc<EvalSnapshot>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSnapshot {
    pub params: ParamStore,
    pub bn: BnStats,
}

#[derive(Clone, Debug, PartialEq)]
pub enum MetricEvent {
    Update(UpdateRow),
    Eval(EvalRow),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainMetrics {
    /// Per worker in emission order; workers interleave.
    pub updates: Vec<UpdateRow>,
    pub evals: Vec<EvalRow>,
}

impl TrainMetrics {
    pub fn push(&mut self, e: MetricEvent) {
        match e {
            MetricEvent::Update(u) => self.updates.push(u),
            MetricEvent::Eval(e) => self.evals.push(EvalRow { snapshot: None, ..e }),
        }
    }

    pub fn skipped_updates(&self) -> usize {
        self.updates.iter().filter(|u| u.applied_version.is_none()).count()
    }
}

/// Shared parameters with RMSprop moments, the global step counter, and each
/// worker's latest batch-norm statistics.
pub struct GlobalParams {
    network: Network,
    optimizer: SharedRmsprop,
    steps: AtomicU64,
    bn: Vec<Mutex<BnStats>>,
}

impl GlobalParams {
    pub fn new(network: Network, store: &ParamStore, workers: usize, cfg: RmsPropConfig) -> Self {
        let bn = (0..workers.max(1)).map(|_| Mutex::new(network.new_bn_stats())).collect();
        Self { optimizer: SharedRmsprop::new(store, cfg), network, steps: AtomicU64::new(0), bn }
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn optimizer(&self) -> &SharedRmsprop {
        &self.optimizer
    }

    pub fn global_step(&self) -> u64 {
        self.steps.load(Ordering::Acquire)
    }

    pub fn version(&self) -> u64 {
        self.optimizer.version()
    }

    /// Adds a rollout's length and returns the new count.
    pub fn add_steps(&self, n: u64) -> u64 {
        self.steps.fetch_add(n, Ordering::AcqRel) + n
    }

    pub fn params(&self) -> ParamStore {
        self.optimizer.snapshot()
    }

    pub fn publish_bn(&self, worker: usize, stats: &BnStats) {
        *self.bn[worker].lock() = stats.clone();
    }

    /// Mean of all workers' batch-norm statistics.
    pub fn bn_stats(&self) -> BnStats {
        let all: Vec<BnStats> = self.bn.iter().map(|m| m.lock().clone()).collect();
        BnStats::average(&all).expect("at least one worker")
    }

    pub fn workers(&self) -> usize {
        self.bn.len()
    }

    pub fn checkpoint(&self, config_hash: &str, meta: &str) -> Checkpoint {
        Checkpoint {
            config_hash: config_hash.to_string(),
            meta: meta.to_string(),
            global_step: self.global_step(),
            params: self.params(),
            bn: self.bn_stats(),
        }
    }
}

pub struct TrainOutput {
    pub metrics: TrainMetrics,
    pub global: GlobalParams,
}

impl std::fmt::Debug for TrainOutput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TrainOutput")
            .field("updates", &self.metrics.updates.len())
            .field("evals", &self.metrics.evals.len())
            .field("global_step", &self.global.global_step())
            .finish()
    }
}

pub fn train(setup: &TrainSetup) -> Result<TrainOutput> {
    train_with(setup, |_, _| {})
}

/// Trains to the step budget, passing every metric event to `sink` as it
/// arrives together with the live shared parameters. A worker failure stops
/// the others and returns the metrics gathered so far inside the error.
pub fn train_with(setup: &TrainSetup, mut sink: impl FnMut(&MetricEvent, &GlobalParams)) -> Result<TrainOutput> {
    setup.validate()?;
    let t = &setup.trainer;
    let (network, store) = Network::new(setup.network.clone(), derive_seed(t.seed, SEED_INIT, 0))?;
    let global = GlobalParams::new(network, &store, t.workers, t.rmsprop());
    let mut metrics = TrainMetrics::default();
    if t.total_steps == 0 {
        return Ok(TrainOutput { metrics, global });
    }
    let stop = AtomicBool::new(false);
    let (tx, rx) = mpsc::channel::<MetricEvent>();
    let mut failure: Option<(usize, String)> = None;
    std::thread::scope(|s| {
        let mut handles = Vec::new();
        for id in 0..t.workers {
            let tx = tx.clone();
            let (global, stop) = (&global, &stop);
            handles.push(s.spawn(move || {
                let out = panic::catch_unwind(AssertUnwindSafe(|| run_worker(id, global, setup, stop, &tx)));
                if !matches!(out, Ok(Ok(()))) {
                    stop.store(true, Ordering::Release);
                }
                out
            }));
        }
        drop(tx);
        for e in rx {
            sink(&e, &global);
            metrics.push(e);
        }
        for (id, h) in handles.into_iter().enumerate() {
            let message = match h.join() {
                Ok(Ok(Ok(()))) => continue,
                Ok(Ok(Err(e))) => e.to_string(),
                Ok(Err(p)) | Err(p) => panic_message(p),
            };
            log::error!("worker {id} failed: {message}");
            failure.get_or_insert((id, message));
        }
    });
    if let Some((worker, message)) = failure {
        return Err(TrainError::WorkerFailed { worker, message, partial: Box::new(metrics) });
    }
    if t.eval_period > 0 {
        let step = global.global_step();
        if metrics.evals.last().map_or(true, |e| e.global_step < step) {
            let event = MetricEvent::Eval(eval::eval_row(&global, setup)?);
            sink(&event, &global);
            metrics.push(event);
        }
    }
    Ok(TrainOutput { metrics, global })
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "non-string panic payload".into())
}

#[cfg(test)]
mod tests;
