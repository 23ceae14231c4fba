use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::Sender;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    derive_seed, eval, EpisodeStats, GlobalParams, MetricEvent, Result, TrainError, TrainSetup, UpdateRow, SEED_ACTIONS,
    SEED_ENV,
};
use crate::losses::{total_loss, LossBreakdown, LossError, LossInputs, Trajectory};
use crate::model::{BnStats, ModelError, Network};
use crate::nn::{Graph, LstmState, NnError, ParamStore, Tensor};
use crate::optimizer::{clip_gradients, global_norm, OptimError};

/// Samples from `softmax(logits)` by inverting the CDF with one uniform draw.
pub fn sample_action(logits: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Index of the first largest logit.
pub fn greedy_action(logits: &[f64]) -> usize {
    let best = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    logits.iter().position(|l| *l == best).unwrap_or(0)
}

/// Result of one learning pass, before clipping.
pub(crate) struct Learned {
    pub grads: Vec<Vec<f64>>,
    pub breakdown: LossBreakdown,
    pub mean_nu: f64,
}

/// Recomputes the rollout from the recurrent state it started in and
/// differentiates the composite loss. `obs` holds the rollout's
/// observations followed, when not terminal, by the bootstrap observation.
pub(crate) fn learn(
    net: &Network,
    params: &ParamStore,
    obs: &Tensor,
    start: &LstmState,
    stats: &mut BnStats,
    actions: Vec<usize>,
    rewards: Vec<f64>,
    terminal: bool,
    setup: &TrainSetup,
) -> Result<Learned> {
    let n = actions.len();
    let mut g = Graph::new();
    let fp = net.forward(&mut g, params, obs, start, setup.trainer.learn_bn, stats)?;
    let v = g.value(fp.value);
    let bootstrap = if terminal { 0.0 } else { v[n] };
    let traj = Trajectory::new(actions, rewards, v[..n].to_vec(), terminal, bootstrap)?;
    let mean_nu = fp.nu.map_or(1.0, |nu| g.value(nu)[..n].iter().sum::<f64>() / n as f64);
    let inputs = LossInputs { logits: fp.logits, value: fp.value, nu: fp.nu };
    let (loss, breakdown) = total_loss(&mut g, inputs, &traj, setup.trainer.gamma, setup.loss, setup.value_loss)?;
    if !breakdown.total.is_finite() {
        return Err(NnError::NonFinite { op: "total_loss" }.into());
    }
    let grads = g.backward(loss)?;
    let grads = params.ids().map(|id| grads.param(id).map_or_else(|| vec![0.0; params.get(id).len()], <[f64]>::to_vec)).collect();
    Ok(Learned { grads, breakdown, mean_nu })
}

/// True for failures caused by non-finite numbers, which skip an update rather than end the run.
pub(crate) fn is_non_finite(e: &TrainError) -> bool {
    matches!(
        e,
        TrainError::Model(ModelError::Nn(NnError::NonFinite { .. }))
            | TrainError::Loss(LossError::Nn(NnError::NonFinite { .. }))
            | TrainError::Optim(OptimError::NonFiniteGradient(_))
    )
}

/// Runs one worker until the global step budget is spent or `stop` is set.
pub fn run_worker(id: usize, global: &GlobalParams, setup: &TrainSetup, stop: &AtomicBool, tx: &Sender<MetricEvent>) -> Result<()> {
    let t = &setup.trainer;
    let net = global.network();
    let cfg = net.config();
    let mut local = global.params();
    let mut stats = net.new_bn_stats();
    let mut env = setup.env.build(setup.noise, derive_seed(t.seed, SEED_ENV, id as u64))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(t.seed, SEED_ACTIONS, id as u64));
    let mut obs = env.reset();
    let mut lstm = net.zero_lstm();
    let (mut ep_return, mut ep_len) = (0.0, 0usize);
    let mut next_eval = t.eval_period;

    while !stop.load(Ordering::Acquire) && global.global_step() < t.total_steps {
        let snapshot_version = global.optimizer().snapshot_into(&mut local);
        let start = lstm.clone();
        let mut batch = Vec::with_capacity((t.rollout + 1) * cfg.obs_len());
        let (mut actions, mut rewards) = (Vec::new(), Vec::new());
        let mut episode = None;
        for _ in 0..t.rollout {
            let out = net.infer(&local, &obs, &lstm, t.rollout_bn, &mut stats)?;
            let a = sample_action(&out.policy_logits, &mut rng);
            batch.extend_from_slice(&obs);
            let step = env.step_traced(a)?;
            actions.push(a);
            rewards.push(step.reward);
            ep_return += step.true_reward;
            ep_len += 1;
            lstm = out.lstm_state;
            obs = step.observation;
            if step.terminal {
                episode = Some(EpisodeStats { episode_return: ep_return, length: ep_len });
                break;
            }
        }
        let n = actions.len();
        let terminal = episode.is_some();
        if !terminal {
            batch.extend_from_slice(&obs);
        }
        let rows = batch.len() / cfg.obs_len();
        let obs_t = Tensor::new(vec![rows, cfg.frames, cfg.height, cfg.width], batch)?;
        let learned = learn(net, &local, &obs_t, &start, &mut stats, actions, rewards, terminal, setup);
        if terminal {
            obs = env.reset();
            lstm = net.zero_lstm();
            ep_return = 0.0;
            ep_len = 0;
        }

        let mut row = UpdateRow {
            global_step: 0,
            worker_id: id,
            episode,
            policy_loss: f64::NAN,
            value_nll_loss: f64::NAN,
            entropy: f64::NAN,
            mean_nu: f64::NAN,
            grad_norm: f64::NAN,
            snapshot_version,
            applied_version: None,
        };
        let applied = learned.and_then(|mut l| {
            row.policy_loss = l.breakdown.policy_loss;
            row.value_nll_loss = l.breakdown.value_nll_loss;
            row.entropy = l.breakdown.entropy_bonus;
            row.mean_nu = l.mean_nu;
            row.grad_norm = match t.max_grad_norm {
                Some(max) => clip_gradients(&mut l.grads, max),
                None => global_norm(&l.grads),
            };
            Ok(global.optimizer().apply_lr(&l.grads, t.learning_rate_at(global.global_step()))?)
        });
        match applied {
            Ok(v) => row.applied_version = Some(v),
            Err(e) if is_non_finite(&e) => log::warn!("worker {id}: skipping update: {e}"),
            Err(e) => return Err(e),
        }
        global.publish_bn(id, &stats);
        row.global_step = global.add_steps(n as u64);
        let step = row.global_step;
        if tx.send(MetricEvent::Update(row)).is_err() {
            break;
        }
        if id == 0 && t.eval_period > 0 && step >= next_eval && step < t.total_steps {
            let _ = tx.send(MetricEvent::Eval(eval::eval_row(global, setup)?));
            next_eval = (step / t.eval_period + 1) * t.eval_period;
        }
    }
    Ok(())
}
