use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::worker::{greedy_action, sample_action};
use super::{derive_seed, EvalRow, EvalSnapshot, GlobalParams, Result, TrainError, TrainSetup, SEED_EVAL};
use crate::envs::{EnvConfig, NoiseSpec};
use crate::model::{BnStats, Network};
use crate::nn::{BnMode, ParamStore};

const MAX_EPISODE_STEPS: usize = 100_000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalPolicy {
    #[default]
    Greedy,
    Sampling,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub mean: f64,
    pub returns: Vec<f64>,
}

/// Plays `episodes` episodes with frozen parameters, scoring noise-free
/// rewards. Batch-norm statistics are copied, so nothing shared is modified.
pub fn evaluate(
    net: &Network,
    params: &ParamStore,
    bn: &BnStats,
    bn_mode: BnMode,
    env: &EnvConfig,
    episodes: usize,
    policy: EvalPolicy,
    seed: u64,
) -> Result<EvalResult> {
    if episodes == 0 {
        return Err(TrainError::Config("evaluation needs at least one episode".into()));
    }
    let mut env = env.build(NoiseSpec::default(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SEED_EVAL, 1));
    let mut stats = bn.clone();
    let mut returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut obs = env.reset();
        let mut lstm = net.zero_lstm();
        let mut total = 0.0;
        for _ in 0..MAX_EPISODE_STEPS {
            let out = net.infer(params, &obs, &lstm, bn_mode, &mut stats)?;
            let a = match policy {
                EvalPolicy::Greedy => greedy_action(&out.policy_logits),
                EvalPolicy::Sampling => sample_action(&out.policy_logits, &mut rng),
            };
            let step = env.step_traced(a)?;
            total += step.true_reward;
            lstm = out.lstm_state;
            obs = step.observation;
            if step.terminal {
                break;
            }
        }
        returns.push(total);
    }
    let mean = returns.iter().sum::<f64>() / episodes as f64;
    Ok(EvalResult { mean, returns })
}

/// Scores the current shared parameters on the fixed evaluation seed.
pub(crate) fn eval_row(global: &GlobalParams, setup: &TrainSetup) -> Result<EvalRow> {
    let t = &setup.trainer;
    let step = global.global_step();
    let snapshot = EvalSnapshot { params: global.params(), bn: global.bn_stats() };
    let r = evaluate(
        global.network(),
        &snapshot.params,
        &snapshot.bn,
        t.eval_bn,
        &setup.env,
        t.eval_episodes,
        t.eval_policy,
        derive_seed(t.seed, SEED_EVAL, 0),
    )?;
    Ok(EvalRow { global_step: step, mean_return: r.mean, returns: r.returns, snapshot: Some(Arc::new(snapshot)) })
}
