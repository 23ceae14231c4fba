use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::envs::{BanditConfig, CatchConfig, ChainConfig};
use crate::losses::{total_loss, LossInputs, Trajectory};
use crate::nn::{BnMode, Graph, Tensor};
use crate::optimizer::{clip_gradients, rmsprop_update, RmsPropConfig};

fn tiny_network() -> NetworkConfig {
    NetworkConfig {
        trunk_channels: vec![4],
        value_channels: vec![3, 1],
        variance_channels: vec![2, 1],
        policy_channels: 2,
        lstm_hidden: 6,
        ..NetworkConfig::default()
    }
}

fn setup(env: EnvConfig, steps: u64, workers: usize) -> TrainSetup {
    let mut s = TrainSetup {
        env,
        noise: NoiseSpec::new(0.05).unwrap(),
        network: tiny_network(),
        trainer: TrainerConfig { workers, total_steps: steps, eval_period: 0, seed: 17, ..TrainerConfig::default() },
        loss: LossWeights::default(),
        value_loss: ValueLoss::GaussianNll,
    };
    s.fit_network_to_env().unwrap();
    s
}

fn catch5() -> EnvConfig {
    EnvConfig::Catch(CatchConfig { width: 5, height: 5 })
}

fn fingerprint(m: &TrainMetrics) -> String {
    format!("{:?}", m)
}

#[test]
fn zero_budget_returns_initial_params() {
    let s = setup(catch5(), 0, 2);
    let out = train(&s).unwrap();
    assert!(out.metrics.updates.is_empty() && out.metrics.evals.is_empty());
    let (_, init) = Network::new(s.network.clone(), derive_seed(s.trainer.seed, SEED_INIT, 0)).unwrap();
    assert_eq!(out.global.params(), init);
    assert_eq!(out.global.version(), 0);
}

#[test]
fn single_worker_is_bit_reproducible() {
    let mut s = setup(catch5(), 400, 1);
    s.trainer.eval_period = 100;
    s.trainer.eval_episodes = 3;
    let a = train(&s).unwrap();
    let b = train(&s).unwrap();
    assert_eq!(fingerprint(&a.metrics), fingerprint(&b.metrics));
    assert_eq!(a.global.params(), b.global.params());
    assert!(a.metrics.evals.len() >= 4);
    s.trainer.seed += 1;
    let c = train(&s).unwrap();
    assert_ne!(fingerprint(&a.metrics), fingerprint(&c.metrics));
}

#[test]
fn one_rollout_on_long_episode_counts_k_steps() {
    let env = EnvConfig::Chain(ChainConfig { length: 30, ..Default::default() });
    let s = setup(env, 1, 1);
    let out = train(&s).unwrap();
    assert_eq!(out.global.global_step(), 5);
    assert_eq!(out.metrics.updates.len(), 1);
    assert_eq!(out.metrics.updates[0].global_step, 5);
    assert!(out.metrics.updates[0].episode.is_none());
}

#[test]
fn episode_lengths_account_for_every_step() {
    let s = setup(catch5(), 300, 1);
    let out = train(&s).unwrap();
    let mut episodes = 0u64;
    let mut pending = 0u64;
    let mut prev = 0u64;
    for u in &out.metrics.updates {
        pending += u.global_step - prev;
        prev = u.global_step;
        if let Some(e) = u.episode {
            episodes += e.length as u64;
            assert_eq!(episodes, u.global_step);
            assert_eq!(pending, e.length as u64);
            pending = 0;
        }
    }
    assert!(episodes > 0 && episodes <= out.global.global_step());
}

#[test]
fn terminal_rollouts_stop_at_episode_end() {
    let s = setup(EnvConfig::Bandit(BanditConfig::default()), 50, 1);
    let out = train(&s).unwrap();
    assert_eq!(out.metrics.updates.len(), 50);
    for (i, u) in out.metrics.updates.iter().enumerate() {
        assert_eq!(u.global_step, i as u64 + 1);
        assert_eq!(u.episode.map(|e| e.length), Some(1));
        assert_eq!(u.episode.map(|e| e.episode_return), Some(0.5));
    }
}

#[test]
fn non_finite_losses_skip_updates() {
    let env = EnvConfig::Bandit(BanditConfig { mean: 1e300, ..Default::default() });
    let mut s = setup(env, 20, 1);
    s.noise = NoiseSpec::default();
    let out = train(&s).unwrap();
    assert_eq!(out.metrics.updates.len(), 20);
    assert_eq!(out.metrics.skipped_updates(), 20);
    assert_eq!(out.global.version(), 0);
}

#[test]
fn evaluation_leaves_shared_state_untouched() {
    let s = setup(catch5(), 100, 1);
    let out = train(&s).unwrap();
    let (version, params) = (out.global.version(), out.global.params());
    let bn = out.global.bn_stats();
    let e1 = evaluate(out.global.network(), &params, &bn, BnMode::Eval, &s.env, 5, EvalPolicy::Sampling, 3).unwrap();
    let e2 = evaluate(out.global.network(), &params, &bn, BnMode::Eval, &s.env, 5, EvalPolicy::Sampling, 3).unwrap();
    assert_eq!(e1, e2);
    assert_eq!(out.global.version(), version);
    assert_eq!(out.global.params(), params);
    assert_eq!(out.global.bn_stats(), bn);
}

#[test]
fn greedy_eval_on_deterministic_env_has_no_spread() {
    let env = EnvConfig::Chain(ChainConfig { length: 4, ..Default::default() });
    let s = setup(env, 0, 1);
    let out = train(&s).unwrap();
    let net = out.global.network();
    let r = evaluate(net, &out.global.params(), &out.global.bn_stats(), BnMode::Eval, &s.env, 6, EvalPolicy::Greedy, 0).unwrap();
    assert!(r.returns.iter().all(|x| *x == r.returns[0]));
    assert_eq!(r.mean, 1.0);
    assert!(evaluate(net, &out.global.params(), &out.global.bn_stats(), BnMode::Eval, &s.env, 0, EvalPolicy::Greedy, 0).is_err());
}

#[test]
fn uniform_policy_matches_random_oracle() {
    let cfg = CatchConfig { width: 5, height: 5 };
    let s = setup(EnvConfig::Catch(cfg.clone()), 0, 1);
    let (net, mut params) = Network::new(s.network.clone(), 3).unwrap();
    for name in ["policy.head.weight", "policy.head.bias"] {
        let id = params.find(name).unwrap();
        params.get_mut(id).data_mut().fill(0.0);
    }
    let n = 6000;
    let r = evaluate(&net, &params, &net.new_bn_stats(), BnMode::Eval, &s.env, n, EvalPolicy::Sampling, 9).unwrap();
    let exact = crate::envs::Catch::random_policy_return(&cfg).unwrap();
    let se = (exact * (1.0 - exact) / n as f64).sqrt();
    assert!((r.mean - exact).abs() < 4.0 * se, "{} vs {exact}", r.mean);
}

#[test]
fn workers_apply_fresh_or_stale_snapshots_monotonically() {
    let s = setup(catch5(), 600, 3);
    let out = train(&s).unwrap();
    let applied: Vec<u64> = out.metrics.updates.iter().filter_map(|u| u.applied_version).collect();
    assert_eq!(applied.len() as u64, out.global.version());
    for u in &out.metrics.updates {
        assert!(u.snapshot_version < u.applied_version.unwrap());
    }
    for w in 0..3 {
        let steps: Vec<u64> = out.metrics.updates.iter().filter(|u| u.worker_id == w).map(|u| u.global_step).collect();
        assert!(!steps.is_empty());
        assert!(steps.windows(2).all(|p| p[0] < p[1]));
    }
    let total: u64 = out.global.global_step();
    assert!((600..600 + 3 * 5).contains(&total));
}

#[test]
fn invalid_setups_rejected() {
    let mut s = setup(catch5(), 10, 1);
    s.trainer.workers = 0;
    assert!(matches!(train(&s), Err(TrainError::Config(_))));
    let mut s = setup(catch5(), 10, 1);
    s.network.height = 9;
    assert!(train(&s).is_err());
    let mut s = setup(catch5(), 10, 1);
    s.value_loss = ValueLoss::SquaredError;
    assert!(train(&s).is_err());
    let mut s = setup(catch5(), 10, 1);
    s.trainer.gamma = 0.0;
    assert!(train(&s).is_err());
}

#[test]
fn checkpoint_round_trip_and_validation() {
    let s = setup(catch5(), 50, 1);
    let out = train(&s).unwrap();
    let ck = out.global.checkpoint("abc123", "meta text");
    let dir = std::env::temp_dir().join(format!("vb-ck-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("run.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path, Some("abc123")).unwrap();
    assert_eq!(back, ck);
    back.check_layout(&out.global.params(), &out.global.bn_stats()).unwrap();
    assert!(matches!(Checkpoint::load(&path, Some("other")), Err(TrainError::Checkpoint(_))));

    let mut bytes = std::fs::read(&path).unwrap();
    assert!(Checkpoint::read_from(&bytes[..bytes.len() - 3]).is_err());
    bytes[0] = b'X';
    assert!(Checkpoint::read_from(&bytes[..]).is_err());
    std::fs::remove_dir_all(&dir).unwrap();
}

/// Straight-line single-worker loop over plain vectors, written without the
/// shared store, channels or counters.
fn serial_reference(s: &TrainSetup, rollouts: usize) -> (Vec<Vec<f64>>, Vec<(f64, f64)>) {
    let t = &s.trainer;
    let (net, mut params) = Network::new(s.network.clone(), derive_seed(t.seed, SEED_INIT, 0)).unwrap();
    let mut sq: Vec<Vec<f64>> = params.tensors().iter().map(|x| vec![0.0; x.len()]).collect();
    let mut stats = net.new_bn_stats();
    let mut env = s.env.build(s.noise, derive_seed(t.seed, SEED_ENV, 0)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(t.seed, SEED_ACTIONS, 0));
    let mut obs = env.reset();
    let mut lstm = net.zero_lstm();
    let cfg = net.config().clone();
    let mut losses = Vec::new();
    let mut step = 0u64;
    for _ in 0..rollouts {
        let start = lstm.clone();
        let (mut rows, mut acts, mut rews, mut done) = (Vec::new(), Vec::new(), Vec::new(), false);
        while acts.len() < t.rollout && !done {
            let out = net.infer(&params, &obs, &lstm, t.rollout_bn, &mut stats).unwrap();
            let a = sample_action(&out.policy_logits, &mut rng);
            rows.extend_from_slice(&obs);
            let st = env.step(a).unwrap();
            acts.push(a);
            rews.push(st.reward);
            lstm = out.lstm_state;
            obs = st.observation;
            done = st.terminal;
        }
        if !done {
            rows.extend_from_slice(&obs);
        }
        let n = acts.len();
        let batch = Tensor::new(vec![rows.len() / cfg.obs_len(), cfg.frames, cfg.height, cfg.width], rows).unwrap();
        let mut g = Graph::new();
        let fp = net.forward(&mut g, &params, &batch, &start, t.learn_bn, &mut stats).unwrap();
        let v = g.value(fp.value).to_vec();
        let boot = if done { 0.0 } else { v[n] };
        let traj = Trajectory::new(acts, rews, v[..n].to_vec(), done, boot).unwrap();
        let inputs = LossInputs { logits: fp.logits, value: fp.value, nu: fp.nu };
        let (loss, b) = total_loss(&mut g, inputs, &traj, t.gamma, s.loss, s.value_loss).unwrap();
        losses.push((b.policy_loss, b.value_nll_loss));
        params.zero_grads();
        g.backward_into(loss, &mut params).unwrap();
        let mut grads = params.grads();
        clip_gradients(&mut grads, t.max_grad_norm.unwrap());
        let cfg = RmsPropConfig { lr: t.learning_rate_at(step), ..t.rmsprop() };
        for ((p, v), gr) in params.tensors_mut().iter_mut().zip(sq.iter_mut()).zip(&grads) {
            rmsprop_update(p.data_mut(), v, gr, &cfg);
        }
        step += n as u64;
        if done {
            obs = env.reset();
            lstm = net.zero_lstm();
        }
    }
    (params.tensors().iter().map(|x| x.data().to_vec()).collect(), losses)
}

#[test]
fn single_worker_matches_serial_reference() {
    let mut s = setup(catch5(), 250, 1);
    s.trainer.lr_schedule = LrSchedule::Linear;
    let out = train(&s).unwrap();
    let n = out.metrics.updates.len();
    let (params, losses) = serial_reference(&s, n);
    let trained: Vec<Vec<f64>> = out.global.params().tensors().iter().map(|x| x.data().to_vec()).collect();
    assert_eq!(trained, params);
    for (u, (pl, vl)) in out.metrics.updates.iter().zip(&losses) {
        assert_eq!((u.policy_loss.to_bits(), u.value_nll_loss.to_bits()), (pl.to_bits(), vl.to_bits()));
    }
}

#[test]
fn linear_schedule_reaches_zero_at_budget() {
    let t = TrainerConfig { total_steps: 100, lr_schedule: LrSchedule::Linear, ..TrainerConfig::default() };
    assert_eq!(t.learning_rate_at(0), t.learning_rate);
    assert!((t.learning_rate_at(50) - t.learning_rate / 2.0).abs() < 1e-18);
    assert_eq!(t.learning_rate_at(100), 0.0);
    assert_eq!(t.learning_rate_at(140), 0.0);
    let c = TrainerConfig::default();
    assert_eq!(c.learning_rate_at(10_000_000), c.learning_rate);
}
