use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use varbranch::nn::{
    gradient_check, BatchNorm, BnMode, Conv2d, Dense, GradCheck, Graph, LstmCell, ParamId, ParamStore, RunningStats, Tensor, Var,
};

const TOL: f64 = 1e-5;

fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// A fixed random projection to a scalar, so every output element gets a distinct weight.
fn project(g: &mut Graph, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w: Vec<f64> = (0..g.value(y).len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    g.weighted_sum(y, &w).unwrap()
}

fn check(store: &mut ParamStore, f: impl FnMut(&ParamStore, &mut Graph) -> varbranch::nn::Result<Var>) -> f64 {
    let report = gradient_check(store, &GradCheck::default(), f).unwrap();
    assert!(report.checked > 0);
    report.max_rel_error
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn dense_gradients(seed in any::<u64>(), batch in 1usize..4, inp in 1usize..5, out in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layer = Dense::new(&mut store, "d", inp, out, &mut rng).unwrap();
        let x = store.register("x", random(&mut rng, vec![batch, inp])).unwrap();
        let err = check(&mut store, |s, g| {
            let xv = g.param(s, x)?;
            let y = layer.forward(g, s, xv)?;
            Ok(project(g, y, seed))
        });
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn conv_gradients(seed in any::<u64>(), cin in 1usize..3, cout in 1usize..3, k in prop::sample::select(vec![1usize, 3]), stride in 1usize..3, pad in 0usize..2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layer = Conv2d::new(&mut store, "c", cin, cout, k, stride, pad, &mut rng).unwrap();
        let x = store.register("x", random(&mut rng, vec![2, cin, 5, 4])).unwrap();
        let err = check(&mut store, |s, g| {
            let xv = g.param(s, x)?;
            let y = layer.forward(g, s, xv)?;
            Ok(project(g, y, seed))
        });
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn batchnorm_gradients(seed in any::<u64>(), mode in prop::sample::select(vec![BnMode::Train, BnMode::TrainPerSample, BnMode::Eval])) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layer = BatchNorm::new(&mut store, "bn", 2).unwrap();
        for id in [layer.gamma, layer.beta] {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
        }
        let x = store.register("x", random(&mut rng, vec![3, 2, 2, 2])).unwrap();
        let stats = RunningStats { mean: vec![0.1, -0.2], var: vec![0.7, 1.3] };
        let err = check(&mut store, |s, g| {
            let xv = g.param(s, x)?;
            let y = layer.forward(g, s, xv, mode, &mut stats.clone())?;
            Ok(project(g, y, seed))
        });
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn lstm_step_gradients(seed in any::<u64>(), inp in 1usize..4, hidden in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "l", inp, hidden, &mut rng).unwrap();
        let x = store.register("x", random(&mut rng, vec![1, inp])).unwrap();
        let h = store.register("h", random(&mut rng, vec![1, hidden])).unwrap();
        let c = store.register("c", random(&mut rng, vec![1, hidden])).unwrap();
        let err = check(&mut store, |s, g| {
            let (xv, hv, cv) = (g.param(s, x)?, g.param(s, h)?, g.param(s, c)?);
            let (h2, c2) = cell.step(g, s, xv, hv, cv)?;
            let both = g.concat_rows(&[h2, c2])?;
            Ok(project(g, both, seed))
        });
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn elementwise_and_pooling_gradients(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let f = store.register("f", random(&mut rng, vec![2, 1, 3, 3])).unwrap();
        let gmap = store.register("g", random(&mut rng, vec![2, 3, 3, 3])).unwrap();
        let err = check(&mut store, |s, g| {
            let (fv, gv) = (g.param(s, f)?, g.param(s, gmap)?);
            let composed = g.attention_compose(fv, gv)?;
            let t = g.tanh(fv)?;
            let mx = g.global_max_pool(t)?;
            let av = g.global_avg_pool(fv)?;
            let e = g.exp(av)?;
            let sg = g.sigmoid(mx)?;
            let m = g.mul(sg, e)?;
            let a = project(g, m, seed);
            let b = project(g, composed, seed + 1);
            g.add(a, b)
        });
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn softmax_family_gradients(seed in any::<u64>(), rows in 1usize..4, cols in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let x = store.register("x", random(&mut rng, vec![rows, cols])).unwrap();
        let picks: Vec<usize> = (0..rows).map(|_| rng.random_range(0..cols)).collect();
        let err = check(&mut store, |s, g| {
            let xv = g.param(s, x)?;
            let sm = g.softmax(xv)?;
            let lp = g.log_softmax(xv)?;
            let chosen = g.pick(lp, &picks)?;
            let ent = g.softmax_entropy(xv)?;
            let a = project(g, sm, seed);
            let b = g.sum(chosen)?;
            let c = g.sum(ent)?;
            let ab = g.add(a, b)?;
            g.add(ab, c)
        });
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>(), rows in 1usize..5, cols in 1usize..8, scale in 0.1f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let t = random(&mut rng, vec![rows, cols]);
        let t = Tensor::new(vec![rows, cols], t.data().iter().map(|v| v * scale).collect()).unwrap();
        let x = g.constant(&t).unwrap();
        let sm = g.softmax(x).unwrap();
        for row in g.value(sm).chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|p| *p >= 0.0));
        }
    }

    #[test]
    fn max_pool_dominates_avg_pool(seed in any::<u64>(), n in 1usize..4, h in 1usize..5, w in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let x = g.constant(&random(&mut rng, vec![n, 1, h, w])).unwrap();
        let mx = g.global_max_pool(x).unwrap();
        let av = g.global_avg_pool(x).unwrap();
        for (m, a) in g.value(mx).iter().zip(g.value(av)) {
            prop_assert!(m >= a);
        }
    }

    #[test]
    fn relu_gradient_is_the_positive_mask(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let x = store.register("x", random(&mut rng, vec![4, 5])).unwrap();
        let mut g = Graph::new();
        let xv = g.param(&store, x).unwrap();
        let y = g.relu(xv).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        for (gx, v) in grads.param(x).unwrap().iter().zip(store.get(x).data()) {
            prop_assert_eq!(*gx, if *v > 0.0 { 1.0 } else { 0.0 });
        }
        for (o, v) in g.value(y).iter().zip(store.get(x).data()) {
            prop_assert_eq!(*o, v.max(0.0));
        }
    }
}

fn lstm_unroll(cell: &LstmCell, s: &ParamStore, g: &mut Graph, xs: ParamId, hidden: usize) -> varbranch::nn::Result<Var> {
    let mut h = g.constant(&Tensor::zeros(vec![1, hidden]))?;
    let mut c = g.constant(&Tensor::zeros(vec![1, hidden]))?;
    let seq = g.param(s, xs)?;
    let mut outs = Vec::new();
    for t in 0..3 {
        let xt = g.slice_rows(seq, t, 1)?;
        (h, c) = cell.step(g, s, xt, h, c)?;
        outs.push(h);
    }
    let all = g.concat_rows(&outs)?;
    Ok(project(g, all, 3))
}

#[test]
fn lstm_three_step_unroll_matches_finite_differences() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "l", 3, 4, &mut rng).unwrap();
        let xs = store.register("xs", random(&mut rng, vec![3, 3])).unwrap();
        let err = check(&mut store, |s, g| lstm_unroll(&cell, s, g, xs, 4));
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

fn conv_stack_loss(seed: u64) -> (ParamStore, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let conv = Conv2d::new(&mut store, "c", 2, 3, 3, 1, 1, &mut rng).unwrap();
    let bn = BatchNorm::new(&mut store, "bn", 3).unwrap();
    let x = random(&mut rng, vec![2, 2, 4, 4]);
    let mut g = Graph::new();
    let xv = g.constant(&x).unwrap();
    let y = conv.forward(&mut g, &store, xv).unwrap();
    let y = bn.forward(&mut g, &store, y, BnMode::Train, &mut RunningStats::new(3)).unwrap();
    let y = g.relu(y).unwrap();
    let loss = project(&mut g, y, seed);
    let a = g.backward(loss).unwrap();
    let b = g.backward(loss).unwrap();
    for id in store.ids() {
        assert_eq!(a.param(id), b.param(id), "repeated backward differs");
    }
    let grads = store.ids().map(|id| a.param(id).unwrap().to_vec()).collect();
    (store, grads)
}

#[test]
fn backward_is_deterministic_across_graphs() {
    for seed in 0..5 {
        let (_, first) = conv_stack_loss(seed);
        let (_, second) = conv_stack_loss(seed);
        assert_eq!(first, second);
    }
}

#[test]
fn per_sample_batchnorm_equals_sequential_single_sample_calls() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let bn = BatchNorm::new(&mut store, "bn", 3).unwrap();
    store.get_mut(bn.gamma).data_mut().copy_from_slice(&[0.5, 1.5, -1.0]);
    let x = random(&mut rng, vec![4, 3, 2, 3]);

    let mut batched_stats = RunningStats::new(3);
    let mut g = Graph::new();
    let xv = g.constant(&x).unwrap();
    let y = bn.forward(&mut g, &store, xv, BnMode::TrainPerSample, &mut batched_stats).unwrap();
    let batched = g.value(y).to_vec();

    let mut seq_stats = RunningStats::new(3);
    let per = x.len() / 4;
    let mut sequential = Vec::new();
    for n in 0..4 {
        let sample = Tensor::new(vec![1, 3, 2, 3], x.data()[n * per..(n + 1) * per].to_vec()).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(&sample).unwrap();
        let y = bn.forward(&mut g, &store, xv, BnMode::Train, &mut seq_stats).unwrap();
        sequential.extend_from_slice(g.value(y));
    }
    for (a, b) in batched.iter().zip(&sequential) {
        assert!((a - b).abs() <= 1e-14, "{a} vs {b}");
    }
    for (a, b) in batched_stats.mean.iter().chain(&batched_stats.var).zip(seq_stats.mean.iter().chain(&seq_stats.var)) {
        assert!((a - b).abs() <= 1e-15);
    }
}
