use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, NnError, ParamStore, Result, Var};

/// Central finite-difference comparison settings.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub eps: f64,
    /// Denominator floor of the relative error, so that near-zero gradients are
    /// compared absolutely.
    pub floor: f64,
    /// Check at most this many randomly chosen entries per tensor.
    pub max_entries_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { eps: 1e-6, floor: 1e-3, max_entries_per_tensor: None, seed: 0 }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Entries whose discrepancy is explained by a kink (ReLU, clamp or max switch)
    /// inside the difference stencil; they are excluded from `max_rel_error`.
    pub kinks: usize,
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compares the taped gradient of `f` with central differences over the
/// parameters in `store`. `f` must rebuild the loss from scratch on each call.
pub fn gradient_check<F>(store: &mut ParamStore, opts: &GradCheck, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, &mut Graph) -> Result<Var>,
{
    if !(opts.eps > 0.0) {
        return Err(NnError::Contract("gradient_check: eps must be positive".into()));
    }
    let mut g = Graph::new();
    let loss = f(store, &mut g)?;
    let f0 = g.scalar(loss);
    let grads = g.backward(loss)?;
    let analytic: Vec<Vec<f64>> =
        store.ids().map(|id| grads.param(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; store.get(id).len()])).collect();
    drop(g);

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let l = f(store, &mut g)?;
        Ok(g.scalar(l))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let ids: Vec<_> = store.ids().collect();
    for (t, id) in ids.into_iter().enumerate() {
        let len = store.get(id).len();
        let entries: Vec<usize> = match opts.max_entries_per_tensor {
            Some(k) if k < len => sample(&mut rng, len, k).into_vec(),
            _ => (0..len).collect(),
        };
        for j in entries {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + opts.eps;
            let fp = eval(store)?;
            store.get_mut(id).data_mut()[j] = orig - opts.eps;
            let fm = eval(store)?;
            store.get_mut(id).data_mut()[j] = orig;

            let numeric = (fp - fm) / (2.0 * opts.eps);
            let a = analytic[t][j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            let one_sided_gap = ((fp - f0) - (f0 - fm)).abs() / opts.eps;
            if err > 1e-6 && one_sided_gap >= (a - numeric).abs() {
                report.kinks += 1;
                continue;
            }
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.name(id).to_string(), j, a, numeric));
            }
        }
    }
    Ok(report)
}
