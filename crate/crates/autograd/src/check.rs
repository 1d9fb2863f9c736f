//! Central finite-difference comparison against analytic gradients.

use std::collections::BTreeMap;

use rand::Rng;

use crate::{ParamId, ParamStore, Tensor};

/// Relative error with a floor on the denominator.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub probes: usize,
    pub max_rel_err: f64,
    /// Largest analytic magnitude seen, to rule out vacuous passes.
    pub max_abs_grad: f64,
}

fn probe_indices(len: usize, n: usize, rng: &mut impl Rng) -> Vec<usize> {
    if len <= n {
        (0..len).collect()
    } else {
        (0..n).map(|_| rng.gen_range(0..len)).collect()
    }
}

/// Checks `analytic[id]` against `(f(p + h) - f(p - h)) / 2h` at up to
/// `per_param` coordinates of each listed parameter. Parameters missing
/// from `analytic` are treated as having zero gradient.
pub fn check_params(
    store: &ParamStore,
    ids: &[ParamId],
    analytic: &BTreeMap<ParamId, Tensor>,
    per_param: usize,
    h: f64,
    rng: &mut impl Rng,
    f: impl Fn(&ParamStore) -> f64,
) -> CheckReport {
    let mut report = CheckReport {
        probes: 0,
        max_rel_err: 0.0,
        max_abs_grad: 0.0,
    };
    let mut work = store.clone();
    for &id in ids {
        for i in probe_indices(store.get(id).len(), per_param, rng) {
            let orig = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + h;
            let fp = f(&work);
            work.get_mut(id).data_mut()[i] = orig - h;
            let fm = f(&work);
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.get(&id).map_or(0.0, |t| t.data()[i]);
            report.probes += 1;
            report.max_rel_err = report.max_rel_err.max(rel_err(a, numeric));
            report.max_abs_grad = report.max_abs_grad.max(a.abs());
        }
    }
    report
}

/// Same check for the gradient of `f` with respect to an input tensor.
pub fn check_input(
    x: &Tensor,
    analytic: &Tensor,
    probes: usize,
    h: f64,
    rng: &mut impl Rng,
    f: impl Fn(&Tensor) -> f64,
) -> CheckReport {
    let mut report = CheckReport {
        probes: 0,
        max_rel_err: 0.0,
        max_abs_grad: 0.0,
    };
    let mut work = x.clone();
    for i in probe_indices(x.len(), probes, rng) {
        let orig = x.data()[i];
        work.data_mut()[i] = orig + h;
        let fp = f(&work);
        work.data_mut()[i] = orig - h;
        let fm = f(&work);
        work.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.data()[i];
        report.probes += 1;
        report.max_rel_err = report.max_rel_err.max(rel_err(a, numeric));
        report.max_abs_grad = report.max_abs_grad.max(a.abs());
    }
    report
}
