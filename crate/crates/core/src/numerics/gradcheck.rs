//! Central finite-difference oracle for checking analytic gradients.
//!
//! The oracle only ever evaluates the objective; it never touches the tape's
//! backward path.

use super::{ParamId, ParamStore, Tensor};

/// Outcome of comparing analytic and numerical gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error <= tol
    }
}

/// Relative error with a small absolute floor so that gradients which are
/// both essentially zero do not blow up the ratio.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Central difference `(f(x+h) - f(x-h)) / 2h` of a scalar function of a
/// tensor, coordinate by coordinate.
pub fn numeric_gradient(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    out
}

/// Compares `analytic` gradients of every parameter in `store` against central
/// differences of `objective`. At most `max_per_param` coordinates are probed
/// per parameter, spread evenly across it.
pub fn check_params(
    store: &ParamStore,
    analytic: &dyn Fn(ParamId) -> Option<Tensor>,
    objective: &mut dyn FnMut(&ParamStore) -> f64,
    h: f64,
    max_per_param: usize,
) -> GradCheckReport {
    let mut probe = store.clone();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let n = store.value(id).len();
        let grad = analytic(id).unwrap_or_else(|| Tensor::zeros(store.value(id).shape()));
        let stride = (n / max_per_param.max(1)).max(1);
        for i in (0..n).step_by(stride).take(max_per_param) {
            let orig = store.value(id).data()[i];
            probe.get_mut(id).value.data_mut()[i] = orig + h;
            let plus = objective(&probe);
            probe.get_mut(id).value.data_mut()[i] = orig - h;
            let minus = objective(&probe);
            probe.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[i];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((store.get(id).name.clone(), i, a, numeric));
            }
        }
    }
    report
}
