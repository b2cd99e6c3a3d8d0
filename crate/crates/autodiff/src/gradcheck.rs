//! Central finite-difference oracle for testing analytic gradients.

use crate::params::{ParamGrads, ParamStore};
use crate::tensor::Tensor;

/// Outcome of comparing analytic and numeric derivatives.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

/// Relative error with an absolute floor so that derivatives that are zero in
/// both routes compare equal. Central differences at `h = 1e-5` carry about
/// `1e-11` of roundoff, so the floor sits well above that.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-6)
}

/// Checks up to `per_param` entries of every parameter (spread evenly) by
/// perturbing them by `+-h` and re-evaluating `loss`.
pub fn check_params(
    store: &mut ParamStore<f64>,
    grads: &ParamGrads<f64>,
    per_param: usize,
    h: f64,
    mut loss: impl FnMut(&ParamStore<f64>) -> f64,
) -> GradCheckReport {
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.get(id).len();
        let zero = Tensor::zeros(store.get(id).rows(), store.get(id).cols());
        let analytic = grads.get(id).cloned().unwrap_or(zero);
        let stride = (n / per_param.max(1)).max(1);
        for e in (0..n).step_by(stride).take(per_param) {
            let orig = store.get(id).data()[e];
            store.get_mut(id).data_mut()[e] = orig + h;
            let lp = loss(store);
            store.get_mut(id).data_mut()[e] = orig - h;
            let lm = loss(store);
            store.get_mut(id).data_mut()[e] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic.data()[e];
            let r = rel_err(a, numeric);
            report.checked += 1;
            if r > report.max_rel_err {
                report.max_rel_err = r;
                report.worst = format!(
                    "{}[{e}]: analytic {a:.6e} numeric {numeric:.6e}",
                    store.name(id)
                );
            }
        }
    }
    report
}

/// Numeric gradient of `loss` w.r.t. every entry of `x`.
pub fn numeric_grad(x: &Tensor<f64>, h: f64, mut loss: impl FnMut(&Tensor<f64>) -> f64) -> Tensor<f64> {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for e in 0..x.len() {
        let orig = probe.data()[e];
        probe.data_mut()[e] = orig + h;
        let lp = loss(&probe);
        probe.data_mut()[e] = orig - h;
        let lm = loss(&probe);
        probe.data_mut()[e] = orig;
        out.data_mut()[e] = (lp - lm) / (2.0 * h);
    }
    out
}
