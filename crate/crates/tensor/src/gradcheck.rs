//! Central finite-difference verification of tape gradients.

use crate::{Graph, ParamStore, Var};

/// Gradients smaller than this are compared in absolute rather than
/// relative terms; below it the finite-difference round-off dominates.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares the reverse-mode gradient of the scalar built by `build`
/// against `(f(p + eps) - f(p - eps)) / 2 eps` for parameter entries.
///
/// `max_per_param` limits how many evenly spaced entries of each parameter
/// are probed; `None` checks every entry.
pub fn grad_check<F>(store: &mut ParamStore, eps: f64, max_per_param: Option<usize>, build: F) -> GradCheckReport
where
    F: Fn(&mut Graph) -> Var,
{
    let analytic = {
        let mut g = Graph::new(store);
        let loss = build(&mut g);
        g.backward(loss).into_params()
    };
    let eval = |store: &ParamStore| {
        let mut g = Graph::new(store);
        let loss = build(&mut g);
        g.value(loss).data()[0]
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for id in 0..store.len() {
        let len = store.get(id).len();
        let stride = match max_per_param {
            Some(m) if m > 0 && len > m => len.div_ceil(m),
            _ => 1,
        };
        for j in (0..len).step_by(stride) {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + eps;
            let plus = eval(store);
            store.get_mut(id).data_mut()[j] = orig - eps;
            let minus = eval(store);
            store.get_mut(id).data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[id].as_ref().map_or(0.0, |g| g.data()[j]);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = err;
                report.worst_param = store.name(id).to_string();
                report.worst_index = j;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    report
}
