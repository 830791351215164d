//! Central finite-difference gradient checking.

use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::NnError;

/// Default step.
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Parameter name and index of the worst entry.
    pub worst: Option<(String, usize)>,
}

/// Relative error `|a − n| / max(|a|, |n|, floor)`. The floor keeps
/// near-zero gradients from turning round-off into large ratios.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare tape gradients of `loss_fn` with central differences for every
/// scalar of every parameter in `store` (or at most `max_per_param` evenly
/// spaced entries per parameter).
pub fn check<F>(store: &mut ParamStore, loss_fn: F, max_per_param: Option<usize>) -> Result<GradCheckReport, NnError>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var, NnError>,
{
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, store)?;
    let grads = tape.backward(loss)?;
    let eval = |store: &ParamStore| -> Result<f64, NnError> {
        let mut t = Tape::new();
        let l = loss_fn(&mut t, store)?;
        Ok(t.value(l).item())
    };
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let g = grads.get(store, id);
        let n = g.len();
        let stride = match max_per_param {
            Some(m) if m > 0 && n > m => n / m,
            _ => 1,
        };
        for k in (0..n).step_by(stride) {
            let orig = store.get(id).data[k];
            store.get_mut(id).data[k] = orig + FD_STEP;
            let up = eval(store)?;
            store.get_mut(id).data[k] = orig - FD_STEP;
            let down = eval(store)?;
            store.get_mut(id).data[k] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let e = rel_err(g.data[k], numeric, 1e-3);
            report.checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = Some((store.name(id).to_string(), k));
            }
        }
    }
    Ok(report)
}
