//! Central finite-difference gradient checking.
//!
//! The numeric gradient is produced purely by re-evaluating a loss closure
//! at perturbed parameter values, so it shares no code with the tape's
//! backward pass and can serve as an independent oracle for it.

use super::tensor::{ParamId, ParamStore};

/// Worst-case relative error found by a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
}

/// Central finite differences for one parameter tensor: component `i` gets
/// `(f(theta + h e_i) - f(theta - h e_i)) / 2h`.
pub fn finite_diff_grad(
    store: &mut ParamStore,
    id: ParamId,
    h: f64,
    loss: &mut dyn FnMut(&ParamStore) -> f64,
) -> Vec<f64> {
    let n = store.get(id).numel();
    let mut out = vec![0.0; n];
    for i in 0..n {
        let orig = store.get(id).data()[i];
        store.get_mut(id).data_mut()[i] = orig + h;
        let up = loss(store);
        store.get_mut(id).data_mut()[i] = orig - h;
        let down = loss(store);
        store.get_mut(id).data_mut()[i] = orig;
        out[i] = (up - down) / (2.0 * h);
    }
    out
}

/// Relative error with an absolute floor of 1, so near-zero gradients are
/// compared absolutely instead of blowing up the ratio.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Compare already-populated analytic gradients in the store against
/// finite differences over the given parameters.
pub fn compare_grads(
    store: &mut ParamStore,
    ids: &[ParamId],
    h: f64,
    loss: &mut dyn FnMut(&ParamStore) -> f64,
) -> GradCheck {
    let mut check = GradCheck {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
    };
    for &id in ids {
        let numeric = finite_diff_grad(store, id, h, loss);
        let analytic: Vec<f64> = match store.get(id).grad() {
            Some(g) => g.to_vec(),
            None => vec![0.0; numeric.len()],
        };
        for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
            let e = rel_err(a, n);
            if e > check.max_rel_err {
                check.max_rel_err = e;
                check.worst_param = store.name(id).to_string();
                check.worst_index = i;
            }
        }
    }
    check
}
