//! Central finite-difference checking of reverse-mode gradients.

use crate::error::{HslError, Result};
use crate::graph::Gradients;
use crate::params::ParamStore;

/// Outcome of one evaluation of the function under test: the scalar value,
/// plus gradients when they were requested.
pub type EvalOutput = (f64, Option<Gradients>);

/// Compare analytic gradients against central finite differences for every
/// element of every parameter in the store.
///
/// `eval(store, with_grad)` must rebuild the computation from scratch on the
/// current store values; the closure is the implementation under test, the
/// differences are the oracle. Returns the maximum over all elements of
/// |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
pub fn grad_check<F>(store: &mut ParamStore, step: f64, mut eval: F) -> Result<f64>
where
    F: FnMut(&ParamStore, bool) -> Result<EvalOutput>,
{
    if !(1e-6..=1e-4).contains(&step) {
        return Err(HslError::Config(format!(
            "finite-difference step {step} outside [1e-6, 1e-4]"
        )));
    }
    let (base, grads) = eval(store, true)?;
    if !base.is_finite() {
        return Err(HslError::NonFinite { op: "grad_check" });
    }
    let grads = grads.ok_or_else(|| {
        HslError::Config("grad_check eval returned no gradients when asked for them".into())
    })?;

    let mut max_rel = 0.0f64;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let numel = store.entry(id).data.len();
        for i in 0..numel {
            let orig = store.entry(id).data[i];
            store.data_mut(id)[i] = orig + step;
            let (plus, _) = eval(store, false)?;
            store.data_mut(id)[i] = orig - step;
            let (minus, _) = eval(store, false)?;
            store.data_mut(id)[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(HslError::NonFinite { op: "grad_check" });
            }
            let numeric = (plus - minus) / (2.0 * step);
            let analytic = grads.get(id).map_or(0.0, |t| t.data()[i]);
            let rel = (analytic - numeric).abs() / f64::max(1e-8, analytic.abs() + numeric.abs());
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
