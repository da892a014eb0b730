use super::params::ParamStore;
use crate::error::{HvqError, Result};

/// Step used by [`finite_diff_check`] unless a caller picks another.
pub const DEFAULT_FD_EPS: f64 = 1e-5;

/// Compares analytic gradients with central differences.
///
/// `loss_fn` must return the loss for the current parameter values and leave
/// the analytic gradient in each parameter's `grad` buffer (it is responsible
/// for zeroing them first). Returns the largest relative error
/// `|a − n| / max(|a|, |n|, 1e-12)` over all parameter entries. Parameter
/// values are restored before returning.
pub fn finite_diff_check<F>(params: &mut ParamStore, eps: f64, mut loss_fn: F) -> Result<f64>
where
    F: FnMut(&mut ParamStore) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(HvqError::Config(format!("finite-difference step must be positive, got {eps}")));
    }
    let base = loss_fn(params)?;
    if !base.is_finite() {
        return Err(HvqError::NonFinite(format!("loss at unperturbed parameters is {base}")));
    }
    let analytic: Vec<Vec<f64>> = params.params.iter().map(|p| p.grad.clone()).collect();
    let mut worst: f64 = 0.0;
    for pi in 0..params.params.len() {
        for i in 0..params.params[pi].len() {
            let orig = params.params[pi].value[i];
            params.params[pi].value[i] = orig + eps;
            let plus = loss_fn(params)?;
            params.params[pi].value[i] = orig - eps;
            let minus = loss_fn(params)?;
            params.params[pi].value[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(HvqError::NonFinite(format!(
                    "loss became non-finite perturbing {}[{i}]",
                    params.params[pi].name
                )));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi][i];
            let denom = a.abs().max(numeric.abs()).max(1e-12);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    // leave the analytic gradient in place for callers that inspect it
    for (p, g) in params.params.iter_mut().zip(analytic) {
        p.grad = g;
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::params::Param;

    #[test]
    fn quadratic_is_exact() {
        let mut store = ParamStore::new();
        store.push(Param::new("w", vec![4], vec![0.3, -1.2, 2.0, 0.01]));
        store.push(Param::new("b", vec![2], vec![5.0, -0.7]));
        let err = finite_diff_check(&mut store, DEFAULT_FD_EPS, |s| {
            let mut loss = 0.0;
            for p in &mut s.params {
                for (g, w) in p.grad.iter_mut().zip(&p.value) {
                    *g = *w;
                    loss += 0.5 * w * w;
                }
            }
            Ok(loss)
        })
        .unwrap();
        assert!(err < 1e-8, "relative error {err}");
    }

    #[test]
    fn empty_store_is_zero() {
        let mut store = ParamStore::new();
        let err = finite_diff_check(&mut store, DEFAULT_FD_EPS, |_| Ok(1.0)).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let mut store = ParamStore::new();
        store.push(Param::new("w", vec![1], vec![1.0]));
        let err = finite_diff_check(&mut store, DEFAULT_FD_EPS, |_| Ok(f64::NAN)).unwrap_err();
        assert!(matches!(err, HvqError::NonFinite(_)));
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let mut store = ParamStore::new();
        store.push(Param::new("w", vec![1], vec![2.0]));
        let err = finite_diff_check(&mut store, DEFAULT_FD_EPS, |s| {
            let w = s.params[0].value[0];
            s.params[0].grad[0] = 3.0 * w; // true gradient is 2w
            Ok(w * w)
        })
        .unwrap();
        assert!(err > 0.3);
    }
}
