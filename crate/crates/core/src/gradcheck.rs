//! Central finite-difference verification of tape gradients.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Grads, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::ParamStore;

/// Worst disagreement found by [`gradcheck`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradcheckReport {
    pub fn within(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Compares the tape gradient of `loss_fn` with `(f(p+eps) - f(p-eps)) / 2eps`
/// for every scalar in `params`.
///
/// `loss_fn` receives a fresh tape and the parameter handles in store order
/// and must return a scalar.
pub fn gradcheck<F>(params: &ParamStore, eps: f64, loss_fn: F) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    gradcheck_with(params, eps, loss_fn, |_| {})
}

/// [`gradcheck`] with a hook that may alter the analytic gradients before
/// comparison. Used to confirm that a broken gradient is actually caught.
pub fn gradcheck_with<F, H>(
    params: &ParamStore,
    eps: f64,
    loss_fn: F,
    tamper: H,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    H: FnOnce(&mut Grads),
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::config("gradcheck eps must be positive"));
    }
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = tape.bind(store);
        let loss = loss_fn(&mut tape, &vars)?;
        Ok(tape.scalar(loss))
    };

    let mut tape = Tape::new();
    let vars = tape.bind(params);
    let loss = loss_fn(&mut tape, &vars)?;
    let mut grads = tape.backward(loss)?;
    tamper(&mut grads);

    let mut probe = params.clone();
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_element: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for i in 0..params.len() {
        let n = params.tensor(i).len();
        let analytic: Vec<f64> = grads.get(i).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n]);
        for (j, &a) in analytic.iter().enumerate() {
            let orig = params.tensor(i).data()[j];
            probe.tensor_mut(i).data_mut()[j] = orig + eps;
            let plus = eval(&probe)?;
            probe.tensor_mut(i).data_mut()[j] = orig - eps;
            let minus = eval(&probe)?;
            probe.tensor_mut(i).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = err;
                report.worst_param = String::from(params.name(i));
                report.worst_element = j;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::full(&[1], 3.0)).unwrap();
        let r = gradcheck(&s, 1e-4, |t, v| {
            let sq = t.mul(v[0], v[0])?;
            Ok(t.sum(sq))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        assert!((r.analytic - 6.0).abs() < 1e-12);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::full(&[2], 1.5)).unwrap();
        let r = gradcheck(&s, 1e-4, |t, _| t.constant_from(&[1], alloc::vec![4.0])).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert_eq!((r.analytic, r.numeric), (0.0, 0.0));
    }

    #[test]
    fn tampered_gradient_is_detected() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::full(&[1], 3.0)).unwrap();
        let r = gradcheck_with(
            &s,
            1e-4,
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum(sq))
            },
            |g| g.get_mut(0).unwrap()[0] += 1.0,
        )
        .unwrap();
        assert!(!r.within(1e-4));
        assert_eq!(r.worst_param, "w");
    }
}
