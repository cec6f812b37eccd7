//! Finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::params::{GradSet, ParamSet};
use crate::scalar::Scalar;

/// Max relative error between the gradients reported by `f` and central
/// finite differences of its loss, over every entry of every parameter.
/// Relative error is |a − n| / max(1e-8, |a| + |n|). `f` must be
/// deterministic: it is evaluated twice at the base point and must return
/// bit-identical losses, so any sampling inside must come from fixed
/// streams.
pub fn grad_check<S, F>(f: F, params: &ParamSet<S>, eps: S) -> Result<S>
where
    S: Scalar,
    F: Fn(&ParamSet<S>) -> Result<(S, GradSet<S>)>,
{
    if eps <= S::zero() {
        return Err(Error::Contract("grad_check eps must be positive".into()));
    }
    let (base1, grads) = f(params)?;
    let (base2, _) = f(params)?;
    if base1 != base2 {
        return Err(Error::Contract(
            "grad_check function is not deterministic at the base point".into(),
        ));
    }
    let floor = S::from_f64_lossy(1e-8);
    let two = S::from_f64_lossy(2.0);
    let mut worst = S::zero();
    let names: Vec<String> = params.names().map(|s| s.to_string()).collect();
    let mut work = params.clone();
    for name in &names {
        let n_entries = params.get(name)?.len();
        for idx in 0..n_entries {
            let orig = params.get(name)?.as_slice()[idx];
            work.get_mut(name)?.as_mut_slice()[idx] = orig + eps;
            let (up, _) = f(&work)?;
            work.get_mut(name)?.as_mut_slice()[idx] = orig - eps;
            let (down, _) = f(&work)?;
            work.get_mut(name)?.as_mut_slice()[idx] = orig;
            let numeric = (up - down) / (two * eps);
            let analytic = grads
                .get(name.as_str())
                .map(|g| g.as_slice()[idx])
                .unwrap_or_else(S::zero);
            let denom = floor.max(analytic.abs() + numeric.abs());
            let rel = (analytic - numeric).abs() / denom;
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
