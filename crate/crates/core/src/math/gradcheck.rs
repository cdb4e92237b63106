//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};

/// Worst relative error between an analytic gradient and central finite
/// differences of `f`, using denominator max(|analytic|, |numeric|, 1e-8).
///
/// `theta` and `analytic` are flattened parameter/gradient vectors in the
/// same order; `f` evaluates the scalar objective at a parameter vector.
pub fn grad_check<F>(mut f: F, theta: &[f64], analytic: &[f64], eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "gradcheck eps {eps} outside [1e-6, 1e-3]"
        )));
    }
    if theta.len() != analytic.len() {
        return Err(Error::dim("grad_check", "theta/analytic length mismatch"));
    }
    let mut work = theta.to_vec();
    let mut worst = 0.0f64;
    for i in 0..work.len() {
        let orig = work[i];
        work[i] = orig + eps;
        let up = f(&work);
        work[i] = orig - eps;
        let down = f(&work);
        work[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        let rel = (analytic[i] - numeric).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}
