use crate::numkit::matrix::{dot, norm};
use crate::numkit::rng::Rng;
use crate::{ensure, Error, Result};

pub const DEFAULT_POWER_ITERS: usize = 50;
pub const DEFAULT_POWER_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PowerEstimate {
    /// Rayleigh quotient at the last iterate (signed).
    pub eigval: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Dominant eigenvalue of a symmetric operator given only `v ↦ Hv`.
///
/// Starts from a random unit vector, keeps the iterate unit-norm and stops once
/// two successive Rayleigh quotients differ by less than `tol`.
pub fn power_iteration<F>(mut oracle: F, dim: usize, iters: usize, tol: f64, rng: &mut Rng) -> Result<PowerEstimate>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    ensure!(dim >= 1, Contract, "power iteration needs dim >= 1");
    ensure!(iters >= 1, Contract, "power iteration needs iters >= 1");
    ensure!(tol > 0.0, Contract, "power iteration needs tol > 0");

    let mut v = rng.gaussian_vec(dim);
    let n0 = norm(&v);
    v.iter_mut().for_each(|x| *x /= n0);

    let mut prev: Option<f64> = None;
    let mut eigval = 0.0;
    for k in 1..=iters {
        let hv = oracle(&v)?;
        ensure!(hv.len() == dim, Dimension, "operator returned {} entries for dim {dim}", hv.len());
        if hv.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("operator returned a non-finite vector".into()));
        }
        eigval = dot(&v, &hv);
        let converged = prev.is_some_and(|p| (eigval - p).abs() < tol);
        let hn = norm(&hv);
        if hn == 0.0 {
            // v lies in the null space; the dominant magnitude seen along it is zero.
            return Ok(PowerEstimate {
                eigval,
                converged: true,
                iterations: k,
            });
        }
        if converged {
            return Ok(PowerEstimate {
                eigval,
                converged: true,
                iterations: k,
            });
        }
        prev = Some(eigval);
        v = hv.into_iter().map(|x| x / hn).collect();
    }
    Ok(PowerEstimate {
        eigval,
        converged: false,
        iterations: iters,
    })
}
