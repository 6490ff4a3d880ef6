//! Central-difference gradients and Hessian-vector products.

use crate::numkit::params::ParamVector;
use crate::{ensure, Error, Result};

/// Central-difference gradient: entry `i` is `(L(θ+h·eᵢ) − L(θ−h·eᵢ)) / 2h`.
pub fn finite_diff_grad<F>(loss_fn: F, params: &ParamVector, step: f64) -> Result<ParamVector>
where
    F: Fn(&ParamVector) -> f64,
{
    ensure!(step > 0.0, Contract, "finite-difference step must be positive, got {step}");
    let mut probe = params.clone();
    let mut grad = params.zeros_like();
    for i in 0..params.len() {
        let orig = probe.values()[i];
        probe.values_mut()[i] = orig + step;
        let up = loss_fn(&probe);
        probe.values_mut()[i] = orig - step;
        let down = loss_fn(&probe);
        probe.values_mut()[i] = orig;
        ensure!(
            up.is_finite() && down.is_finite(),
            Numeric,
            "non-finite loss while probing coordinate {i}"
        );
        grad.values_mut()[i] = (up - down) / (2.0 * step);
    }
    Ok(grad)
}

/// Step used for Hessian-vector products at `θ`: `1e-5·(1+‖θ‖∞)`.
pub fn default_hvp_step(params: &[f64]) -> f64 {
    let inf = params.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    1e-5 * (1.0 + inf)
}

/// Hessian-vector product by central differences of an analytic gradient:
/// `(∇L(θ+h·v̂) − ∇L(θ−h·v̂))·‖v‖/(2h)` with `v̂ = v/‖v‖`.
pub fn hvp<G>(grad_fn: G, params: &ParamVector, v: &ParamVector, step: f64) -> Result<ParamVector>
where
    G: Fn(&ParamVector) -> Result<ParamVector>,
{
    let out = hvp_slice(
        |theta: &[f64]| {
            let p = params.with_values(theta.to_vec())?;
            Ok(grad_fn(&p)?.into_values())
        },
        params.values(),
        v.values(),
        step,
    )?;
    params.with_values(out)
}

/// Slice form of [`hvp`].
pub fn hvp_slice<G>(grad_fn: G, theta: &[f64], v: &[f64], step: f64) -> Result<Vec<f64>>
where
    G: Fn(&[f64]) -> Result<Vec<f64>>,
{
    ensure!(step > 0.0, Contract, "hvp step must be positive, got {step}");
    ensure!(theta.len() == v.len(), Dimension, "θ has {} entries, v has {}", theta.len(), v.len());
    let vnorm = crate::numkit::matrix::norm(v);
    ensure!(vnorm > 0.0, Contract, "hvp direction must be nonzero");
    let plus: Vec<f64> = theta.iter().zip(v).map(|(t, d)| t + step * d / vnorm).collect();
    let minus: Vec<f64> = theta.iter().zip(v).map(|(t, d)| t - step * d / vnorm).collect();
    let gp = grad_fn(&plus)?;
    let gm = grad_fn(&minus)?;
    ensure!(gp.len() == theta.len() && gm.len() == theta.len(), Dimension, "gradient length mismatch");
    let c = vnorm / (2.0 * step);
    let out: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) * c).collect();
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite Hessian-vector product".into()));
    }
    Ok(out)
}

/// `‖a − b‖∞ / max(‖b‖∞, 1e-12)`: the norm-wise relative error used by every
/// gradient check in the crate.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "compared vectors must have equal length");
    let diff = a.iter().zip(b).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()));
    let scale = b.iter().fold(0.0_f64, |m, y| m.max(y.abs())).max(1e-12);
    diff / scale
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{Matrix, Rng};

    fn pv(values: &[f64]) -> ParamVector {
        ParamVector::from_matrices([(
            "theta".to_string(),
            &Matrix::from_vec(1, values.len(), values.to_vec()).unwrap(),
        )])
    }

    #[test]
    fn quadratic_gradient() {
        let g = finite_diff_grad(|p| 0.5 * p.dot(p), &pv(&[1.0, 2.0]), 1e-5).unwrap();
        assert!((g.values()[0] - 1.0).abs() < 1e-8);
        assert!((g.values()[1] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let g = finite_diff_grad(|_| 3.5, &pv(&[1.0, -2.0, 0.3]), 1e-5).unwrap();
        assert!(g.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_positive_step_and_nan_loss_are_errors() {
        assert!(finite_diff_grad(|_| 0.0, &pv(&[1.0]), 0.0).is_err());
        assert!(matches!(
            finite_diff_grad(|_| f64::NAN, &pv(&[1.0]), 1e-5).unwrap_err(),
            Error::Numeric(_)
        ));
    }

    fn sym(n: usize, rng: &mut Rng) -> Vec<f64> {
        let g = rng.gaussian_vec(n * n);
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                m[i * n + j] = 0.5 * (g[i * n + j] + g[j * n + i]);
            }
        }
        m
    }

    fn matvec(m: &[f64], v: &[f64]) -> Vec<f64> {
        let n = v.len();
        (0..n).map(|i| (0..n).map(|j| m[i * n + j] * v[j]).sum()).collect()
    }

    #[test]
    fn quadratic_hvp_is_exact_and_linear() {
        let mut rng = Rng::new(8);
        let n = 5;
        let m = sym(n, &mut rng);
        let theta = rng.gaussian_vec(n);
        let v = rng.gaussian_vec(n);
        let grad = |t: &[f64]| Ok(matvec(&m, t));
        let hv = hvp_slice(grad, &theta, &v, default_hvp_step(&theta)).unwrap();
        let expect = matvec(&m, &v);
        for (a, b) in hv.iter().zip(&expect) {
            assert!((a - b).abs() <= 1e-8);
        }
        let v3: Vec<f64> = v.iter().map(|x| -3.0 * x).collect();
        let hv3 = hvp_slice(grad, &theta, &v3, default_hvp_step(&theta)).unwrap();
        for (a, b) in hv3.iter().zip(&hv) {
            assert!((a + 3.0 * b).abs() <= 1e-8);
        }
    }

    #[test]
    fn zero_direction_is_rejected() {
        let grad = |t: &[f64]| Ok(t.to_vec());
        assert!(matches!(
            hvp_slice(grad, &[1.0, 2.0], &[0.0, 0.0], 1e-5).unwrap_err(),
            Error::Contract(_)
        ));
    }

    #[test]
    fn cubic_hvp_matches_double_difference_hessian() {
        // L(θ) = Σ c_ijk θ_i θ_j θ_k / 6 + ½ θᵀ M θ on six parameters.
        let n = 6;
        let mut rng = Rng::new(31);
        let c = rng.gaussian_vec(n * n * n);
        let m = sym(n, &mut rng);
        let loss = |t: &[f64]| -> f64 {
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..n {
                    for k in 0..n {
                        s += c[(i * n + j) * n + k] * t[i] * t[j] * t[k];
                    }
                }
            }
            s / 6.0 + 0.5 * crate::numkit::matrix::dot(t, &matvec(&m, t))
        };
        // Analytic gradient of the cubic term, symmetrised over index positions.
        let grad = |t: &[f64]| -> Result<Vec<f64>> {
            let mut g = matvec(&m, t);
            for (a, ga) in g.iter_mut().enumerate() {
                let mut s = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        s += (c[(a * n + i) * n + j] + c[(i * n + a) * n + j] + c[(i * n + j) * n + a]) * t[i] * t[j];
                    }
                }
                *ga += s / 6.0;
            }
            Ok(g)
        };
        let theta = rng.gaussian_vec(n);
        let v = rng.gaussian_vec(n);
        let hv = hvp_slice(grad, &theta, &v, default_hvp_step(&theta)).unwrap();

        // Dense Hessian assembled entry-wise from four loss evaluations each.
        let h = 1e-4;
        let mut dense = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let eval = |si: f64, sj: f64| {
                    let mut t = theta.clone();
                    t[i] += si * h;
                    t[j] += sj * h;
                    loss(&t)
                };
                dense[i * n + j] = (eval(1.0, 1.0) - eval(1.0, -1.0) - eval(-1.0, 1.0) + eval(-1.0, -1.0)) / (4.0 * h * h);
            }
        }
        let oracle = matvec(&dense, &v);
        let err = max_relative_error(&hv, &oracle);
        assert!(err <= 1e-3, "relative error {err}");
    }
}
