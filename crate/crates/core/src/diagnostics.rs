//! Smoothness instrumentation: gradient norms and scales, component scales,
//! rescaling factors, Hessian-norm estimates and the correlation verdict.

use crate::numkit::{hvp_slice, power_iteration, default_hvp_step, pearson, CorrelationResult, Matrix, ParamVector, Rng};
use crate::numkit::{DEFAULT_POWER_ITERS, DEFAULT_POWER_TOL};
use crate::trainers::{CompositeParts, Method, Objective, RunLog};
use crate::{ensure, Error, Result};

/// `√(‖gb‖² + ‖ga‖²)`.
pub fn grad_norm(gb: &Matrix, ga: &Matrix) -> f64 {
    (gb.data().iter().chain(ga.data()).map(|v| v * v).sum::<f64>()).sqrt()
}

/// `‖gb‖ + ‖ga‖`.
pub fn grad_scale(gb: &Matrix, ga: &Matrix) -> f64 {
    gb.frobenius_norm() + ga.frobenius_norm()
}

/// Splits a gradient into its two parameter groups: every `lora_b` (or
/// `weight`) segment, then every `lora_a` (or `bias`) segment.
pub fn parameter_groups(grad: &ParamVector) -> (Matrix, Matrix) {
    let (mut first, mut second) = (Vec::new(), Vec::new());
    for seg in grad.segments() {
        let vals = &grad.values()[seg.range()];
        if seg.name.ends_with("lora_b") || seg.name.ends_with("weight") {
            first.extend_from_slice(vals);
        } else {
            second.extend_from_slice(vals);
        }
    }
    let (n1, n2) = (first.len(), second.len());
    (
        Matrix::from_vec(1, n1, first).expect("row"),
        Matrix::from_vec(1, n2, second).expect("row"),
    )
}

pub fn grad_norm_of(grad: &ParamVector) -> f64 {
    let (b, a) = parameter_groups(grad);
    grad_norm(&b, &a)
}

pub fn grad_scale_of(grad: &ParamVector) -> f64 {
    let (b, a) = parameter_groups(grad);
    grad_scale(&b, &a)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RescaleFactors {
    pub f1: f64,
    pub f2: f64,
}

pub fn rescale_factors(l_ada: f64, g: f64, lambda: f64, delta: f64) -> Result<RescaleFactors> {
    ensure!(delta > 0.0, Contract, "stabiliser must be positive");
    let (f1, f2) = crate::trainers::rescale_pair(l_ada, g, lambda, delta);
    Ok(RescaleFactors { f1, f2 })
}

/// Scales of the adaptation path and the gain path of the composite gradient.
///
/// Sum form: `(scale(∇L_ada), scale(λ∇G))`; ratio form: the same with the
/// paths multiplied by `f1` and `f2`.
pub fn component_scales(parts: &CompositeParts, method: Method, lambda: f64, delta: f64) -> Result<(f64, f64)> {
    let (_, grad_g) = parts
        .gain
        .as_ref()
        .ok_or_else(|| Error::Contract(format!("{method} has no gain path")))?;
    let ada = grad_scale_of(&parts.grad_ada);
    let gain = lambda * grad_scale_of(grad_g);
    match method.objective() {
        Objective::Sum => Ok((ada, gain)),
        Objective::Ratio => {
            let g = parts.gain.as_ref().map(|(r, _)| r.g).unwrap_or(0.0);
            let f = rescale_factors(parts.l_ada, g, lambda, delta)?;
            Ok((f.f1 * ada, f.f2 * gain))
        }
        Objective::Plain => Err(Error::Contract(format!("{method} has no gain path"))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HessianEstimate {
    /// Dominant-eigenvalue magnitude.
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Dominant-eigenvalue magnitude of the Hessian of a loss whose gradient is
/// `grad_fn`, at `theta`, by power iteration over finite-difference HVPs.
pub fn hessian_norm<G>(grad_fn: G, theta: &[f64], iters: usize, tol: f64, rng: &mut Rng) -> Result<HessianEstimate>
where
    G: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let step = default_hvp_step(theta);
    let est = power_iteration(|v| hvp_slice(&grad_fn, theta, v, step), theta.len(), iters, tol, rng)?;
    Ok(HessianEstimate {
        value: est.eigval.abs(),
        converged: est.converged,
        iterations: est.iterations,
    })
}

pub fn hessian_norm_default<G>(grad_fn: G, theta: &[f64], rng: &mut Rng) -> Result<HessianEstimate>
where
    G: Fn(&[f64]) -> Result<Vec<f64>>,
{
    hessian_norm(grad_fn, theta, DEFAULT_POWER_ITERS, DEFAULT_POWER_TOL, rng)
}

/// Gradient norms and Hessian norms at the iterations where both were taken.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothnessSeries {
    pub method: Method,
    pub iters: Vec<usize>,
    pub grad_norms: Vec<f64>,
    pub hessian_norms: Vec<f64>,
}

impl SmoothnessSeries {
    pub fn from_log(log: &RunLog, method: Method) -> Self {
        let mut s = Self {
            method,
            iters: Vec::new(),
            grad_norms: Vec::new(),
            hessian_norms: Vec::new(),
        };
        for h in &log.hessian {
            if let Some(row) = log.rows.iter().find(|r| r.iter == h.iter) {
                s.iters.push(h.iter);
                s.grad_norms.push(row.grad_norm);
                s.hessian_norms.push(h.value);
            }
        }
        s
    }

    pub fn len(&self) -> usize {
        self.iters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iters.is_empty()
    }

    pub fn correlation(&self) -> Result<CorrelationResult> {
        ensure!(
            self.len() >= MIN_VERDICT_POINTS,
            Contract,
            "{} series has {} Hessian points, need {MIN_VERDICT_POINTS}",
            self.method,
            self.len()
        );
        pearson(&self.grad_norms, &self.hessian_norms)
    }
}

pub const MIN_VERDICT_POINTS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorrelationVerdict {
    pub mp: CorrelationResult,
    pub smp: CorrelationResult,
    /// `PCC_smp − PCC_mp`.
    pub gap: f64,
}

pub fn correlation_verdict(series_mp: &SmoothnessSeries, series_smp: &SmoothnessSeries) -> Result<CorrelationVerdict> {
    let mp = series_mp.correlation()?;
    let smp = series_smp.correlation()?;
    Ok(CorrelationVerdict {
        mp,
        smp,
        gap: smp.r - mp.r,
    })
}

/// Correlation of one series, as `key=value` lines prefixed by `tag`.
pub fn correlation_lines(tag: &str, c: &CorrelationResult) -> String {
    format!(
        "{tag}.pcc={:.16e}\n{tag}.p_value={:.16e}\n{tag}.n={}\n{tag}.p_below_0.05={}\n{tag}.p_below_0.001={}\n",
        c.r,
        c.p_value,
        c.n,
        c.p_value < 0.05,
        c.p_value < 0.001
    )
}

impl CorrelationVerdict {
    /// Flat `key=value` report.
    pub fn to_report(&self) -> String {
        let mut out = correlation_lines("mp", &self.mp);
        out.push_str(&correlation_lines("smp", &self.smp));
        out.push_str(&format!("pcc_gap={:.16e}\n", self.gap));
        out.push_str(
            "interpretation=a larger positive grad-norm/Hessian-norm correlation indicates a larger L1 \
             term in relaxed smoothness, the regime where gradient steps remain stable\n",
        );
        out
    }
}
