//! Attack-success metrics, the kernel quality statistic and summary statistics.
//!
//! Members are the positive class. A score `s` is classified as member iff
//! `s ≥ τ`; ASR uses `τ = 0.5`, so a score of exactly 0.5 counts as member.

use crate::diffmodel::Sample;
use crate::{ensure, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSet {
    pub member_scores: Vec<f64>,
    pub nonmember_scores: Vec<f64>,
}

impl ScoreSet {
    pub fn new(member_scores: Vec<f64>, nonmember_scores: Vec<f64>) -> Result<Self> {
        ensure!(
            !member_scores.is_empty() && !nonmember_scores.is_empty(),
            Contract,
            "score set needs both members and non-members"
        );
        ensure!(
            member_scores.iter().chain(&nonmember_scores).all(|s| (0.0..=1.0).contains(s)),
            Contract,
            "scores must lie in [0, 1]"
        );
        Ok(Self {
            member_scores,
            nonmember_scores,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub asr: f64,
    pub auc: f64,
    /// `|auc − 0.5| / 0.5`.
    pub auc_dev: f64,
    pub tpr_at_5fpr: f64,
    pub roc: Vec<(f64, f64)>,
    pub quality: f64,
}

impl MetricReport {
    pub fn from_scores(scores: &ScoreSet, quality: f64) -> Result<Self> {
        let (auc, roc) = roc_auc(scores);
        Ok(Self {
            asr: asr(scores)?,
            auc,
            auc_dev: (auc - 0.5).abs() / 0.5,
            tpr_at_5fpr: tpr_at_fpr(scores, 0.05)?,
            roc,
            quality,
        })
    }
}

pub fn asr(scores: &ScoreSet) -> Result<f64> {
    ensure!(
        !scores.member_scores.is_empty() && !scores.nonmember_scores.is_empty(),
        Contract,
        "ASR needs both members and non-members"
    );
    let hits = scores.member_scores.iter().filter(|&&s| s >= 0.5).count()
        + scores.nonmember_scores.iter().filter(|&&s| s < 0.5).count();
    Ok(hits as f64 / (scores.member_scores.len() + scores.nonmember_scores.len()) as f64)
}

/// Counts `(tp, fp)` at each threshold of the sweep, from `+∞` down to the
/// smallest observed score.
fn sweep_counts(scores: &ScoreSet) -> Vec<(u64, u64)> {
    let mut all: Vec<(f64, bool)> = scores
        .member_scores
        .iter()
        .map(|&s| (s, true))
        .chain(scores.nonmember_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut out = vec![(0, 0)];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < all.len() {
        let tau = all[i].0;
        while i < all.len() && all[i].0 == tau {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push((tp, fp));
    }
    out
}

/// Mann-Whitney AUC with half credit for ties, and the ROC from a threshold
/// sweep over every observed score.
///
/// Both are built from integer counts, so the trapezoidal area of the sweep
/// equals the pair-counting value bit for bit.
pub fn roc_auc(scores: &ScoreSet) -> (f64, Vec<(f64, f64)>) {
    let counts = sweep_counts(scores);
    let (p, n) = (scores.member_scores.len() as u64, scores.nonmember_scores.len() as u64);
    let roc = counts.iter().map(|&(tp, fp)| (fp as f64 / n as f64, tp as f64 / p as f64)).collect();
    // Σ Δfp·(tp_prev + tp_cur) = 2·#{m > n} + #{m = n}.
    let twice: u128 = counts
        .windows(2)
        .map(|w| u128::from(w[1].1 - w[0].1) * u128::from(w[0].0 + w[1].0))
        .sum();
    let auc = twice as f64 / (2 * u128::from(p) * u128::from(n)) as f64;
    (auc, roc)
}

/// Mann-Whitney AUC by rank counting, independent of the ROC sweep.
pub fn auc_pair_count(scores: &ScoreSet) -> f64 {
    let mut neg = scores.nonmember_scores.clone();
    neg.sort_by(f64::total_cmp);
    let mut twice: u128 = 0;
    for &s in &scores.member_scores {
        let below = neg.partition_point(|&v| v < s) as u128;
        let upto = neg.partition_point(|&v| v <= s) as u128;
        twice += 2 * below + (upto - below);
    }
    let (p, n) = (scores.member_scores.len() as u128, scores.nonmember_scores.len() as u128);
    twice as f64 / (2 * p * n) as f64
}

/// Largest TPR over thresholds whose empirical FPR is at most `fpr_cap`.
pub fn tpr_at_fpr(scores: &ScoreSet, fpr_cap: f64) -> Result<f64> {
    ensure!(0.0 < fpr_cap && fpr_cap < 1.0, Contract, "FPR cap must lie in (0, 1), got {fpr_cap}");
    let (p, n) = (scores.member_scores.len() as f64, scores.nonmember_scores.len() as f64);
    Ok(sweep_counts(scores)
        .into_iter()
        .filter(|&(_, fp)| fp as f64 / n <= fpr_cap)
        .map(|(tp, _)| tp as f64 / p)
        .fold(0.0, f64::max))
}

fn poly_kernel(u: &[f64], v: &[f64]) -> f64 {
    let d: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    (d / u.len() as f64 + 1.0).powi(3)
}

/// Unbiased MMD² between two disjoint sample lists with the cubic polynomial
/// kernel `k(u, v) = (uᵀv/dim + 1)³`.
pub fn kernel_quality(generated: &[Sample], reference: &[Sample]) -> Result<f64> {
    ensure!(
        generated.len() >= 10 && reference.len() >= 10,
        Contract,
        "kernel quality needs at least 10 samples per side"
    );
    let dim = generated[0].x.len();
    ensure!(
        generated.iter().chain(reference).all(|s| s.x.len() == dim),
        Dimension,
        "samples differ in dimension"
    );
    let bits = |s: &Sample| s.x.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let reference_bits: std::collections::HashSet<Vec<u64>> = reference.iter().map(bits).collect();
    ensure!(
        !generated.iter().any(|s| reference_bits.contains(&bits(s))),
        Contract,
        "generated and reference sets overlap"
    );
    let (m, n) = (generated.len() as f64, reference.len() as f64);
    let within = |xs: &[Sample]| {
        let mut acc = 0.0;
        for i in 0..xs.len() {
            for j in 0..xs.len() {
                if i != j {
                    acc += poly_kernel(&xs[i].x, &xs[j].x);
                }
            }
        }
        acc
    };
    let mut cross = 0.0;
    for g in generated {
        for r in reference {
            cross += poly_kernel(&g.x, &r.x);
        }
    }
    Ok(within(generated) / (m * (m - 1.0)) + within(reference) / (n * (n - 1.0)) - 2.0 * cross / (m * n))
}

/// Mean and standard error of the mean (sample standard deviation over √n;
/// zero for a single value).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

/// Two-pass mean and standard error.
pub fn summarize(values: &[f64]) -> Result<Summary> {
    ensure!(!values.is_empty(), Contract, "cannot summarise an empty list");
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let stderr = if n < 2 {
        0.0
    } else {
        let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
        (ss / (n - 1) as f64).sqrt() / (n as f64).sqrt()
    };
    Ok(Summary { mean, stderr, n })
}

/// One-pass (Welford) mean and standard error.
pub fn summarize_streaming(values: &[f64]) -> Result<Summary> {
    ensure!(!values.is_empty(), Contract, "cannot summarise an empty list");
    let (mut mean, mut m2) = (0.0, 0.0);
    for (k, &v) in values.iter().enumerate() {
        let d = v - mean;
        mean += d / (k + 1) as f64;
        m2 += d * (v - mean);
    }
    let n = values.len();
    let stderr = if n < 2 { 0.0 } else { (m2 / (n - 1) as f64).sqrt() / (n as f64).sqrt() };
    Ok(Summary { mean, stderr, n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Rng;

    fn set(m: &[f64], n: &[f64]) -> ScoreSet {
        ScoreSet::new(m.to_vec(), n.to_vec()).unwrap()
    }

    fn brute_auc(s: &ScoreSet) -> f64 {
        let mut twice = 0u64;
        for &a in &s.member_scores {
            for &b in &s.nonmember_scores {
                twice += if a > b { 2 } else if a == b { 1 } else { 0 };
            }
        }
        twice as f64 / (2 * s.member_scores.len() * s.nonmember_scores.len()) as f64
    }

    #[test]
    fn asr_cases() {
        assert_eq!(asr(&set(&[0.9, 0.6], &[0.4, 0.2])).unwrap(), 1.0);
        assert_eq!(asr(&set(&[0.5, 0.5], &[0.5, 0.5])).unwrap(), 0.5);
        assert!(ScoreSet::new(vec![], vec![0.1]).is_err());
        assert!(ScoreSet::new(vec![1.2], vec![0.1]).is_err());
    }

    #[test]
    fn auc_extremes_and_roc_shape() {
        let (auc, roc) = roc_auc(&set(&[0.8, 0.9], &[0.1]));
        assert_eq!(auc, 1.0);
        assert_eq!(roc.first(), Some(&(0.0, 0.0)));
        assert_eq!(roc.last(), Some(&(1.0, 1.0)));
        assert_eq!(roc_auc(&set(&[0.1], &[0.9])).0, 0.0);
        assert_eq!(roc_auc(&set(&[0.5], &[0.5])).0, 0.5);
    }

    #[test]
    fn auc_matches_pair_enumeration() {
        let mut r = Rng::new(42);
        for _ in 0..20 {
            // Coarse grid so that ties occur.
            let m: Vec<f64> = (0..1 + r.below(100)).map(|_| (r.below(21) as f64) / 20.0).collect();
            let n: Vec<f64> = (0..1 + r.below(100)).map(|_| (r.below(21) as f64) / 20.0).collect();
            let s = set(&m, &n);
            let (auc, roc) = roc_auc(&s);
            assert_eq!(auc, brute_auc(&s));
            assert_eq!(auc_pair_count(&s), auc);
            assert!(roc.windows(2).all(|w| w[1].0 >= w[0].0 && w[1].1 >= w[0].1));
        }
    }

    #[test]
    fn tpr_at_fpr_cases() {
        assert_eq!(tpr_at_fpr(&set(&[0.9, 0.8], &[0.1, 0.2]), 0.05).unwrap(), 1.0);
        // Twenty non-members admit exactly one false positive at 5%.
        let n: Vec<f64> = (0..20).map(|i| i as f64 / 40.0 + 0.3).collect();
        let m = [0.9, 0.7, 0.76, 0.2];
        let s = set(&m, &n);
        // Only the top non-member (0.775) may pass, so the threshold stops at 0.76.
        assert_eq!(tpr_at_fpr(&s, 0.05).unwrap(), 0.5);
        assert_eq!(tpr_at_fpr(&set(&[0.5; 3], &[0.5; 3]), 0.05).unwrap(), 0.0);
        assert!(tpr_at_fpr(&s, 0.0).is_err());
    }

    #[test]
    fn kernel_quality_null_and_shift() {
        let mut r = Rng::new(7);
        let draw = |r: &mut Rng, n: usize, shift: f64, base: u64| -> Vec<Sample> {
            (0..n).map(|i| Sample::new(base + i as u64, r.gaussian_vec(4).iter().map(|v| v + shift).collect(), 0)).collect()
        };
        let a = draw(&mut r, 100, 0.0, 0);
        let b = draw(&mut r, 100, 0.0, 100);
        let far = draw(&mut r, 100, 5.0, 200);
        let null = kernel_quality(&a, &b).unwrap();
        let shifted = kernel_quality(&far, &b).unwrap();
        assert!(null.abs() < 0.5, "{null}");
        assert!(shifted > 10.0 * null.abs(), "{shifted} vs {null}");
        assert!(kernel_quality(&a, &a).is_err());
        assert!(kernel_quality(&a[..5], &b).is_err());
    }

    #[test]
    fn summaries_agree() {
        let v = [0.71, 0.74, 0.69];
        let (a, b) = (summarize(&v).unwrap(), summarize_streaming(&v).unwrap());
        assert!((a.mean - b.mean).abs() < 1e-12 && (a.stderr - b.stderr).abs() < 1e-12);
        assert_eq!(summarize(&[2.0]).unwrap().stderr, 0.0);
        assert!(summarize(&[]).is_err());
    }
}
