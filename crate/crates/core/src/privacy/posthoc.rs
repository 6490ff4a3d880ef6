//! Fresh evaluation attackers trained against a frozen target.

use crate::diffmodel::{LoraDenoiser, NoiseSchedule, Sample};
use crate::evalcli::metrics::{asr, ScoreSet};
use crate::numkit::{Matrix, Optimizer, OptimizerKind, Rng};
use crate::privacy::attack::{mi_gain_with_grads, AttackModel, ATTACK_HIDDEN};
use crate::privacy::features::{FeatureProbe, GradientProbe};
use crate::trainers::balanced_index_batches;
use crate::{ensure, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AttackerTraining {
    pub epochs: usize,
    pub lr: f64,
    /// Samples per side in each balanced batch.
    pub per_side: usize,
    pub optimizer: OptimizerKind,
    pub hidden: Vec<usize>,
}

impl Default for AttackerTraining {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 1e-5,
            per_side: 4,
            optimizer: OptimizerKind::Adam,
            hidden: ATTACK_HIDDEN.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackerReport {
    /// Epoch of the returned checkpoint; 0 is the untrained initialisation.
    pub best_epoch: usize,
    pub best_aux_asr: f64,
    pub aux_asr: Vec<f64>,
}

fn aux_asr(h: &AttackModel, m: &Matrix, n: &Matrix) -> Result<f64> {
    asr(&ScoreSet::new(h.probs(m)?, h.probs(n)?)?)
}

/// Trains a fresh attacker on member/non-member feature rows by ascending the
/// MI gain over balanced batches, and keeps the epoch with the best ASR on
/// the training rows themselves.
pub fn train_attacker(
    member_feats: &Matrix,
    nonmember_feats: &Matrix,
    cfg: &AttackerTraining,
    rng: &Rng,
) -> Result<(AttackModel, AttackerReport)> {
    ensure!(
        member_feats.rows() >= 1 && nonmember_feats.rows() >= 1,
        Config,
        "attacker training needs members and non-members"
    );
    ensure!(member_feats.cols() == nonmember_feats.cols(), Dimension, "feature widths differ");
    ensure!(cfg.per_side >= 1, Config, "attacker batch needs at least one sample per side");
    let mut h = AttackModel::new(member_feats.cols(), &cfg.hidden, &mut rng.stream("attacker-init"))?;
    h.fit_normalization(&member_feats.vstack(nonmember_feats)?)?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, h.params().len());
    let mut batch_rng = rng.stream("attacker-batches");

    let mut best = h.clone();
    let mut best_asr = aux_asr(&h, member_feats, nonmember_feats)?;
    let mut best_epoch = 0;
    let mut history = vec![best_asr];
    for epoch in 1..=cfg.epochs {
        for (mi, ni) in balanced_index_batches(member_feats.rows(), nonmember_feats.rows(), cfg.per_side, &mut batch_rng)? {
            let m = gather(member_feats, &mi);
            let n = gather(nonmember_feats, &ni);
            let grads = mi_gain_with_grads(&h, &m, &n)?;
            if !grads.omega.is_finite() {
                return Err(Error::Numeric("non-finite attacker gradient".into()));
            }
            let mut p = h.params().clone();
            opt.ascend(p.values_mut(), grads.omega.values())?;
            h.set_params(p)?;
        }
        let a = aux_asr(&h, member_feats, nonmember_feats)?;
        history.push(a);
        if a > best_asr {
            best_asr = a;
            best_epoch = epoch;
            best = h.clone();
        }
    }
    Ok((
        best,
        AttackerReport {
            best_epoch,
            best_aux_asr: best_asr,
            aux_asr: history,
        },
    ))
}

pub fn gather(m: &Matrix, rows: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(rows.len(), m.cols());
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(i).copy_from_slice(m.row(r));
    }
    out
}

/// Loss-feature attacker `h′` trained on `D_aux` against the frozen target.
pub fn train_posthoc_attacker(
    aux_m: &[Sample],
    aux_nm: &[Sample],
    target: &LoraDenoiser,
    probe: &FeatureProbe,
    sched: &NoiseSchedule,
    cfg: &AttackerTraining,
    rng: &Rng,
) -> Result<(AttackModel, AttackerReport)> {
    ensure!(!aux_m.is_empty() && !aux_nm.is_empty(), Config, "auxiliary split has an empty side");
    let m = probe.loss_features(target, &aux_m.iter().collect::<Vec<_>>(), sched)?;
    let n = probe.loss_features(target, &aux_nm.iter().collect::<Vec<_>>(), sched)?;
    train_attacker(&m, &n, cfg, rng)
}

/// Gradient-feature attacker: features are per-layer LoRA gradient norms.
pub fn grad_feature_attack(
    aux_m: &[Sample],
    aux_nm: &[Sample],
    target: &LoraDenoiser,
    probe: &GradientProbe,
    sched: &NoiseSchedule,
    cfg: &AttackerTraining,
    rng: &Rng,
) -> Result<(AttackModel, AttackerReport)> {
    ensure!(!aux_m.is_empty() && !aux_nm.is_empty(), Config, "auxiliary split has an empty side");
    let m = probe.gradient_features(target, &aux_m.iter().collect::<Vec<_>>(), sched)?;
    let n = probe.gradient_features(target, &aux_nm.iter().collect::<Vec<_>>(), sched)?;
    train_attacker(&m, &n, cfg, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_epochs_returns_initialisation() {
        let r = Rng::new(3);
        let m = Rng::new(1).gaussian_matrix(6, 2);
        let n = Rng::new(2).gaussian_matrix(6, 2);
        let cfg = AttackerTraining {
            epochs: 0,
            hidden: vec![8],
            ..Default::default()
        };
        let (h, rep) = train_attacker(&m, &n, &cfg, &r).unwrap();
        assert_eq!(rep.best_epoch, 0);
        let mut fresh = AttackModel::new(2, &[8], &mut r.stream("attacker-init")).unwrap();
        fresh.fit_normalization(&m.vstack(&n).unwrap()).unwrap();
        assert_eq!(h, fresh);
    }

    #[test]
    fn separable_features_are_learned() {
        let mut r = Rng::new(4);
        let m = r.gaussian_matrix(20, 2).map(|v| v + 2.0);
        let n = r.gaussian_matrix(20, 2).map(|v| v - 2.0);
        let cfg = AttackerTraining {
            epochs: 20,
            lr: 1e-3,
            hidden: vec![16],
            ..Default::default()
        };
        let (_, rep) = train_attacker(&m, &n, &cfg, &Rng::new(5)).unwrap();
        assert!(rep.best_aux_asr >= 0.95, "{rep:?}");
        assert_eq!(rep.aux_asr.len(), 21);
        assert!(rep.aux_asr.iter().all(|a| *a <= rep.best_aux_asr));
    }

    #[test]
    fn empty_side_is_a_config_error() {
        let cfg = AttackerTraining::default();
        let e = train_attacker(&Matrix::zeros(0, 2), &Matrix::zeros(3, 2), &cfg, &Rng::new(1)).unwrap_err();
        assert!(matches!(e, Error::Config(_)));
    }
}
