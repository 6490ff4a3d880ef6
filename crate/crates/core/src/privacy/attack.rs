//! Membership classifier `h_ω` and the MI gain.

use crate::numkit::{mlp_backward, mlp_forward, Activation, Matrix, MlpArch, Optimizer, ParamVector, Rng};
use crate::{ensure, Error, Result};

pub const DEFAULT_PROB_CLAMP: f64 = 1e-7;
pub const ATTACK_HIDDEN: [usize; 2] = [512, 256];

/// One sample's feature vector of length `F`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossFeature {
    pub values: Vec<f64>,
}

/// Feed-forward classifier `F → 512 → 256 → 2` with ReLU hidden layers.
///
/// Inputs pass through a fixed affine map `(x − shift)/scale` before the
/// network; the map is set once from reference features and never trained.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackModel {
    arch: MlpArch,
    pub(crate) params: ParamVector,
    shift: Vec<f64>,
    scale: Vec<f64>,
    prob_clamp: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MiGainRecord {
    pub g: f64,
    pub member_count: usize,
    pub nonmember_count: usize,
}

/// `G` with its gradients with respect to `ω` and to the raw input features.
#[derive(Clone, Debug)]
pub struct MiGainGrads {
    pub record: MiGainRecord,
    pub omega: ParamVector,
    pub member_feats: Matrix,
    pub nonmember_feats: Matrix,
}

impl AttackModel {
    pub fn new(features: usize, hidden: &[usize], rng: &mut Rng) -> Result<Self> {
        ensure!(features >= 1, Config, "attacker needs at least one feature");
        let mut sizes = vec![features];
        sizes.extend_from_slice(hidden);
        sizes.push(2);
        let arch = MlpArch::new(sizes, Activation::Relu, Activation::Identity);
        let params = arch.init_params(rng);
        Ok(Self {
            arch,
            params,
            shift: vec![0.0; features],
            scale: vec![1.0; features],
            prob_clamp: DEFAULT_PROB_CLAMP,
        })
    }

    /// Attacker with the default `(512, 256)` hidden layers.
    pub fn standard(features: usize, rng: &mut Rng) -> Result<Self> {
        Self::new(features, &ATTACK_HIDDEN, rng)
    }

    pub fn from_parts(arch: MlpArch, params: ParamVector, shift: Vec<f64>, scale: Vec<f64>, prob_clamp: f64) -> Result<Self> {
        arch.check_params(&params)?;
        ensure!(arch.output_dim() == 2, Dimension, "attacker must output two logits");
        ensure!(
            shift.len() == arch.input_dim() && scale.len() == arch.input_dim(),
            Dimension,
            "normalisation length does not match {} features",
            arch.input_dim()
        );
        ensure!(scale.iter().all(|s| *s > 0.0), Contract, "normalisation scales must be positive");
        ensure!(0.0 < prob_clamp && prob_clamp < 0.5, Contract, "probability clamp must lie in (0, 0.5)");
        Ok(Self {
            arch,
            params,
            shift,
            scale,
            prob_clamp,
        })
    }

    pub fn features(&self) -> usize {
        self.arch.input_dim()
    }

    pub fn arch(&self) -> &MlpArch {
        &self.arch
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn set_params(&mut self, params: ParamVector) -> Result<()> {
        ensure!(params.same_layout(&self.params), Dimension, "attacker parameter layout changed");
        self.params = params;
        Ok(())
    }

    pub fn prob_clamp(&self) -> f64 {
        self.prob_clamp
    }

    pub fn shift(&self) -> &[f64] {
        &self.shift
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    /// Sets the input map to per-feature mean and standard deviation of `reference`.
    pub fn fit_normalization(&mut self, reference: &Matrix) -> Result<()> {
        ensure!(reference.cols() == self.features(), Dimension, "reference has {} columns", reference.cols());
        ensure!(reference.rows() >= 2, Contract, "normalisation needs at least two rows");
        let n = reference.rows() as f64;
        for j in 0..self.features() {
            let col: Vec<f64> = (0..reference.rows()).map(|i| reference.get(i, j)).collect();
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            self.shift[j] = mean;
            self.scale[j] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        }
        Ok(())
    }

    fn normalize(&self, feats: &Matrix) -> Result<Matrix> {
        ensure!(
            feats.cols() == self.features(),
            Dimension,
            "features have {} columns, attacker expects {}",
            feats.cols(),
            self.features()
        );
        let mut out = feats.clone();
        for i in 0..out.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = (*v - self.shift[j]) / self.scale[j];
            }
        }
        Ok(out)
    }

    /// Raw two-way logits for each feature row.
    pub fn logits(&self, feats: &Matrix) -> Result<Matrix> {
        Ok(mlp_forward(&self.params, &self.normalize(feats)?, &self.arch)?.0)
    }

    /// Clamped membership probability for each feature row.
    pub fn probs(&self, feats: &Matrix) -> Result<Vec<f64>> {
        let logits = self.logits(feats)?;
        Ok((0..logits.rows())
            .map(|i| self.clamp(softmax_first(logits.get(i, 0), logits.get(i, 1))).0)
            .collect())
    }

    /// Returns the clamped value and whether the clamp was active.
    fn clamp(&self, p: f64) -> (f64, bool) {
        let (lo, hi) = (self.prob_clamp, 1.0 - self.prob_clamp);
        if p < lo {
            (lo, true)
        } else if p > hi {
            (hi, true)
        } else {
            (p, false)
        }
    }
}

/// First component of `softmax(z0, z1)`, evaluated without overflow.
pub fn softmax_first(z0: f64, z1: f64) -> f64 {
    let d = z1 - z0;
    if d >= 0.0 {
        let e = (-d).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + d.exp())
    }
}

pub fn attack_forward(h: &AttackModel, feat: &LossFeature) -> Result<f64> {
    let m = Matrix::from_vec(1, feat.values.len(), feat.values.clone())?;
    Ok(h.probs(&m)?[0])
}

/// `G = (1/2|M|)·Σ_M log h + (1/2|N|)·Σ_N log(1 − h)`.
pub fn mi_gain(h: &AttackModel, member_feats: &Matrix, nonmember_feats: &Matrix) -> Result<MiGainRecord> {
    ensure!(
        member_feats.rows() >= 1 && nonmember_feats.rows() >= 1,
        Contract,
        "MI gain needs members and non-members"
    );
    let pm = h.probs(member_feats)?;
    let pn = h.probs(nonmember_feats)?;
    Ok(gain_from_probs(&pm, &pn))
}

pub fn gain_from_probs(member_probs: &[f64], nonmember_probs: &[f64]) -> MiGainRecord {
    let (m, n) = (member_probs.len() as f64, nonmember_probs.len() as f64);
    let g = member_probs.iter().map(|p| p.ln()).sum::<f64>() / (2.0 * m)
        + nonmember_probs.iter().map(|p| (1.0 - p).ln()).sum::<f64>() / (2.0 * n);
    MiGainRecord {
        g,
        member_count: member_probs.len(),
        nonmember_count: nonmember_probs.len(),
    }
}

/// `G` and its exact gradients. Rows where the clamp is active contribute no
/// gradient.
pub fn mi_gain_with_grads(h: &AttackModel, member_feats: &Matrix, nonmember_feats: &Matrix) -> Result<MiGainGrads> {
    ensure!(
        member_feats.rows() >= 1 && nonmember_feats.rows() >= 1,
        Contract,
        "MI gain needs members and non-members"
    );
    let (nm, nn) = (member_feats.rows(), nonmember_feats.rows());
    let x = h.normalize(&member_feats.vstack(nonmember_feats)?)?;
    let (logits, cache) = mlp_forward(&h.params, &x, &h.arch)?;
    let mut out_grad = Matrix::zeros(nm + nn, 2);
    let (mut pm, mut pn) = (Vec::with_capacity(nm), Vec::with_capacity(nn));
    for i in 0..nm + nn {
        let (p, clamped) = h.clamp(softmax_first(logits.get(i, 0), logits.get(i, 1)));
        // d log p / d(z0 − z1) = 1 − p;  d log(1 − p) / d(z0 − z1) = −p.
        let dz = if i < nm {
            pm.push(p);
            if clamped { 0.0 } else { (1.0 - p) / (2.0 * nm as f64) }
        } else {
            pn.push(p);
            if clamped { 0.0 } else { -p / (2.0 * nn as f64) }
        };
        out_grad.set(i, 0, dz);
        out_grad.set(i, 1, -dz);
    }
    let grads = mlp_backward(&h.params, &h.arch, &cache, &out_grad)?;
    let mut input = grads.input;
    for i in 0..input.rows() {
        for (j, v) in input.row_mut(i).iter_mut().enumerate() {
            *v /= h.scale[j];
        }
    }
    Ok(MiGainGrads {
        record: gain_from_probs(&pm, &pn),
        omega: grads.params,
        member_feats: input.slice_rows(0, nm),
        nonmember_feats: input.slice_rows(nm, nm + nn),
    })
}

/// One ascent step of the proxy attacker on `G` over a balanced feature pair.
///
/// Returns the gain measured before the step.
pub fn proxy_ascent_step(
    h: &mut AttackModel,
    member_feats: &Matrix,
    nonmember_feats: &Matrix,
    opt: &mut Optimizer,
) -> Result<MiGainRecord> {
    ensure!(
        member_feats.rows() == nonmember_feats.rows(),
        Contract,
        "unbalanced attacker batch: {} members vs {} non-members",
        member_feats.rows(),
        nonmember_feats.rows()
    );
    let grads = mi_gain_with_grads(h, member_feats, nonmember_feats)?;
    if !grads.omega.is_finite() {
        return Err(Error::Numeric("non-finite attacker gradient".into()));
    }
    opt.ascend(h.params.values_mut(), grads.omega.values())?;
    Ok(grads.record)
}

impl AttackModel {
    /// All tensors needed to rebuild the attacker, for checkpointing.
    pub fn to_segments(&self) -> Vec<(String, Matrix)> {
        let mut out: Vec<(String, Matrix)> = vec![(
            "arch".to_string(),
            Matrix::from_vec(1, self.arch.sizes.len(), self.arch.sizes.iter().map(|&s| s as f64).collect())
                .expect("arch row"),
        )];
        out.extend(self.params.matrices());
        let f = self.features();
        out.push(("norm.shift".into(), Matrix::from_vec(1, f, self.shift.clone()).expect("shift")));
        out.push(("norm.scale".into(), Matrix::from_vec(1, f, self.scale.clone()).expect("scale")));
        out.push(("clamp".into(), Matrix::from_vec(1, 1, vec![self.prob_clamp]).expect("clamp")));
        out
    }

    pub fn from_segments(segments: &[(String, Matrix)]) -> Result<Self> {
        let find = |name: &str| -> Result<&Matrix> {
            segments
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, m)| m)
                .ok_or_else(|| Error::Format(format!("missing segment {name}")))
        };
        let sizes: Vec<usize> = find("arch")?.data().iter().map(|&v| v as usize).collect();
        ensure!(sizes.len() >= 2, Format, "attacker arch needs at least two sizes");
        let arch = MlpArch::new(sizes, Activation::Relu, Activation::Identity);
        let mut params = ParamVector::new();
        for l in 0..arch.num_layers() {
            params.push(MlpArch::weight_name(l), find(&MlpArch::weight_name(l))?);
            params.push(MlpArch::bias_name(l), find(&MlpArch::bias_name(l))?);
        }
        Self::from_parts(
            arch,
            params,
            find("norm.shift")?.data().to_vec(),
            find("norm.scale")?.data().to_vec(),
            find("clamp")?.data()[0],
        )
    }
}
