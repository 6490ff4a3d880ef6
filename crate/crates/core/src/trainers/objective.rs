//! The plain, sum-form (MP) and ratio-form (SMP) training objectives and
//! their gradients with respect to the denoiser's trainable set.

use std::fmt;
use std::str::FromStr;

use crate::diffmodel::{eval_losses, loss_gradient, LoraDenoiser, NoiseSchedule, NoisedBatch, Sample, Trainable};
use crate::numkit::ParamVector;
use crate::privacy::{gain_through_target, probe_row_weights, mi_gain_with_grads, AttackModel, FeatureProbe, MiGainRecord};
use crate::{ensure, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Lora,
    MpLora,
    SmpLora,
    FullFt,
    SmpFullFt,
}

/// How the MI gain enters the training loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// `L_ada`.
    Plain,
    /// `L_ada + λ·G`.
    Sum,
    /// `L_ada / (1 − λ·G + δ)`.
    Ratio,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Lora, Method::MpLora, Method::SmpLora, Method::FullFt, Method::SmpFullFt];

    pub fn trainable(self) -> Trainable {
        match self {
            Self::FullFt | Self::SmpFullFt => Trainable::Full,
            _ => Trainable::Lora,
        }
    }

    pub fn objective(self) -> Objective {
        match self {
            Self::Lora | Self::FullFt => Objective::Plain,
            Self::MpLora => Objective::Sum,
            Self::SmpLora | Self::SmpFullFt => Objective::Ratio,
        }
    }

    pub fn uses_attacker(self) -> bool {
        self.objective() != Objective::Plain
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Lora => "lora",
            Self::MpLora => "mp_lora",
            Self::SmpLora => "smp_lora",
            Self::FullFt => "full_ft",
            Self::SmpFullFt => "smp_full_ft",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// `L_PL = l_ada + λ·g`.
pub fn mp_lora_loss(l_ada: f64, g: f64, lambda: f64) -> f64 {
    l_ada + lambda * g
}

/// `L_SPL = l_ada / (1 − λ·g + δ)`.
pub fn smp_lora_loss(l_ada: f64, g: f64, lambda: f64, delta: f64) -> f64 {
    l_ada / (1.0 - lambda * g + delta)
}

/// `(f1, f2) = (1/(1 − λg + δ), l_ada/(1 − λg + δ)²)`.
pub fn rescale_pair(l_ada: f64, g: f64, lambda: f64, delta: f64) -> (f64, f64) {
    let d = 1.0 - lambda * g + delta;
    (1.0 / d, l_ada / (d * d))
}

/// Frozen inputs of one composite-loss evaluation.
#[derive(Clone, Copy)]
pub struct CompositeInputs<'a> {
    pub tr_batch: &'a NoisedBatch,
    pub members: &'a [&'a Sample],
    pub nonmembers: &'a [&'a Sample],
    pub attacker: &'a AttackModel,
    pub probe: &'a FeatureProbe,
    pub sched: &'a NoiseSchedule,
}

/// The raw ingredients of every objective: `L_ada`, `∇L_ada`, and (for
/// attacker methods) `G` with `∇G`, all with respect to one trainable set.
#[derive(Clone, Debug)]
pub struct CompositeParts {
    pub l_ada: f64,
    pub grad_ada: ParamVector,
    pub gain: Option<(MiGainRecord, ParamVector)>,
}

/// Objective value, its gradient, and the rescaling factors at this point.
#[derive(Clone, Debug)]
pub struct CompositeEval {
    pub l_ada: f64,
    pub g: f64,
    pub loss: f64,
    pub grad: ParamVector,
    pub f1: f64,
    pub f2: f64,
}

pub fn composite_parts(model: &LoraDenoiser, inp: &CompositeInputs, method: Method) -> Result<CompositeParts> {
    let mode = method.trainable();
    let eval = eval_losses(model, inp.tr_batch)?;
    let n = eval.losses.len() as f64;
    let l_ada = eval.losses.iter().sum::<f64>() / n;
    let grad_ada = loss_gradient(model, &eval, &vec![1.0 / n; eval.losses.len()], mode)?;
    let gain = if method.uses_attacker() {
        let res = gain_through_target(inp.attacker, model, inp.probe, inp.members, inp.nonmembers, inp.sched, mode)?;
        Some((res.record, res.target_grad))
    } else {
        None
    };
    Ok(CompositeParts { l_ada, grad_ada, gain })
}

/// Assembles the objective from its parts:
/// plain `∇L_ada`; sum `∇L_ada + λ∇G`; ratio `f1·∇L_ada + f2·λ∇G`.
pub fn combine(parts: &CompositeParts, method: Method, lambda: f64, delta: f64) -> Result<CompositeEval> {
    let g = parts.gain.as_ref().map_or(0.0, |(r, _)| r.g);
    let (f1, f2) = rescale_pair(parts.l_ada, g, lambda, delta);
    let mut grad = parts.grad_ada.clone();
    let loss = match method.objective() {
        Objective::Plain => parts.l_ada,
        Objective::Sum => {
            let (_, gg) = parts.gain.as_ref().ok_or_else(|| Error::Contract("sum objective needs a gain".into()))?;
            grad.axpy(lambda, gg)?;
            mp_lora_loss(parts.l_ada, g, lambda)
        }
        Objective::Ratio => {
            let (_, gg) = parts.gain.as_ref().ok_or_else(|| Error::Contract("ratio objective needs a gain".into()))?;
            grad = grad.scaled(f1);
            grad.axpy(f2 * lambda, gg)?;
            smp_lora_loss(parts.l_ada, g, lambda, delta)
        }
    };
    Ok(CompositeEval {
        l_ada: parts.l_ada,
        g,
        loss,
        grad,
        f1,
        f2,
    })
}

pub fn composite(model: &LoraDenoiser, inp: &CompositeInputs, method: Method, lambda: f64, delta: f64) -> Result<CompositeEval> {
    combine(&composite_parts(model, inp, method)?, method, lambda, delta)
}

/// Objective value only.
pub fn composite_value(model: &LoraDenoiser, inp: &CompositeInputs, method: Method, lambda: f64, delta: f64) -> Result<f64> {
    let eval = eval_losses(model, inp.tr_batch)?;
    let l_ada = eval.losses.iter().sum::<f64>() / eval.losses.len() as f64;
    if !method.uses_attacker() {
        return Ok(l_ada);
    }
    let mut all: Vec<&Sample> = inp.members.to_vec();
    all.extend_from_slice(inp.nonmembers);
    let feats = inp.probe.loss_features(model, &all, inp.sched)?;
    let nm = inp.members.len();
    let g = crate::privacy::mi_gain(inp.attacker, &feats.slice_rows(0, nm), &feats.slice_rows(nm, all.len()))?.g;
    Ok(match method.objective() {
        Objective::Plain => l_ada,
        Objective::Sum => mp_lora_loss(l_ada, g, lambda),
        Objective::Ratio => smp_lora_loss(l_ada, g, lambda, delta),
    })
}

/// The objective's gradient from a single backward pass over the stacked
/// training and probe rows, with the outer derivative of the objective folded
/// into the per-row weights. Independent of [`combine`]'s decomposition.
pub fn composite_joint(model: &LoraDenoiser, inp: &CompositeInputs, method: Method, lambda: f64, delta: f64) -> Result<CompositeEval> {
    let mode = method.trainable();
    if !method.uses_attacker() {
        let eval = eval_losses(model, inp.tr_batch)?;
        let n = eval.losses.len();
        let l_ada = eval.losses.iter().sum::<f64>() / n as f64;
        let grad = loss_gradient(model, &eval, &vec![1.0 / n as f64; n], mode)?;
        let (f1, f2) = rescale_pair(l_ada, 0.0, lambda, delta);
        return Ok(CompositeEval {
            l_ada,
            g: 0.0,
            loss: l_ada,
            grad,
            f1,
            f2,
        });
    }
    ensure!(inp.attacker.features() == inp.probe.features(), Dimension, "attacker and probe disagree on F");
    let mut all: Vec<&Sample> = inp.members.to_vec();
    all.extend_from_slice(inp.nonmembers);
    let probe_batch = inp.probe.batch(&all, inp.sched)?;
    let stacked = NoisedBatch::concat(&[inp.tr_batch, &probe_batch])?;
    let eval = eval_losses(model, &stacked)?;
    let n_tr = inp.tr_batch.len();
    let l_ada = eval.losses[..n_tr].iter().sum::<f64>() / n_tr as f64;

    let f = inp.probe.features();
    let draws = inp.probe.draws;
    let mut feats = crate::numkit::Matrix::zeros(all.len(), f);
    for i in 0..all.len() {
        for j in 0..f {
            let start = n_tr + (i * f + j) * draws;
            feats.set(i, j, eval.losses[start..start + draws].iter().sum::<f64>() / draws as f64);
        }
    }
    let nm = inp.members.len();
    let gg = mi_gain_with_grads(inp.attacker, &feats.slice_rows(0, nm), &feats.slice_rows(nm, all.len()))?;
    let g = gg.record.g;
    // ∂L/∂L_ada and ∂L/∂G for each objective.
    let d = 1.0 - lambda * g + delta;
    let (c_ada, c_gain, loss) = match method.objective() {
        Objective::Plain => unreachable!("handled above"),
        Objective::Sum => (1.0, lambda, mp_lora_loss(l_ada, g, lambda)),
        Objective::Ratio => (1.0 / d, lambda * l_ada / (d * d), smp_lora_loss(l_ada, g, lambda, delta)),
    };
    let mut weights = vec![c_ada / n_tr as f64; n_tr];
    let probe_w = probe_row_weights(inp.probe, &gg.member_feats.vstack(&gg.nonmember_feats)?);
    weights.extend(probe_w.iter().map(|w| c_gain * w));
    let grad = loss_gradient(model, &eval, &weights, mode)?;
    let (f1, f2) = rescale_pair(l_ada, g, lambda, delta);
    Ok(CompositeEval {
        l_ada,
        g,
        loss,
        grad,
        f1,
        f2,
    })
}
