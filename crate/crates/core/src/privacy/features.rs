//! Per-sample attack features read off a target denoiser.

use crate::diffmodel::{eval_losses, loss_gradient, LoraDenoiser, NoiseSchedule, NoisedBatch, Sample, Trainable};
use crate::numkit::{Matrix, ParamVector, Rng};
use crate::privacy::attack::{mi_gain_with_grads, AttackModel, MiGainRecord};
use crate::{ensure, Result};

/// Timesteps evenly spaced over `1..=T`: the midpoints of `count` equal bins.
pub fn timestep_grid(steps: usize, count: usize) -> Result<Vec<usize>> {
    ensure!(count >= 1 && count <= steps, Config, "cannot place {count} probe timesteps in {steps} steps");
    Ok((0..count).map(|j| (2 * j + 1) * steps / (2 * count) + 1).collect())
}

/// Deterministic loss probe: feature `j` of a sample is its adaptation loss at
/// `timesteps[j]`, averaged over `draws` noise vectors keyed by
/// `(seed, sample id, j, draw)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureProbe {
    pub timesteps: Vec<usize>,
    pub draws: usize,
    pub seed: u64,
}

impl FeatureProbe {
    pub fn new(sched: &NoiseSchedule, features: usize, draws: usize, seed: u64) -> Result<Self> {
        ensure!(draws >= 1, Config, "probe needs at least one noise draw");
        Ok(Self {
            timesteps: timestep_grid(sched.steps(), features)?,
            draws,
            seed,
        })
    }

    pub fn features(&self) -> usize {
        self.timesteps.len()
    }

    fn rows_per_sample(&self) -> usize {
        self.timesteps.len() * self.draws
    }

    /// Noise vector for one probe cell.
    pub fn eps(&self, sample_id: u64, j: usize, draw: usize, dim: usize) -> Vec<f64> {
        let cell = (j * self.draws + draw) as u64;
        let idx = sample_id.wrapping_mul(1 << 20).wrapping_add(cell);
        Rng::new(self.seed).stream_indexed("loss-probe", idx).gaussian_vec(dim)
    }

    /// All probe rows of `samples`, sample-major.
    pub fn batch(&self, samples: &[&Sample], sched: &NoiseSchedule) -> Result<NoisedBatch> {
        ensure!(!samples.is_empty(), Contract, "no samples to probe");
        let mut rows = Vec::with_capacity(samples.len() * self.rows_per_sample());
        let mut t = Vec::with_capacity(rows.capacity());
        let mut eps = Vec::with_capacity(rows.capacity());
        for s in samples {
            for (j, &tj) in self.timesteps.iter().enumerate() {
                for d in 0..self.draws {
                    rows.push(*s);
                    t.push(tj);
                    eps.push(self.eps(s.id, j, d, s.x.len()));
                }
            }
        }
        NoisedBatch::build(&rows, &t, &eps, sched)
    }

    /// Folds per-row losses into an `n × F` feature matrix.
    fn fold(&self, losses: &[f64], n: usize) -> Matrix {
        let f = self.features();
        let mut out = Matrix::zeros(n, f);
        for i in 0..n {
            for j in 0..f {
                let start = (i * f + j) * self.draws;
                let mean = losses[start..start + self.draws].iter().sum::<f64>() / self.draws as f64;
                out.set(i, j, mean);
            }
        }
        out
    }

    pub fn loss_features(&self, model: &LoraDenoiser, samples: &[&Sample], sched: &NoiseSchedule) -> Result<Matrix> {
        let nb = self.batch(samples, sched)?;
        let losses = eval_losses(model, &nb)?.losses;
        Ok(self.fold(&losses, samples.len()))
    }
}

/// `G` on a member/non-member pair with its gradient through the target's
/// trainable set `mode` (`ω` held fixed).
#[derive(Clone, Debug)]
pub struct GainThroughTarget {
    pub record: MiGainRecord,
    pub target_grad: ParamVector,
    pub omega_grad: ParamVector,
}

pub fn gain_through_target(
    h: &AttackModel,
    model: &LoraDenoiser,
    probe: &FeatureProbe,
    members: &[&Sample],
    nonmembers: &[&Sample],
    sched: &NoiseSchedule,
    mode: Trainable,
) -> Result<GainThroughTarget> {
    ensure!(h.features() == probe.features(), Dimension, "attacker and probe disagree on F");
    let mut all: Vec<&Sample> = members.to_vec();
    all.extend_from_slice(nonmembers);
    let nb = probe.batch(&all, sched)?;
    let eval = eval_losses(model, &nb)?;
    let feats = probe.fold(&eval.losses, all.len());
    let nm = members.len();
    let grads = mi_gain_with_grads(h, &feats.slice_rows(0, nm), &feats.slice_rows(nm, all.len()))?;
    let weights = probe_row_weights(probe, &grads.member_feats.vstack(&grads.nonmember_feats)?);
    let target_grad = loss_gradient(model, &eval, &weights, mode)?;
    Ok(GainThroughTarget {
        record: grads.record,
        target_grad,
        omega_grad: grads.omega,
    })
}

/// Per-row loss weights that carry `∂G/∂features` back to the probe rows.
pub fn probe_row_weights(probe: &FeatureProbe, feat_grad: &Matrix) -> Vec<f64> {
    let mut w = Vec::with_capacity(feat_grad.rows() * probe.rows_per_sample());
    for i in 0..feat_grad.rows() {
        for j in 0..probe.features() {
            for _ in 0..probe.draws {
                w.push(feat_grad.get(i, j) / probe.draws as f64);
            }
        }
    }
    w
}

/// Gradient-feature probe: per sample, the adaptation loss averaged over ten
/// evenly spaced timesteps is differentiated with respect to every layer's
/// `(B, A)`; feature `l` is the norm of layer `l`'s gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientProbe {
    pub inner: FeatureProbe,
}

pub const GRADIENT_PROBE_STEPS: usize = 10;

impl GradientProbe {
    pub fn new(sched: &NoiseSchedule, seed: u64) -> Result<Self> {
        Ok(Self {
            inner: FeatureProbe::new(sched, GRADIENT_PROBE_STEPS.min(sched.steps()), 1, seed)?,
        })
    }

    pub fn gradient_features(&self, model: &LoraDenoiser, samples: &[&Sample], sched: &NoiseSchedule) -> Result<Matrix> {
        let layers = model.num_layers();
        let mut out = Matrix::zeros(samples.len(), layers);
        let k = self.inner.features();
        for (i, s) in samples.iter().enumerate() {
            let nb = self.inner.batch(&[*s], sched)?;
            let eval = eval_losses(model, &nb)?;
            let g = loss_gradient(model, &eval, &vec![1.0 / k as f64; k], Trainable::Lora)?;
            for l in 0..layers {
                let b = g.slice(&format!("layer{l}.lora_b"))?;
                let a = g.slice(&format!("layer{l}.lora_a"))?;
                let sq: f64 = b.iter().chain(a).map(|v| v * v).sum();
                out.set(i, l, sq.sqrt());
            }
        }
        Ok(out)
    }
}
