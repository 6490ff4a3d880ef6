//! Toy denoising diffusion: schedule, forward noising, the LoRA-augmented
//! denoiser, the adaptation loss and ancestral sampling.

pub mod denoiser;
pub mod lora;
pub mod schedule;

pub use denoiser::{time_features, DenoiserCache, DenoiserConfig, LoraDenoiser, Trainable};
pub use lora::{init_lora, LoraLayer};
pub use schedule::{forward_noise, linear_schedule, NoiseSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START};

use crate::numkit::{Matrix, ParamVector, Rng};
use crate::{ensure, Result};

/// A data point in latent space with its caption id.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Stable identifier, used to key per-sample randomness.
    pub id: u64,
    pub x: Vec<f64>,
    pub y: usize,
}

impl Sample {
    pub fn new(id: u64, x: Vec<f64>, y: usize) -> Self {
        Self { id, x, y }
    }
}

/// The `(t, ε)` draws behind one batch loss, kept for exact replay.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseRecord {
    pub t: Vec<usize>,
    pub eps: Vec<Vec<f64>>,
}

impl NoiseRecord {
    /// Uniform `t ∈ {1..T}` and fresh `ε ~ N(0, I)` per sample.
    pub fn draw(n: usize, dim: usize, sched: &NoiseSchedule, rng: &mut Rng) -> Self {
        let mut t = Vec::with_capacity(n);
        let mut eps = Vec::with_capacity(n);
        for _ in 0..n {
            t.push(rng.below(sched.steps()) + 1);
            eps.push(rng.gaussian_vec(dim));
        }
        Self { t, eps }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Network-ready rows for a set of `(sample, t, ε)` triples.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisedBatch {
    pub z: Matrix,
    pub t: Vec<usize>,
    pub y: Vec<usize>,
    pub eps: Matrix,
}

impl NoisedBatch {
    /// Row `i` noises `samples[i]` at `t[i]` with `eps[i]`.
    pub fn build(samples: &[&Sample], t: &[usize], eps: &[Vec<f64>], sched: &NoiseSchedule) -> Result<Self> {
        ensure!(!samples.is_empty(), Contract, "empty batch");
        ensure!(
            samples.len() == t.len() && t.len() == eps.len(),
            Dimension,
            "{} samples, {} timesteps, {} noise vectors",
            samples.len(),
            t.len(),
            eps.len()
        );
        let dim = samples[0].x.len();
        let mut z = Vec::with_capacity(samples.len() * dim);
        let mut e = Vec::with_capacity(samples.len() * dim);
        for ((s, &ti), ei) in samples.iter().zip(t).zip(eps) {
            ensure!(s.x.len() == dim, Dimension, "ragged batch");
            z.extend(forward_noise(&s.x, ti, ei, sched)?);
            e.extend_from_slice(ei);
        }
        Ok(Self {
            z: Matrix::from_vec(samples.len(), dim, z)?,
            t: t.to_vec(),
            y: samples.iter().map(|s| s.y).collect(),
            eps: Matrix::from_vec(samples.len(), dim, e)?,
        })
    }

    pub fn from_record(samples: &[&Sample], record: &NoiseRecord, sched: &NoiseSchedule) -> Result<Self> {
        Self::build(samples, &record.t, &record.eps, sched)
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Row-wise concatenation, for evaluating several batches in one pass.
    pub fn concat(parts: &[&NoisedBatch]) -> Result<Self> {
        ensure!(!parts.is_empty(), Contract, "nothing to concatenate");
        let mut out = parts[0].clone();
        for p in &parts[1..] {
            out.z = out.z.vstack(&p.z)?;
            out.eps = out.eps.vstack(&p.eps)?;
            out.t.extend(&p.t);
            out.y.extend(&p.y);
        }
        Ok(out)
    }
}

/// Per-row losses `ℓ_i = ‖ε_i − f_i‖²` with what is needed to differentiate them.
#[derive(Clone, Debug)]
pub struct LossEval {
    pub losses: Vec<f64>,
    /// `ε − f`, one row per sample.
    pub residual: Matrix,
    pub cache: DenoiserCache,
}

pub fn eval_losses(model: &LoraDenoiser, batch: &NoisedBatch) -> Result<LossEval> {
    let (pred, cache) = model.forward(&batch.z, &batch.t, &batch.y)?;
    let mut residual = batch.eps.clone();
    residual.add_scaled(-1.0, &pred)?;
    let losses = (0..residual.rows())
        .map(|i| residual.row(i).iter().map(|r| r * r).sum())
        .collect();
    Ok(LossEval {
        losses,
        residual,
        cache,
    })
}

/// Gradient of `Σ_i w_i·ℓ_i` with respect to the trainable set `mode`.
pub fn loss_gradient(model: &LoraDenoiser, eval: &LossEval, weights: &[f64], mode: Trainable) -> Result<ParamVector> {
    ensure!(
        weights.len() == eval.losses.len(),
        Dimension,
        "{} weights for {} losses",
        weights.len(),
        eval.losses.len()
    );
    let mut out_grad = eval.residual.clone();
    for (i, &w) in weights.iter().enumerate() {
        out_grad.row_mut(i).iter_mut().for_each(|r| *r *= -2.0 * w);
    }
    model.backward(&eval.cache, &out_grad, mode)
}

/// `‖ε − f(z_t, t, c(y))‖²` for one sample.
pub fn adaptation_loss_sample(
    model: &LoraDenoiser,
    s: &Sample,
    t: usize,
    eps: &[f64],
    sched: &NoiseSchedule,
) -> Result<f64> {
    let batch = NoisedBatch::build(&[s], &[t], &[eps.to_vec()], sched)?;
    Ok(eval_losses(model, &batch)?.losses[0])
}

/// Mean adaptation loss over `batch` with fresh `(t, ε)` per sample.
pub fn adaptation_loss_batch(
    model: &LoraDenoiser,
    batch: &[Sample],
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<(f64, NoiseRecord)> {
    ensure!(!batch.is_empty(), Contract, "empty batch");
    let record = NoiseRecord::draw(batch.len(), batch[0].x.len(), sched, rng);
    let loss = adaptation_loss_replay(model, batch, &record, sched)?;
    Ok((loss, record))
}

/// Mean adaptation loss at the `(t, ε)` pairs of `record`.
pub fn adaptation_loss_replay(
    model: &LoraDenoiser,
    batch: &[Sample],
    record: &NoiseRecord,
    sched: &NoiseSchedule,
) -> Result<f64> {
    let refs: Vec<&Sample> = batch.iter().collect();
    let nb = NoisedBatch::from_record(&refs, record, sched)?;
    let losses = eval_losses(model, &nb)?.losses;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Ancestral DDPM sampling of `n` points with caption `y`.
///
/// `z_{t−1} = (z_t − β_t/√(1−ᾱ_t)·f)/√α_t + σ_t·ξ` with `σ_t² = β̃_t`, no
/// noise at `t = 1`.
pub fn generate(model: &LoraDenoiser, sched: &NoiseSchedule, y: usize, n: usize, rng: &mut Rng) -> Result<Vec<Sample>> {
    ensure!(n >= 1, Contract, "generate needs n >= 1");
    ensure!(y < model.classes(), Contract, "caption id {y} outside table of {}", model.classes());
    let dim = model.data_dim();
    let mut z = rng.gaussian_matrix(n, dim);
    let ys = vec![y; n];
    for t in (1..=sched.steps()).rev() {
        let ts = vec![t; n];
        let pred = model.predict(&z, &ts, &ys)?;
        let (beta, alpha, ab) = (sched.beta(t), sched.alpha(t), sched.alpha_bar(t));
        let coef = beta / (1.0 - ab).sqrt();
        let inv_sqrt_alpha = 1.0 / alpha.sqrt();
        let sigma = if t > 1 {
            (beta * (1.0 - sched.alpha_bar(t - 1)) / (1.0 - ab)).sqrt()
        } else {
            0.0
        };
        for (zi, &fi) in z.data_mut().iter_mut().zip(pred.data()) {
            *zi = (*zi - coef * fi) * inv_sqrt_alpha;
        }
        if t > 1 {
            for zi in z.data_mut() {
                *zi += sigma * rng.normal();
            }
        }
    }
    ensure!(z.is_finite(), Numeric, "sampling chain diverged");
    Ok((0..n).map(|i| Sample::new(i as u64, z.row(i).to_vec(), y)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_model(seed: u64) -> LoraDenoiser {
        let cfg = DenoiserConfig {
            data_dim: 2,
            time_dim: 2,
            cond_dim: 2,
            classes: 2,
            hidden: vec![6],
            rank: 1,
            lora_alpha: 0.5,
        };
        LoraDenoiser::new(&cfg, &mut Rng::new(seed)).unwrap()
    }

    /// Denoiser whose every weight and bias is zero, so `f ≡ 0`.
    fn zero_model() -> LoraDenoiser {
        let mut m = toy_model(1);
        let zeros = m.trainable_params(Trainable::Full).zeros_like();
        m.set_trainable_params(Trainable::Full, &zeros).unwrap();
        m
    }

    fn silu(x: f64) -> f64 {
        x / (1.0 + (-x).exp())
    }

    #[test]
    fn zero_output_gives_eps_norm() {
        let sched = linear_schedule(10, 1e-4, 0.02).unwrap();
        let s = Sample::new(0, vec![0.3, -0.2], 1);
        let loss = adaptation_loss_sample(&zero_model(), &s, 4, &[1.0, -2.0], &sched).unwrap();
        assert_eq!(loss, 5.0);
    }

    #[test]
    fn exact_prediction_gives_zero() {
        // A zero network predicts ε = 0, so a zero noise draw is matched exactly.
        let sched = linear_schedule(10, 1e-4, 0.02).unwrap();
        let s = Sample::new(0, vec![0.3, -0.2], 0);
        assert_eq!(adaptation_loss_sample(&zero_model(), &s, 7, &[0.0, 0.0], &sched).unwrap(), 0.0);
    }

    #[test]
    fn loss_matches_straight_line_evaluation() {
        let sched = linear_schedule(10, 1e-4, 0.02).unwrap();
        let mut model = toy_model(9);
        let lora = model.trainable_params(Trainable::Lora);
        let mut r = Rng::new(2);
        let vals = lora.values().iter().map(|_| 0.3 * r.normal()).collect();
        model.set_trainable_params(Trainable::Lora, &lora.with_values(vals).unwrap()).unwrap();

        let s = Sample::new(3, vec![0.4, 1.1], 1);
        let (t, eps) = (6usize, [1.0, -1.0]);
        let got = adaptation_loss_sample(&model, &s, t, &eps, &sched).unwrap();

        let ab = sched.alpha_bars()[t - 1];
        let z = [ab.sqrt() * 0.4 + (1.0 - ab).sqrt(), ab.sqrt() * 1.1 - (1.0 - ab).sqrt()];
        let tf = [(t as f64).sin(), (t as f64).cos()];
        let c = model.cond_table().row(1).to_vec();
        let input = [z[0], z[1], tf[0], tf[1], c[0], c[1]];
        let mut h = input.to_vec();
        for (l, layer) in model.layers().iter().enumerate() {
            let (w, b, a, sc) = (layer.frozen_w(), layer.b(), layer.a(), layer.scale());
            let mut next = vec![0.0; w.rows()];
            for o in 0..w.rows() {
                let mut acc = layer.bias()[o];
                for i in 0..w.cols() {
                    let mut ba = 0.0;
                    for k in 0..a.rows() {
                        ba += b.get(o, k) * a.get(k, i);
                    }
                    acc += (w.get(o, i) + sc * ba) * h[i];
                }
                next[o] = if l + 1 < model.num_layers() { silu(acc) } else { acc };
            }
            h = next;
        }
        let expect = (eps[0] - h[0]).powi(2) + (eps[1] - h[1]).powi(2);
        assert!((got - expect).abs() <= 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn batch_mean_and_replay() {
        let sched = linear_schedule(20, 1e-4, 0.02).unwrap();
        let model = toy_model(4);
        let s = Sample::new(0, vec![0.5, 0.5], 0);

        // Identical samples with identical draws: batch loss equals the sample loss.
        let rec = NoiseRecord {
            t: vec![5, 5],
            eps: vec![vec![0.1, 0.2]; 2],
        };
        let single = adaptation_loss_sample(&model, &s, 5, &[0.1, 0.2], &sched).unwrap();
        let batch = adaptation_loss_replay(&model, &[s.clone(), s.clone()], &rec, &sched).unwrap();
        assert!((batch - single).abs() < 1e-15);

        // Known per-sample losses 1 and 3 under a zero network.
        let rec = NoiseRecord {
            t: vec![1, 2],
            eps: vec![vec![1.0, 0.0], vec![1.0, 2.0_f64.sqrt()]],
        };
        let mean = adaptation_loss_replay(&zero_model(), &[s.clone(), s.clone()], &rec, &sched).unwrap();
        assert!((mean - 2.0).abs() < 1e-15);

        let data: Vec<Sample> = (0..5).map(|i| Sample::new(i, vec![i as f64 * 0.1, -0.3], (i % 2) as usize)).collect();
        let (loss, rec) = adaptation_loss_batch(&model, &data, &sched, &mut Rng::new(11)).unwrap();
        let replay: f64 = data
            .iter()
            .enumerate()
            .map(|(i, s)| adaptation_loss_sample(&model, s, rec.t[i], &rec.eps[i], &sched).unwrap())
            .sum::<f64>()
            / 5.0;
        assert!((loss - replay).abs() < 1e-12);
        assert!(adaptation_loss_batch(&model, &[], &sched, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let sched = linear_schedule(10, 1e-4, 0.02).unwrap();
        let mut model = toy_model(8);
        let mut r = Rng::new(3);
        let lora = model.trainable_params(Trainable::Lora);
        let vals = lora.values().iter().map(|_| 0.5 * r.normal()).collect();
        model.set_trainable_params(Trainable::Lora, &lora.with_values(vals).unwrap()).unwrap();
        let data: Vec<Sample> = (0..3).map(|i| Sample::new(i, r.gaussian_vec(2), (i % 2) as usize)).collect();
        let refs: Vec<&Sample> = data.iter().collect();
        let rec = NoiseRecord::draw(3, 2, &sched, &mut r);
        let nb = NoisedBatch::from_record(&refs, &rec, &sched).unwrap();
        let weights = [0.2, 0.5, 1.3];
        for mode in [Trainable::Lora, Trainable::Full] {
            let eval = eval_losses(&model, &nb).unwrap();
            let analytic = loss_gradient(&model, &eval, &weights, mode).unwrap();
            let theta = model.trainable_params(mode);
            let fd = crate::numkit::finite_diff_grad(
                |p| {
                    let mut m = model.clone();
                    m.set_trainable_params(mode, p).unwrap();
                    let l = eval_losses(&m, &nb).unwrap().losses;
                    l.iter().zip(&weights).map(|(a, b)| a * b).sum()
                },
                &theta,
                1e-5,
            )
            .unwrap();
            let err = crate::numkit::max_relative_error(analytic.values(), fd.values());
            assert!(err <= 1e-4, "{mode:?}: {err}");
        }
    }

    #[test]
    fn generate_contracts_and_determinism() {
        let sched = linear_schedule(20, 1e-4, 0.02).unwrap();
        let model = toy_model(2);
        assert!(generate(&model, &sched, 0, 0, &mut Rng::new(1)).is_err());
        let a = generate(&model, &sched, 1, 5, &mut Rng::new(7)).unwrap();
        let b = generate(&model, &sched, 1, 5, &mut Rng::new(7)).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|s| s.y == 1 && s.x.len() == 2));
    }

    #[test]
    fn trained_on_one_point_samples_concentrate() {
        // Fully fitting the noise on a single point pulls the chain towards it.
        let sched = linear_schedule(20, 1e-4, 0.2).unwrap();
        let cfg = DenoiserConfig {
            data_dim: 2,
            time_dim: 4,
            cond_dim: 2,
            classes: 1,
            hidden: vec![32, 32],
            rank: 1,
            lora_alpha: 0.5,
        };
        let mut model = LoraDenoiser::new(&cfg, &mut Rng::new(5)).unwrap();
        let point = Sample::new(0, vec![2.0, -1.5], 0);
        let dist = |m: &LoraDenoiser| {
            let gen = generate(m, &sched, 0, 200, &mut Rng::new(99)).unwrap();
            gen.iter()
                .map(|s| ((s.x[0] - 2.0).powi(2) + (s.x[1] + 1.5).powi(2)).sqrt())
                .sum::<f64>()
                / 200.0
        };
        let before = dist(&model);
        let mut rng = Rng::new(6);
        let mut opt = crate::numkit::Optimizer::new(crate::numkit::OptimizerKind::Adam, 3e-3, model.trainable_params(Trainable::Full).len());
        let batch: Vec<&Sample> = vec![&point; 16];
        for _ in 0..1500 {
            let rec = NoiseRecord::draw(16, 2, &sched, &mut rng);
            let nb = NoisedBatch::from_record(&batch, &rec, &sched).unwrap();
            let eval = eval_losses(&model, &nb).unwrap();
            let g = loss_gradient(&model, &eval, &[1.0 / 16.0; 16], Trainable::Full).unwrap();
            let mut p = model.trainable_params(Trainable::Full);
            opt.descend(p.values_mut(), g.values()).unwrap();
            model.set_trainable_params(Trainable::Full, &p).unwrap();
        }
        let after = dist(&model);
        assert!(after < 0.5 * before, "before {before}, after {after}");
    }
}
