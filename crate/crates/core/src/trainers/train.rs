//! The alternating defense loop and its run log.

use std::fmt::Write as _;

use crate::diagnostics::{component_scales, grad_norm_of, grad_scale_of, hessian_norm};
use crate::diffmodel::{LoraDenoiser, NoiseRecord, NoiseSchedule, NoisedBatch, Sample};
use crate::numkit::{Optimizer, OptimizerKind, Rng};
use crate::privacy::{proxy_ascent_step, AttackModel, FeatureProbe};
use crate::trainers::data::{PairStream, SplitDataset};
use crate::trainers::objective::{combine, composite, composite_parts, CompositeInputs, Method};
use crate::{ensure, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub lambda: f64,
    pub delta: f64,
    /// Proxy attacker learning rate.
    pub eta1: f64,
    /// Denoiser learning rate.
    pub eta2: f64,
    pub epochs: usize,
    /// Training batch size; also the per-side size of each auxiliary pair.
    pub batch: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub attacker_optimizer: OptimizerKind,
    pub rank: usize,
    pub steps: usize,
    /// Hessian-norm cadence in iterations; 0 disables the estimate.
    pub diag_every: usize,
    pub power_iters: usize,
    pub power_tol: f64,
    /// Redraw the proxy probe's noise every iteration instead of reusing the
    /// probe's fixed draws.
    pub refresh_probe: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::SmpLora,
            lambda: 0.05,
            delta: 1e-5,
            eta1: 1e-5,
            eta2: 1e-4,
            epochs: 400,
            batch: 4,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            attacker_optimizer: OptimizerKind::Adam,
            rank: 4,
            steps: 100,
            diag_every: 100,
            power_iters: crate::numkit::DEFAULT_POWER_ITERS,
            power_tol: crate::numkit::DEFAULT_POWER_TOL,
            refresh_probe: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!((0.0..=1.0).contains(&self.lambda), Config, "lambda must lie in [0, 1], got {}", self.lambda);
        ensure!(self.delta > 0.0, Config, "delta must be positive, got {}", self.delta);
        ensure!(self.eta1 >= 0.0 && self.eta2 >= 0.0, Config, "learning rates must be non-negative");
        ensure!(self.batch >= 1, Config, "batch must be at least 1");
        ensure!(self.rank >= 1, Config, "rank must be at least 1");
        ensure!(self.steps >= 1, Config, "diffusion steps must be at least 1");
        ensure!(self.power_iters >= 1 && self.power_tol > 0.0, Config, "invalid power-iteration settings");
        Ok(())
    }
}

/// One training iteration's readings, taken before the parameter update.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub epoch: usize,
    pub l_ada: f64,
    pub g: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub grad_scale: f64,
    pub scale_ada: f64,
    pub scale_gain: f64,
    pub f1: f64,
    pub f2: f64,
    /// Frozen parameters match their initial fingerprint.
    pub frozen_intact: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HessianRow {
    pub iter: usize,
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AbortRecord {
    pub iter: usize,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub rows: Vec<LogRow>,
    pub hessian: Vec<HessianRow>,
    pub aborted: Option<AbortRecord>,
}

pub const RUNLOG_HEADER: &str =
    "iter,epoch,l_ada,g,loss,grad_norm,grad_scale,grad_scale_ada,grad_scale_gain,rescale_f1,rescale_f2";
pub const DIAG_HEADER: &str = "iter,grad_norm,grad_scale,scale_ada,scale_gain,f1,f2,hessian_norm,converged";

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

impl RunLog {
    pub fn runlog_csv(&self) -> String {
        let mut out = String::from(RUNLOG_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.iter,
                r.epoch,
                fmt_real(r.l_ada),
                fmt_real(r.g),
                fmt_real(r.loss),
                fmt_real(r.grad_norm),
                fmt_real(r.grad_scale),
                fmt_real(r.scale_ada),
                fmt_real(r.scale_gain),
                fmt_real(r.f1),
                fmt_real(r.f2)
            );
        }
        out
    }

    pub fn diag_csv(&self) -> String {
        let mut out = String::from(DIAG_HEADER);
        out.push('\n');
        let mut h = self.hessian.iter().peekable();
        for r in &self.rows {
            let (hn, conv) = match h.peek() {
                Some(hr) if hr.iter == r.iter => {
                    let hr = h.next().expect("peeked");
                    (fmt_real(hr.value), hr.converged.to_string())
                }
                _ => (String::new(), String::new()),
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.iter,
                fmt_real(r.grad_norm),
                fmt_real(r.grad_scale),
                fmt_real(r.scale_ada),
                fmt_real(r.scale_gain),
                fmt_real(r.f1),
                fmt_real(r.f2),
                hn,
                conv
            );
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: LoraDenoiser,
    pub attacker: AttackModel,
    pub log: RunLog,
}

impl TrainOutcome {
    pub fn aborted(&self) -> bool {
        self.log.aborted.is_some()
    }
}

/// Frozen inputs of the training objective at one iteration, owned so that
/// the Hessian closure can replay them.
struct FrozenStep<'a> {
    probe: FeatureProbe,
    tr_batch: NoisedBatch,
    members: Vec<&'a Sample>,
    nonmembers: Vec<&'a Sample>,
}

/// Runs the configured method on `data.d_tr()`.
///
/// Per iteration: for attacker methods, ascend the proxy attacker on a
/// balanced auxiliary pair, then evaluate the objective on a fresh training
/// batch with the gain taken on the same pair (attacker fixed), log, and
/// descend the trainable set. A non-finite objective or gradient ends the run
/// with an [`AbortRecord`]; everything logged so far is kept.
pub fn train(
    cfg: &TrainConfig,
    data: &SplitDataset,
    model: LoraDenoiser,
    attacker: AttackModel,
    probe: &FeatureProbe,
    sched: &NoiseSchedule,
    rng: &Rng,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let method = cfg.method;
    let mode = method.trainable();
    let d_tr = data.d_tr();
    ensure!(!d_tr.is_empty(), Config, "training set is empty");
    if method.uses_attacker() {
        ensure!(
            !data.aux_m.is_empty() && !data.aux_nm.is_empty(),
            Config,
            "{method} needs both auxiliary sides"
        );
    }

    let mut model = model;
    let mut attacker = attacker;
    let mut theta = model.trainable_params(mode);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.eta2, theta.len());
    let mut opt_attacker = Optimizer::new(cfg.attacker_optimizer, cfg.eta1, attacker.params().len());
    let frozen_fp = model.frozen_snapshot().fingerprint();
    let check_frozen = mode == crate::diffmodel::Trainable::Lora;

    let mut batch_rng = rng.stream("train-batches");
    let mut noise_rng = rng.stream("train-noise");
    let mut hess_rng = rng.stream("hessian");
    let mut probe_rng = rng.stream("probe-noise");
    let mut pairs = if method.uses_attacker() {
        Some(PairStream::new(&data.aux_m, &data.aux_nm, cfg.batch, rng.stream("aux-pairs"))?)
    } else {
        None
    };

    let mut log = RunLog::default();
    let mut iter = 0;
    'epochs: for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..d_tr.len()).collect();
        batch_rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch) {
            iter += 1;
            let iter_probe = if cfg.refresh_probe {
                FeatureProbe {
                    seed: probe_rng.next_u64(),
                    ..probe.clone()
                }
            } else {
                probe.clone()
            };
            let step = match run_iteration(
                cfg,
                &model,
                &mut attacker,
                &mut opt_attacker,
                pairs.as_mut(),
                chunk.iter().map(|&i| &d_tr[i]).collect(),
                iter_probe,
                sched,
                &mut noise_rng,
            ) {
                Ok(s) => s,
                Err(Error::Numeric(msg)) => {
                    log.aborted = Some(AbortRecord { iter, reason: msg });
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            let (eval, parts, frozen) = step;
            if !eval.loss.is_finite() || !eval.grad.is_finite() {
                log.aborted = Some(AbortRecord {
                    iter,
                    reason: "non-finite objective or gradient".into(),
                });
                break 'epochs;
            }
            let (scale_ada, scale_gain) = if method.uses_attacker() {
                component_scales(&parts, method, cfg.lambda, cfg.delta)?
            } else {
                (grad_scale_of(&parts.grad_ada), 0.0)
            };
            log.rows.push(LogRow {
                iter,
                epoch,
                l_ada: eval.l_ada,
                g: eval.g,
                loss: eval.loss,
                grad_norm: grad_norm_of(&eval.grad),
                grad_scale: grad_scale_of(&eval.grad),
                scale_ada,
                scale_gain,
                f1: eval.f1,
                f2: eval.f2,
                frozen_intact: !check_frozen || model.frozen_snapshot().fingerprint() == frozen_fp,
            });

            if cfg.diag_every > 0 && iter % cfg.diag_every == 0 {
                let inp = CompositeInputs {
                    tr_batch: &frozen.tr_batch,
                    members: &frozen.members,
                    nonmembers: &frozen.nonmembers,
                    attacker: &attacker,
                    probe: &frozen.probe,
                    sched,
                };
                let grad_fn = |th: &[f64]| -> Result<Vec<f64>> {
                    let mut m = model.clone();
                    m.set_trainable_params(mode, &theta.with_values(th.to_vec())?)?;
                    Ok(composite(&m, &inp, method, cfg.lambda, cfg.delta)?.grad.into_values())
                };
                match hessian_norm(grad_fn, theta.values(), cfg.power_iters, cfg.power_tol, &mut hess_rng) {
                    Ok(est) => log.hessian.push(HessianRow {
                        iter,
                        value: est.value,
                        converged: est.converged,
                        iterations: est.iterations,
                    }),
                    Err(Error::Numeric(msg)) => {
                        log.aborted = Some(AbortRecord {
                            iter,
                            reason: format!("Hessian estimate: {msg}"),
                        });
                        break 'epochs;
                    }
                    Err(e) => return Err(e),
                }
            }

            opt.descend(theta.values_mut(), eval.grad.values())?;
            if !theta.is_finite() {
                log.aborted = Some(AbortRecord {
                    iter,
                    reason: "non-finite parameters after update".into(),
                });
                break 'epochs;
            }
            model.set_trainable_params(mode, &theta)?;
        }
    }
    Ok(TrainOutcome { model, attacker, log })
}

#[allow(clippy::too_many_arguments)]
fn run_iteration<'a>(
    cfg: &TrainConfig,
    model: &LoraDenoiser,
    attacker: &mut AttackModel,
    opt_attacker: &mut Optimizer,
    pairs: Option<&mut PairStream<'a>>,
    batch: Vec<&Sample>,
    probe: FeatureProbe,
    sched: &NoiseSchedule,
    noise_rng: &mut Rng,
) -> Result<(crate::trainers::CompositeEval, crate::trainers::CompositeParts, FrozenStep<'a>)> {
    let (members, nonmembers) = match pairs {
        Some(stream) => {
            let (m, n) = stream.next_pair()?;
            let fm = probe.loss_features(model, &m, sched)?;
            let fnm = probe.loss_features(model, &n, sched)?;
            proxy_ascent_step(attacker, &fm, &fnm, opt_attacker)?;
            (m, n)
        }
        None => (Vec::new(), Vec::new()),
    };
    let record = NoiseRecord::draw(batch.len(), model.data_dim(), sched, noise_rng);
    let tr_batch = NoisedBatch::from_record(&batch, &record, sched)?;
    let inp = CompositeInputs {
        tr_batch: &tr_batch,
        members: &members,
        nonmembers: &nonmembers,
        attacker,
        probe: &probe,
        sched,
    };
    let parts = composite_parts(model, &inp, cfg.method)?;
    let eval = combine(&parts, cfg.method, cfg.lambda, cfg.delta)?;
    Ok((
        eval,
        parts,
        FrozenStep {
            probe,
            tr_batch,
            members,
            nonmembers,
        },
    ))
}

/// Proxy attacker for `train`: standard architecture with its input map
/// fitted to the initial model's auxiliary features.
pub fn init_proxy_attacker(
    model: &LoraDenoiser,
    data: &SplitDataset,
    probe: &FeatureProbe,
    sched: &NoiseSchedule,
    rng: &Rng,
) -> Result<AttackModel> {
    let mut h = AttackModel::standard(probe.features(), &mut rng.stream("proxy-init"))?;
    let aux = data.d_aux();
    if aux.len() >= 2 {
        let feats = probe.loss_features(model, &aux.iter().collect::<Vec<_>>(), sched)?;
        h.fit_normalization(&feats)?;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmodel::{linear_schedule, DenoiserConfig, Trainable};
    use crate::trainers::data::{make_splits, make_toy_pool, ToyKind};

    struct Setup {
        data: SplitDataset,
        model: LoraDenoiser,
        probe: FeatureProbe,
        sched: NoiseSchedule,
        rng: Rng,
    }

    fn setup(seed: u64) -> Setup {
        let rng = Rng::new(seed);
        let pool = make_toy_pool(ToyKind::GaussMix, 16, 2, 2, &rng.stream("pool")).unwrap();
        let data = make_splits(&pool, [2, 2, 2, 2], &mut rng.stream("splits")).unwrap();
        let cfg = DenoiserConfig {
            data_dim: 2,
            time_dim: 4,
            cond_dim: 2,
            classes: 2,
            hidden: vec![16],
            rank: 1,
            lora_alpha: 2.0,
        };
        let model = LoraDenoiser::new(&cfg, &mut rng.stream("model")).unwrap();
        let sched = linear_schedule(20, 1e-3, 0.2).unwrap();
        let probe = FeatureProbe::new(&sched, 2, 1, seed).unwrap();
        Setup {
            data,
            model,
            probe,
            sched,
            rng,
        }
    }

    fn config(method: Method, epochs: usize) -> TrainConfig {
        TrainConfig {
            method,
            epochs,
            batch: 2,
            eta1: 1e-3,
            eta2: 1e-2,
            rank: 1,
            steps: 20,
            diag_every: 5,
            power_iters: 10,
            ..TrainConfig::default()
        }
    }

    fn run(method: Method, epochs: usize, seed: u64) -> (Setup, TrainOutcome) {
        let s = setup(seed);
        let out = run_with(&s, &config(method, epochs));
        (s, out)
    }

    fn run_with(s: &Setup, cfg: &TrainConfig) -> TrainOutcome {
        let h = init_proxy_attacker(&s.model, &s.data, &s.probe, &s.sched, &s.rng.stream("proxy")).unwrap();
        train(cfg, &s.data, s.model.clone(), h, &s.probe, &s.sched, &s.rng.stream("train")).unwrap()
    }

    #[test]
    fn lora_loss_decreases_on_four_points() {
        for seed in 11..17 {
            let rng = Rng::new(seed);
            let pool = make_toy_pool(ToyKind::GaussMix, 8, 8, 2, &rng.stream("pool")).unwrap();
            let data = make_splits(&pool, [2, 2, 2, 2], &mut rng.stream("splits")).unwrap();
            let dcfg = DenoiserConfig {
                data_dim: 8,
                time_dim: 4,
                cond_dim: 4,
                classes: 2,
                hidden: vec![32],
                rank: 4,
                lora_alpha: 8.0,
            };
            let sched = linear_schedule(20, 1e-3, 0.2).unwrap();
            // An inflated base leaves a large output error for the adapters.
            let mut model = LoraDenoiser::new(&dcfg, &mut rng.stream("model")).unwrap();
            let full = model.trainable_params(Trainable::Full);
            let inflated = full.values().iter().map(|v| 6.0 * v).collect();
            model.set_trainable_params(Trainable::Full, &full.with_values(inflated).unwrap()).unwrap();
            let s = Setup {
                data,
                model,
                probe: FeatureProbe::new(&sched, 2, 1, seed).unwrap(),
                sched,
                rng,
            };
            let cfg = TrainConfig {
                batch: 4,
                eta2: 1e-2,
                rank: 4,
                steps: 20,
                diag_every: 0,
                ..config(Method::Lora, 50)
            };
            let out = run_with(&s, &cfg);
            assert_eq!(out.log.rows.len(), 50);
            let windows: Vec<f64> = out
                .log
                .rows
                .chunks(10)
                .map(|w| w.iter().map(|r| r.loss).sum::<f64>() / w.len() as f64)
                .collect();
            assert!(windows[4] < 0.5 * windows[0], "seed {seed}: {windows:?}");
            if seed == 11 {
                assert!(windows.windows(2).all(|w| w[1] < w[0]), "seed {seed}: {windows:?}");
            }
        }
    }

    #[test]
    fn log_shape_and_hessian_cadence() {
        let (_, out) = run(Method::SmpLora, 5, 1);
        assert!(out.log.aborted.is_none());
        // |D_tr| = 4 in batches of 2.
        assert_eq!(out.log.rows.len(), 10);
        assert_eq!(out.log.rows.iter().map(|r| r.iter).collect::<Vec<_>>(), (1..=10).collect::<Vec<_>>());
        assert_eq!(out.log.hessian.iter().map(|h| h.iter).collect::<Vec<_>>(), vec![5, 10]);
        assert!(out.log.hessian.iter().all(|h| h.value.is_finite() && h.value >= 0.0));
        assert_eq!(out.log.runlog_csv().lines().count(), 11);
        let diag = out.log.diag_csv();
        assert_eq!(diag.lines().count(), 11);
        assert_eq!(diag.lines().skip(1).filter(|l| !l.ends_with(",,")).count(), 2);
    }

    #[test]
    fn frozen_weights_survive_adapter_methods() {
        for method in [Method::Lora, Method::MpLora, Method::SmpLora] {
            let (s, out) = run(method, 3, 2);
            assert_eq!(out.model.frozen_snapshot(), s.model.frozen_snapshot(), "{method}");
            assert!(out.log.rows.iter().all(|r| r.frozen_intact));
            assert_ne!(out.model.trainable_params(Trainable::Lora), s.model.trainable_params(Trainable::Lora));
        }
        let (s, out) = run(Method::FullFt, 3, 2);
        assert_ne!(out.model.frozen_snapshot(), s.model.frozen_snapshot());
    }

    #[test]
    fn objective_invariants_hold_every_iteration() {
        for method in [Method::MpLora, Method::SmpLora, Method::SmpFullFt] {
            let cfg = config(method, 4);
            let (_, out) = run(method, 4, 3);
            for r in &out.log.rows {
                assert!(r.g <= 0.0);
                assert!(1.0 - cfg.lambda * r.g + cfg.delta >= 1.0 + cfg.delta);
                assert!(r.f1 > 0.0 && r.f1 <= 1.0);
                if method.objective() == crate::trainers::Objective::Ratio {
                    assert!(0.0 <= r.loss && r.loss <= r.l_ada);
                } else {
                    assert_eq!(r.loss, r.l_ada + cfg.lambda * r.g);
                }
            }
        }
        let (_, out) = run(Method::Lora, 2, 3);
        assert!(out.log.rows.iter().all(|r| r.g == 0.0 && r.loss == r.l_ada && r.scale_gain == 0.0));
    }

    #[test]
    fn runs_replay_exactly() {
        let (_, a) = run(Method::SmpLora, 3, 4);
        let (_, b) = run(Method::SmpLora, 3, 4);
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.runlog_csv(), b.log.runlog_csv());
        assert_eq!(a.model.trainable_params(Trainable::Lora), b.model.trainable_params(Trainable::Lora));
        let (_, c) = run(Method::SmpLora, 3, 5);
        assert_ne!(a.log.rows, c.log.rows);
    }

    #[test]
    fn divergence_aborts_and_keeps_the_log() {
        let s = setup(6);
        let cfg = TrainConfig {
            optimizer: OptimizerKind::Sgd,
            eta2: 1e300,
            diag_every: 0,
            ..config(Method::MpLora, 5)
        };
        let out = run_with(&s, &cfg);
        let abort = out.log.aborted.as_ref().expect("run must abort");
        assert!(abort.iter >= 1);
        assert!(out.log.rows.len() >= abort.iter - 1);
        assert!(out.log.rows.iter().all(|r| r.iter <= abort.iter));
        assert!(out.model.trainable_params(Trainable::Lora).is_finite() || out.aborted());
    }

    #[test]
    fn refreshed_probe_changes_the_gain_but_not_the_plain_loss() {
        let s = setup(7);
        let fixed = run_with(&s, &config(Method::SmpLora, 2));
        let fresh = run_with(&s, &TrainConfig { refresh_probe: true, ..config(Method::SmpLora, 2) });
        assert_eq!(fixed.log.rows[0].l_ada, fresh.log.rows[0].l_ada);
        assert_ne!(fixed.log.rows[0].g, fresh.log.rows[0].g);
    }

    #[test]
    fn invalid_settings_are_config_errors() {
        let s = setup(8);
        for cfg in [
            TrainConfig { lambda: 1.5, ..config(Method::SmpLora, 1) },
            TrainConfig { delta: 0.0, ..config(Method::SmpLora, 1) },
            TrainConfig { batch: 0, ..config(Method::SmpLora, 1) },
        ] {
            let h = init_proxy_attacker(&s.model, &s.data, &s.probe, &s.sched, &s.rng).unwrap();
            let err = train(&cfg, &s.data, s.model.clone(), h, &s.probe, &s.sched, &s.rng).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{err}");
        }
        let mut empty = s.data.clone();
        empty.aux_nm.clear();
        let h = init_proxy_attacker(&s.model, &s.data, &s.probe, &s.sched, &s.rng).unwrap();
        let err = train(&config(Method::MpLora, 1), &empty, s.model.clone(), h, &s.probe, &s.sched, &s.rng).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
