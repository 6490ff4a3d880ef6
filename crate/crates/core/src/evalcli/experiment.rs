//! Experiment orchestration: per seed, build the data and base model, train
//! every configured method, attack the result, and write the run files.
//!
//! Layout: `<out>/<method>/seed<k>/{runlog.csv, diag.csv, status.txt,
//! model.pllb, proxy.pllb, attacker.pllb, roc.csv, metrics.txt,
//! features.csv, smoothness.txt}`, plus `<out>/config.txt`,
//! `<out>/correlation.txt` and `<out>/summary.csv`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint;
use crate::diagnostics::{correlation_lines, correlation_verdict, SmoothnessSeries};
use crate::diffmodel::{generate, linear_schedule, LoraDenoiser, NoiseSchedule, Sample, DEFAULT_BETA_END, DEFAULT_BETA_START};
use crate::evalcli::config::ExperimentConfig;
use crate::evalcli::metrics::{kernel_quality, summarize, MetricReport, ScoreSet};
use crate::numkit::{Matrix, Rng};
use crate::privacy::{grad_feature_attack, train_posthoc_attacker, AttackModel, AttackerReport, FeatureProbe, GradientProbe};
use crate::trainers::{fmt_real, init_proxy_attacker, make_splits, pretrain_base, train, Method, RunLog, SplitDataset, ToyDistribution};
use crate::{Error, Result};

/// First id of samples drawn outside the experiment pool.
const REFERENCE_ID_BASE: u64 = 1 << 40;

/// Everything about one seed that every method shares.
#[derive(Clone, Debug)]
pub struct SeedContext {
    pub seed: u64,
    pub sched: NoiseSchedule,
    pub target: ToyDistribution,
    pub data: SplitDataset,
    /// Probe inside the defense loop.
    pub proxy_probe: FeatureProbe,
    /// Probe of the evaluation attacker; its noise is independent of the
    /// proxy probe's.
    pub posthoc_probe: FeatureProbe,
    pub gradient_probe: GradientProbe,
}

pub fn seed_context(cfg: &ExperimentConfig, seed: u64) -> Result<SeedContext> {
    let root = Rng::new(seed);
    let sched = linear_schedule(cfg.train.steps, DEFAULT_BETA_START, DEFAULT_BETA_END)?;
    let d = &cfg.data;
    let target_rng = root.stream("target");
    let target = ToyDistribution::new(d.kind, d.dim, d.classes, &target_rng)?;
    let pool = target.sample(d.splits.iter().sum(), 0, &mut target_rng.stream("pool"));
    let data = make_splits(&pool, d.splits, &mut root.stream("splits"))?;
    let proxy_probe = FeatureProbe::new(&sched, cfg.probe.features, cfg.probe.draws, root.stream("proxy-probe").next_u64())?;
    let posthoc_probe = FeatureProbe::new(&sched, cfg.probe.features, cfg.probe.eval_draws, root.stream("posthoc-probe").next_u64())?;
    let gradient_probe = GradientProbe::new(&sched, root.stream("gradient-probe").next_u64())?;
    Ok(SeedContext {
        seed,
        sched,
        target,
        data,
        proxy_probe,
        posthoc_probe,
        gradient_probe,
    })
}

/// Base network fitted to a pretraining pool disjoint from the experiment
/// pool: either fresh target draws or draws from a separately seeded
/// distribution of the same kind.
pub fn pretrained_base(cfg: &ExperimentConfig, ctx: &SeedContext) -> Result<LoraDenoiser> {
    let root = Rng::new(ctx.seed);
    let domain_rng = root.stream("pretrain-domain");
    let d = &cfg.data;
    let domain = if d.pretrain_shifted {
        ToyDistribution::new(d.kind, d.dim, d.classes, &domain_rng)?
    } else {
        ctx.target.clone()
    };
    let pool = domain.sample(d.pretrain_pool, REFERENCE_ID_BASE, &mut domain_rng.stream("pool"));
    pretrain_base(&cfg.model, &pool, &ctx.sched, &cfg.pretrain, &root.stream("pretrain"))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(Error::from)
}

fn save_segments(path: &Path, segments: &[(String, Matrix)]) -> Result<()> {
    checkpoint::write_file(path, &checkpoint::from_named_matrices(segments))
}

fn load_segments(path: &Path) -> Result<Vec<(String, Matrix)>> {
    checkpoint::to_named_matrices(&checkpoint::read_file(path)?)
}

/// Outcome of the training stage of one run.
#[derive(Clone, Debug)]
pub struct TrainedRun {
    pub method: Method,
    pub seed: u64,
    pub dir: PathBuf,
    pub log: RunLog,
}

impl TrainedRun {
    pub fn aborted(&self) -> bool {
        self.log.aborted.is_some()
    }
}

fn status_text(log: &RunLog) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "iterations={}", log.rows.len());
    let _ = writeln!(s, "hessian_points={}", log.hessian.len());
    match &log.aborted {
        Some(a) => {
            let _ = writeln!(s, "aborted=true");
            let _ = writeln!(s, "abort_iter={}", a.iter);
            let _ = writeln!(s, "abort_reason={}", a.reason.replace('\n', " "));
        }
        None => {
            let _ = writeln!(s, "aborted=false");
        }
    }
    s
}

/// Trains one method from the shared base and writes `runlog.csv`,
/// `diag.csv`, `status.txt`, `model.pllb` and, for attacker methods,
/// `proxy.pllb`. Logs are written even when the run aborts.
pub fn train_stage(cfg: &ExperimentConfig, ctx: &SeedContext, base: &LoraDenoiser, method: Method) -> Result<TrainedRun> {
    let tcfg = cfg.train_for(method, ctx.seed);
    let root = Rng::new(ctx.seed);
    let proxy = init_proxy_attacker(base, &ctx.data, &ctx.proxy_probe, &ctx.sched, &root.stream("proxy"))?;
    let outcome = train(&tcfg, &ctx.data, base.clone(), proxy, &ctx.proxy_probe, &ctx.sched, &root.stream("train"))?;
    let dir = cfg.run_dir(method, ctx.seed);
    fs::create_dir_all(&dir)?;
    write(&dir.join("runlog.csv"), outcome.log.runlog_csv())?;
    write(&dir.join("diag.csv"), outcome.log.diag_csv())?;
    write(&dir.join("status.txt"), status_text(&outcome.log))?;
    save_segments(&dir.join("model.pllb"), &outcome.model.to_segments())?;
    if method.uses_attacker() {
        save_segments(&dir.join("proxy.pllb"), &outcome.attacker.to_segments())?;
    }
    Ok(TrainedRun {
        method,
        seed: ctx.seed,
        dir,
        log: outcome.log,
    })
}

/// Attack and quality results of one trained model.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricReport,
    pub scores: ScoreSet,
    pub attacker: AttackModel,
    pub attacker_report: AttackerReport,
    pub member_feats: Matrix,
    pub nonmember_feats: Matrix,
    pub gradient: Option<MetricReport>,
}

fn refs(xs: &[Sample]) -> Vec<&Sample> {
    xs.iter().collect()
}

/// Unbiased polynomial-kernel MMD² between samples generated by `model` and
/// fresh draws from the target distribution, class-balanced on both sides.
pub fn generation_quality(cfg: &ExperimentConfig, ctx: &SeedContext, model: &LoraDenoiser) -> Result<f64> {
    let root = Rng::new(ctx.seed);
    let per_class = cfg.metrics.quality_samples;
    let mut gen_rng = root.stream("generate");
    let mut generated = Vec::with_capacity(per_class * cfg.data.classes);
    for y in 0..cfg.data.classes {
        generated.extend(generate(model, &ctx.sched, y, per_class, &mut gen_rng)?);
    }
    let reference = ctx
        .target
        .sample(per_class * cfg.data.classes, REFERENCE_ID_BASE, &mut root.stream("reference"));
    kernel_quality(&generated, &reference)
}

/// Fresh loss-feature attacker trained on `D_aux` and scored on `D_te`,
/// plus the quality statistic and, if enabled, the gradient-feature attack.
pub fn evaluate(cfg: &ExperimentConfig, ctx: &SeedContext, model: &LoraDenoiser) -> Result<Evaluation> {
    let root = Rng::new(ctx.seed);
    let (data, sched, probe) = (&ctx.data, &ctx.sched, &ctx.posthoc_probe);
    let (attacker, attacker_report) =
        train_posthoc_attacker(&data.aux_m, &data.aux_nm, model, probe, sched, &cfg.attack, &root.stream("posthoc"))?;
    let member_feats = probe.loss_features(model, &refs(&data.te_m), sched)?;
    let nonmember_feats = probe.loss_features(model, &refs(&data.te_nm), sched)?;
    let scores = ScoreSet::new(attacker.probs(&member_feats)?, attacker.probs(&nonmember_feats)?)?;
    let quality = match generation_quality(cfg, ctx, model) {
        Ok(q) => q,
        Err(Error::Numeric(_)) => f64::NAN,
        Err(e) => return Err(e),
    };
    let report = MetricReport::from_scores(&scores, quality)?;
    let gradient = if cfg.metrics.gradient_attack {
        let gp = &ctx.gradient_probe;
        let (h, _) = grad_feature_attack(&data.aux_m, &data.aux_nm, model, gp, sched, &cfg.attack, &root.stream("gradient-attack"))?;
        let m = gp.gradient_features(model, &refs(&data.te_m), sched)?;
        let n = gp.gradient_features(model, &refs(&data.te_nm), sched)?;
        Some(MetricReport::from_scores(&ScoreSet::new(h.probs(&m)?, h.probs(&n)?)?, quality)?)
    } else {
        None
    };
    Ok(Evaluation {
        report,
        scores,
        attacker,
        attacker_report,
        member_feats,
        nonmember_feats,
        gradient,
    })
}

fn report_lines(prefix: &str, r: &MetricReport, out: &mut String) {
    let _ = writeln!(out, "{prefix}asr={}", fmt_real(r.asr));
    let _ = writeln!(out, "{prefix}auc={}", fmt_real(r.auc));
    let _ = writeln!(out, "{prefix}auc_dev={}", fmt_real(r.auc_dev));
    let _ = writeln!(out, "{prefix}tpr_at_5fpr={}", fmt_real(r.tpr_at_5fpr));
}

fn features_csv(ctx: &SeedContext, ev: &Evaluation) -> String {
    let f = ev.member_feats.cols();
    let mut s = String::from("split,id,member,score");
    for j in 0..f {
        let _ = write!(s, ",f{j}");
    }
    s.push('\n');
    let sides = [
        ("te_m", &ctx.data.te_m, &ev.member_feats, &ev.scores.member_scores, 1),
        ("te_nm", &ctx.data.te_nm, &ev.nonmember_feats, &ev.scores.nonmember_scores, 0),
    ];
    for (name, samples, feats, scores, member) in sides {
        for (i, smp) in samples.iter().enumerate() {
            let _ = write!(s, "{name},{},{member},{}", smp.id, fmt_real(scores[i]));
            for v in feats.row(i) {
                let _ = write!(s, ",{}", fmt_real(*v));
            }
            s.push('\n');
        }
    }
    s
}

/// Reads a `key=value` file into an ordered map.
pub fn read_kv(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect())
}

fn missing_run(dir: &Path) -> Error {
    Error::Config(format!("no trained run in {}", dir.display()))
}

/// Loads a trained run's model checkpoint and evaluates it; writes
/// `attacker.pllb`, `roc.csv`, `features.csv` and `metrics.txt`.
pub fn eval_stage(cfg: &ExperimentConfig, ctx: &SeedContext, method: Method) -> Result<Evaluation> {
    let dir = cfg.run_dir(method, ctx.seed);
    let model_path = dir.join("model.pllb");
    if !model_path.exists() {
        return Err(missing_run(&dir));
    }
    let model = LoraDenoiser::from_segments(&load_segments(&model_path)?)?;
    let status = read_kv(&dir.join("status.txt")).map_err(|_| missing_run(&dir))?;
    let ev = evaluate(cfg, ctx, &model)?;

    save_segments(&dir.join("attacker.pllb"), &ev.attacker.to_segments())?;
    let mut roc = String::from("fpr,tpr\n");
    for (fpr, tpr) in &ev.report.roc {
        let _ = writeln!(roc, "{},{}", fmt_real(*fpr), fmt_real(*tpr));
    }
    write(&dir.join("roc.csv"), roc)?;
    write(&dir.join("features.csv"), features_csv(ctx, &ev))?;

    let mut m = String::new();
    let _ = writeln!(m, "method={method}");
    let _ = writeln!(m, "seed={}", ctx.seed);
    for key in ["iterations", "hessian_points", "aborted", "abort_iter"] {
        if let Some(v) = status.get(key) {
            let _ = writeln!(m, "{key}={v}");
        }
    }
    report_lines("", &ev.report, &mut m);
    let _ = writeln!(m, "quality={}", fmt_real(ev.report.quality));
    let _ = writeln!(m, "attacker.best_epoch={}", ev.attacker_report.best_epoch);
    let _ = writeln!(m, "attacker.best_aux_asr={}", fmt_real(ev.attacker_report.best_aux_asr));
    if let Some(g) = &ev.gradient {
        report_lines("gradient.", g, &mut m);
    }
    write(&dir.join("metrics.txt"), m)?;
    Ok(ev)
}

/// Gradient-norm / Hessian-norm series from a run's `diag.csv`.
pub fn read_smoothness(path: &Path, method: Method) -> Result<SmoothnessSeries> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| Error::Format(format!("{} lacks column {name}", path.display())))
    };
    let (ci, cg, ch) = (col("iter")?, col("grad_norm")?, col("hessian_norm")?);
    let mut s = SmoothnessSeries {
        method,
        iters: Vec::new(),
        grad_norms: Vec::new(),
        hessian_norms: Vec::new(),
    };
    let num = |v: &str| v.parse::<f64>().map_err(|e| Error::Format(format!("{}: {e}", path.display())));
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != header.len() {
            return Err(Error::Format(format!("{}: ragged row", path.display())));
        }
        if cells[ch].is_empty() {
            continue;
        }
        s.iters.push(cells[ci].parse().map_err(|e| Error::Format(format!("{}: {e}", path.display())))?);
        s.grad_norms.push(num(cells[cg])?);
        s.hessian_norms.push(num(cells[ch])?);
    }
    Ok(s)
}

/// Per-run `smoothness.txt` and the per-seed MP/SMP verdicts in
/// `<out>/correlation.txt`. Returns the correlation report text.
pub fn diagnose_stage(cfg: &ExperimentConfig) -> Result<String> {
    let mut report = String::new();
    for &seed in &cfg.seeds {
        let mut series = BTreeMap::new();
        for &method in &cfg.methods {
            let dir = cfg.run_dir(method, seed);
            let diag = dir.join("diag.csv");
            if !diag.exists() {
                return Err(missing_run(&dir));
            }
            let s = read_smoothness(&diag, method)?;
            let mut text = format!("method={method}\nseed={seed}\nhessian_points={}\n", s.len());
            match s.correlation() {
                Ok(c) => text.push_str(&correlation_lines("smooth", &c)),
                Err(e) => {
                    let _ = writeln!(text, "smooth.unavailable={e}");
                }
            }
            write(&dir.join("smoothness.txt"), text)?;
            series.insert(method.name(), s);
        }
        if let (Some(mp), Some(smp)) = (series.get(Method::MpLora.name()), series.get(Method::SmpLora.name())) {
            let _ = writeln!(report, "[seed{seed}]");
            match correlation_verdict(mp, smp) {
                Ok(v) => report.push_str(&v.to_report()),
                Err(e) => {
                    let _ = writeln!(report, "unavailable={e}");
                }
            }
        }
    }
    write(&cfg.out.join("correlation.txt"), &report)?;
    Ok(report)
}

/// Metrics aggregated over seeds into `metric,method,mean,stderr,n` rows.
pub const SUMMARY_METRICS: [&str; 7] = ["asr", "auc", "auc_dev", "tpr_at_5fpr", "quality", "aborted", "smooth.pcc"];

pub fn report_stage(cfg: &ExperimentConfig) -> Result<String> {
    let mut out = String::from("metric,method,mean,stderr,n\n");
    let mut table: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for (mi, &method) in cfg.methods.iter().enumerate() {
        for &seed in &cfg.seeds {
            let dir = cfg.run_dir(method, seed);
            let mut kv = read_kv(&dir.join("metrics.txt")).map_err(|_| missing_run(&dir))?;
            if let Ok(sm) = read_kv(&dir.join("smoothness.txt")) {
                kv.extend(sm);
            }
            for (ki, key) in SUMMARY_METRICS.iter().enumerate() {
                let value = match (key, kv.get(*key)) {
                    (&"aborted", Some(v)) => Some(if v == "true" { 1.0 } else { 0.0 }),
                    (_, Some(v)) => v.parse::<f64>().ok(),
                    (_, None) => None,
                };
                if let Some(v) = value {
                    table.entry((ki, mi)).or_default().push(v);
                }
            }
        }
    }
    for (ki, key) in SUMMARY_METRICS.iter().enumerate() {
        for (mi, method) in cfg.methods.iter().enumerate() {
            if let Some(vals) = table.get(&(ki, mi)) {
                let s = summarize(vals)?;
                let _ = writeln!(out, "{key},{method},{},{},{}", fmt_real(s.mean), fmt_real(s.stderr), s.n);
            }
        }
    }
    write(&cfg.out.join("summary.csv"), &out)?;
    Ok(out)
}

/// What a full experiment produced.
#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub runs: Vec<TrainedRun>,
    pub correlation: String,
    pub summary: String,
}

impl ExperimentOutcome {
    pub fn any_aborted(&self) -> bool {
        self.runs.iter().any(TrainedRun::aborted)
    }
}

/// Training stage for every seed and method.
pub fn train_all(cfg: &ExperimentConfig) -> Result<Vec<TrainedRun>> {
    cfg.validate()?;
    cfg.prepare_output()?;
    write(&cfg.out.join("config.txt"), cfg.to_text())?;
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let ctx = seed_context(cfg, seed)?;
        let base = pretrained_base(cfg, &ctx)?;
        for &method in &cfg.methods {
            runs.push(train_stage(cfg, &ctx, &base, method)?);
        }
    }
    Ok(runs)
}

/// Evaluation stage for every seed and method, from the saved checkpoints.
pub fn eval_all(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    cfg.prepare_output()?;
    for &seed in &cfg.seeds {
        let ctx = seed_context(cfg, seed)?;
        for &method in &cfg.methods {
            eval_stage(cfg, &ctx, method)?;
        }
    }
    Ok(())
}

/// Train, evaluate, diagnose and summarise. Aborted runs keep their logs and
/// are still evaluated at their last finite state.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let runs = train_all(cfg)?;
    eval_all(cfg)?;
    let correlation = diagnose_stage(cfg)?;
    let summary = report_stage(cfg)?;
    Ok(ExperimentOutcome {
        runs,
        correlation,
        summary,
    })
}
