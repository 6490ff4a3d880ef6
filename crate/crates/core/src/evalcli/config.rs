//! Experiment configuration: flat `key = value` text grouped under
//! `[section]` headers, validated before any work starts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::diffmodel::DenoiserConfig;
use crate::numkit::OptimizerKind;
use crate::privacy::AttackerTraining;
use crate::trainers::{Method, PretrainConfig, ToyKind, TrainConfig};
use crate::{ensure, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub kind: ToyKind,
    pub dim: usize,
    pub classes: usize,
    /// `(aux_m, te_m, aux_nm, te_nm)`.
    pub splits: [usize; 4],
    /// Size of the pretraining pool.
    pub pretrain_pool: usize,
    /// Draw the pretraining pool from a separately seeded distribution of
    /// the same kind instead of the target distribution.
    pub pretrain_shifted: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: ToyKind::GaussMix,
            dim: 8,
            classes: 2,
            splits: [32, 32, 32, 32],
            pretrain_pool: 512,
            pretrain_shifted: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub features: usize,
    /// Noise draws per feature for the proxy attacker inside training.
    pub draws: usize,
    /// Noise draws per feature for the evaluation attackers.
    pub eval_draws: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            features: 8,
            draws: 4,
            eval_draws: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricConfig {
    /// Generated samples per class for the quality statistic; the reference
    /// set has the same total size.
    pub quality_samples: usize,
    /// Also run the gradient-feature attacker.
    pub gradient_attack: bool,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            quality_samples: 64,
            gradient_attack: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub out: PathBuf,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub data: DataConfig,
    pub model: DenoiserConfig,
    pub pretrain: PretrainConfig,
    /// `method` and `seed` are taken per run from `methods` and `seeds`.
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub attack: AttackerTraining,
    pub metrics: MetricConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("out"),
            seeds: vec![1, 2, 3],
            methods: vec![Method::Lora, Method::MpLora, Method::SmpLora],
            data: DataConfig::default(),
            model: DenoiserConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
            attack: AttackerTraining::default(),
            metrics: MetricConfig::default(),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("cannot parse {key} = {v:?}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| parse_value(key, p.trim())).collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// Raw `section.key → value` table.
fn parse_table(text: &str) -> Result<BTreeMap<String, String>> {
    let mut table = BTreeMap::new();
    let mut section = String::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| Error::Config(format!("line {}: unterminated section header", n + 1)))?;
            section = name.trim().to_string();
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        let key = if section.is_empty() {
            k.trim().to_string()
        } else {
            format!("{section}.{}", k.trim())
        };
        ensure!(
            table.insert(key.clone(), v.trim().to_string()).is_none(),
            Config,
            "line {}: duplicate key {key}",
            n + 1
        );
    }
    Ok(table)
}

struct Fields(BTreeMap<String, String>);

impl Fields {
    fn take<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.0.remove(key) {
            *slot = parse_value(key, &v)?;
        }
        Ok(())
    }

    fn take_list<T: FromStr>(&mut self, key: &str, slot: &mut Vec<T>) -> Result<()> {
        if let Some(v) = self.0.remove(key) {
            *slot = parse_list(key, &v)?;
        }
        Ok(())
    }
}

impl ExperimentConfig {
    /// Parses config text; absent keys keep their defaults, unknown keys are
    /// rejected. The result is validated.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        let mut f = Fields(parse_table(text)?);
        let mut out = c.out.to_string_lossy().into_owned();
        f.take("experiment.out", &mut out)?;
        c.out = PathBuf::from(out);
        f.take_list("experiment.seeds", &mut c.seeds)?;
        f.take_list("experiment.methods", &mut c.methods)?;

        f.take("data.kind", &mut c.data.kind)?;
        f.take("data.dim", &mut c.data.dim)?;
        f.take("data.classes", &mut c.data.classes)?;
        let mut splits = c.data.splits.to_vec();
        f.take_list("data.splits", &mut splits)?;
        c.data.splits = splits
            .try_into()
            .map_err(|_| Error::Config("data.splits needs four counts".into()))?;
        f.take("data.pretrain_pool", &mut c.data.pretrain_pool)?;
        f.take("data.pretrain_shifted", &mut c.data.pretrain_shifted)?;

        f.take_list("model.hidden", &mut c.model.hidden)?;
        f.take("model.time_dim", &mut c.model.time_dim)?;
        f.take("model.cond_dim", &mut c.model.cond_dim)?;
        f.take("model.lora_alpha", &mut c.model.lora_alpha)?;

        f.take("pretrain.epochs", &mut c.pretrain.epochs)?;
        f.take("pretrain.lr", &mut c.pretrain.lr)?;
        f.take("pretrain.batch", &mut c.pretrain.batch)?;

        let t = &mut c.train;
        f.take("train.lambda", &mut t.lambda)?;
        f.take("train.delta", &mut t.delta)?;
        f.take("train.eta1", &mut t.eta1)?;
        f.take("train.eta2", &mut t.eta2)?;
        f.take("train.epochs", &mut t.epochs)?;
        f.take("train.batch", &mut t.batch)?;
        f.take("train.optimizer", &mut t.optimizer)?;
        f.take("train.attacker_optimizer", &mut t.attacker_optimizer)?;
        f.take("train.rank", &mut t.rank)?;
        f.take("train.steps", &mut t.steps)?;
        f.take("train.diag_every", &mut t.diag_every)?;
        f.take("train.power_iters", &mut t.power_iters)?;
        f.take("train.power_tol", &mut t.power_tol)?;
        f.take("train.refresh_probe", &mut t.refresh_probe)?;

        f.take("probe.features", &mut c.probe.features)?;
        f.take("probe.draws", &mut c.probe.draws)?;
        f.take("probe.eval_draws", &mut c.probe.eval_draws)?;

        f.take("attack.epochs", &mut c.attack.epochs)?;
        f.take("attack.lr", &mut c.attack.lr)?;
        f.take("attack.per_side", &mut c.attack.per_side)?;
        f.take("attack.optimizer", &mut c.attack.optimizer)?;
        f.take_list("attack.hidden", &mut c.attack.hidden)?;

        f.take("metrics.quality_samples", &mut c.metrics.quality_samples)?;
        f.take("metrics.gradient_attack", &mut c.metrics.gradient_attack)?;

        if let Some(k) = f.0.keys().next() {
            return Err(Error::Config(format!("unknown key {k}")));
        }
        c.sync();
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Copies the shared settings into the nested model and train configs.
    pub fn sync(&mut self) {
        self.model.data_dim = self.data.dim;
        self.model.classes = self.data.classes;
        self.model.rank = self.train.rank;
    }

    /// Canonical text; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let (d, m, p, t, a) = (&self.data, &self.model, &self.pretrain, &self.train, &self.attack);
        let mut s = String::new();
        let _ = writeln!(s, "[experiment]");
        let _ = writeln!(s, "out = {}", self.out.display());
        let _ = writeln!(s, "seeds = {}", join(&self.seeds));
        let _ = writeln!(s, "methods = {}", join(&self.methods));
        let _ = writeln!(s, "\n[data]");
        let _ = writeln!(s, "kind = {}", d.kind);
        let _ = writeln!(s, "dim = {}", d.dim);
        let _ = writeln!(s, "classes = {}", d.classes);
        let _ = writeln!(s, "splits = {}", join(&d.splits));
        let _ = writeln!(s, "pretrain_pool = {}", d.pretrain_pool);
        let _ = writeln!(s, "pretrain_shifted = {}", d.pretrain_shifted);
        let _ = writeln!(s, "\n[model]");
        let _ = writeln!(s, "hidden = {}", join(&m.hidden));
        let _ = writeln!(s, "time_dim = {}", m.time_dim);
        let _ = writeln!(s, "cond_dim = {}", m.cond_dim);
        let _ = writeln!(s, "lora_alpha = {:?}", m.lora_alpha);
        let _ = writeln!(s, "\n[pretrain]");
        let _ = writeln!(s, "epochs = {}", p.epochs);
        let _ = writeln!(s, "lr = {:?}", p.lr);
        let _ = writeln!(s, "batch = {}", p.batch);
        let _ = writeln!(s, "\n[train]");
        let _ = writeln!(s, "lambda = {:?}", t.lambda);
        let _ = writeln!(s, "delta = {:?}", t.delta);
        let _ = writeln!(s, "eta1 = {:?}", t.eta1);
        let _ = writeln!(s, "eta2 = {:?}", t.eta2);
        let _ = writeln!(s, "epochs = {}", t.epochs);
        let _ = writeln!(s, "batch = {}", t.batch);
        let _ = writeln!(s, "optimizer = {}", t.optimizer);
        let _ = writeln!(s, "attacker_optimizer = {}", t.attacker_optimizer);
        let _ = writeln!(s, "rank = {}", t.rank);
        let _ = writeln!(s, "steps = {}", t.steps);
        let _ = writeln!(s, "diag_every = {}", t.diag_every);
        let _ = writeln!(s, "power_iters = {}", t.power_iters);
        let _ = writeln!(s, "power_tol = {:?}", t.power_tol);
        let _ = writeln!(s, "refresh_probe = {}", t.refresh_probe);
        let _ = writeln!(s, "\n[probe]");
        let _ = writeln!(s, "features = {}", self.probe.features);
        let _ = writeln!(s, "draws = {}", self.probe.draws);
        let _ = writeln!(s, "eval_draws = {}", self.probe.eval_draws);
        let _ = writeln!(s, "\n[attack]");
        let _ = writeln!(s, "epochs = {}", a.epochs);
        let _ = writeln!(s, "lr = {:?}", a.lr);
        let _ = writeln!(s, "per_side = {}", a.per_side);
        let _ = writeln!(s, "optimizer = {}", a.optimizer);
        let _ = writeln!(s, "hidden = {}", join(&a.hidden));
        let _ = writeln!(s, "\n[metrics]");
        let _ = writeln!(s, "quality_samples = {}", self.metrics.quality_samples);
        let _ = writeln!(s, "gradient_attack = {}", self.metrics.gradient_attack);
        s
    }

    /// Schema checks that need no filesystem access.
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.seeds.is_empty(), Config, "experiment.seeds is empty");
        ensure!(!self.methods.is_empty(), Config, "experiment.methods is empty");
        let mut seen = std::collections::HashSet::new();
        ensure!(self.seeds.iter().all(|s| seen.insert(*s)), Config, "experiment.seeds has duplicates");
        let mut seen = std::collections::HashSet::new();
        ensure!(self.methods.iter().all(|m| seen.insert(*m)), Config, "experiment.methods has duplicates");
        ensure!(!self.out.as_os_str().is_empty(), Config, "experiment.out is empty");

        let d = &self.data;
        ensure!(d.dim >= 1 && d.classes >= 1, Config, "data.dim and data.classes must be positive");
        ensure!(d.kind != ToyKind::Rings || d.dim >= 2, Config, "rings needs data.dim >= 2");
        ensure!(
            d.kind != ToyKind::GaussMix || d.classes <= 2 * d.dim,
            Config,
            "gauss_mix supports at most 2·dim classes"
        );
        let [aux_m, te_m, aux_nm, te_nm] = d.splits;
        ensure!(aux_m + te_m >= 1, Config, "training split is empty");
        ensure!(te_m >= 1 && te_nm >= 1, Config, "evaluation needs both test sides");
        ensure!(aux_m >= 1 && aux_nm >= 1, Config, "attacker training needs both auxiliary sides");
        ensure!(d.pretrain_pool >= d.classes, Config, "data.pretrain_pool cannot cover every class");

        let m = &self.model;
        ensure!(m.data_dim == d.dim && m.classes == d.classes, Config, "model dimensions out of sync with data");
        ensure!(m.rank == self.train.rank, Config, "model rank out of sync with train.rank");
        ensure!(m.hidden.iter().all(|&h| h >= 1), Config, "model.hidden widths must be positive");
        ensure!(m.time_dim >= 2 && m.time_dim.is_multiple_of(2), Config, "model.time_dim must be even and >= 2");
        ensure!(m.cond_dim >= 1, Config, "model.cond_dim must be positive");
        ensure!(m.lora_alpha.is_finite() && m.lora_alpha > 0.0, Config, "model.lora_alpha must be positive");

        ensure!(self.pretrain.batch >= 1, Config, "pretrain.batch must be positive");
        ensure!(self.pretrain.lr >= 0.0, Config, "pretrain.lr must be non-negative");
        self.train.validate()?;
        ensure!(
            self.probe.features >= 1 && self.probe.features <= self.train.steps,
            Config,
            "probe.features must lie in 1..=train.steps"
        );
        ensure!(
            self.probe.draws >= 1 && self.probe.eval_draws >= 1,
            Config,
            "probe draw counts must be positive"
        );
        ensure!(self.attack.per_side >= 1, Config, "attack.per_side must be positive");
        ensure!(self.attack.lr >= 0.0, Config, "attack.lr must be non-negative");
        ensure!(self.attack.hidden.iter().all(|&h| h >= 1), Config, "attack.hidden widths must be positive");
        ensure!(
            self.metrics.quality_samples * d.classes >= 10,
            Config,
            "metrics.quality_samples too small for the quality statistic"
        );
        Ok(())
    }

    /// Creates the output directory and checks that it accepts files.
    pub fn prepare_output(&self) -> Result<()> {
        let fail = |e: std::io::Error| Error::Config(format!("output directory {} unusable: {e}", self.out.display()));
        std::fs::create_dir_all(&self.out).map_err(fail)?;
        let probe = self.out.join(".write-check");
        std::fs::write(&probe, b"").map_err(fail)?;
        std::fs::remove_file(&probe).map_err(fail)
    }

    /// Training settings of one run.
    pub fn train_for(&self, method: Method, seed: u64) -> TrainConfig {
        TrainConfig {
            method,
            seed,
            ..self.train.clone()
        }
    }

    pub fn run_dir(&self, method: Method, seed: u64) -> PathBuf {
        self.out.join(method.name()).join(format!("seed{seed}"))
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seeds = vec![seed];
    }

    pub fn set_method(&mut self, method: Method) {
        self.methods = vec![method];
    }

    pub fn set_optimizers(&mut self, kind: OptimizerKind) {
        self.train.optimizer = kind;
        self.train.attacker_optimizer = kind;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_text() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let back = ExperimentConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_text(), c.to_text());
    }

    #[test]
    fn overrides_and_comments() {
        let text = "# toy\n[experiment]\nseeds = 4, 5\nmethods = smp_lora\n[train]\nlambda = 0.1 # stronger\n";
        let c = ExperimentConfig::parse(text).unwrap();
        assert_eq!(c.seeds, vec![4, 5]);
        assert_eq!(c.methods, vec![Method::SmpLora]);
        assert_eq!(c.train.lambda, 0.1);
        assert_eq!(c.train.delta, TrainConfig::default().delta);
    }

    #[test]
    fn schema_errors_are_config_errors() {
        for bad in [
            "[train]\nlamda = 0.1\n",
            "[train]\nlambda = 1.5\n",
            "[train]\ndelta = 0\n",
            "[data]\nsplits = 1,2,3\n",
            "[experiment]\nmethods = dp_sgd\n",
            "[experiment]\nseeds = 1,1\n",
            "[experiment\n",
            "lambda\n",
            "[train]\nlambda = 0.1\nlambda = 0.2\n",
            "[probe]\nfeatures = 101\n",
        ] {
            assert!(matches!(ExperimentConfig::parse(bad), Err(Error::Config(_))), "{bad:?}");
        }
    }
}
