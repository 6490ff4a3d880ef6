use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use privlora_core::evalcli::{diagnose_stage, eval_all, report_stage, run_experiment, train_all, ExperimentConfig};
use privlora_core::trainers::Method;
use privlora_core::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_ABORT: u8 = 3;

#[derive(Parser)]
#[command(name = "privlora", version, about = "Membership-private low-rank adaptation of toy diffusion models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train, attack, diagnose and summarise in one go.
    Run(Overrides),
    /// Train every configured method and seed.
    Train(Overrides),
    /// Train post-hoc attackers against saved models and write metrics.
    AttackEval(Overrides),
    /// Correlate gradient norms with Hessian norms from saved diagnostics.
    Diagnose(Overrides),
    /// Aggregate per-run metrics into summary.csv.
    Report(Overrides),
    /// Print the effective configuration.
    ShowConfig(Overrides),
}

#[derive(Args)]
struct Overrides {
    /// Config file; built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run this single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run this single method.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Overrides {
    fn resolve(&self) -> privlora_core::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.set_seed(s);
        }
        if let Some(m) = &self.method {
            cfg.set_method(m.parse::<Method>()?);
        }
        if let Some(l) = self.lambda {
            cfg.train.lambda = l;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        cfg.sync();
        cfg.validate()?;
        Ok(cfg)
    }
}

fn execute(command: &Command) -> privlora_core::Result<bool> {
    match command {
        Command::Run(o) => {
            let outcome = run_experiment(&o.resolve()?)?;
            print!("{}", outcome.summary);
            Ok(outcome.any_aborted())
        }
        Command::Train(o) => {
            let runs = train_all(&o.resolve()?)?;
            for r in &runs {
                let status = match &r.log.aborted {
                    Some(a) => format!("aborted at iteration {}: {}", a.iter, a.reason),
                    None => format!("{} iterations", r.log.rows.len()),
                };
                println!("{} seed{}: {status}", r.method, r.seed);
            }
            Ok(runs.iter().any(|r| r.aborted()))
        }
        Command::AttackEval(o) => {
            eval_all(&o.resolve()?)?;
            Ok(false)
        }
        Command::Diagnose(o) => {
            print!("{}", diagnose_stage(&o.resolve()?)?);
            Ok(false)
        }
        Command::Report(o) => {
            print!("{}", report_stage(&o.resolve()?)?);
            Ok(false)
        }
        Command::ShowConfig(o) => {
            print!("{}", o.resolve()?.to_text());
            Ok(false)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli.command) {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => {
            eprintln!("numeric abort: partial logs preserved");
            ExitCode::from(EXIT_ABORT)
        }
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(e @ Error::Numeric(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_ABORT)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
