//! Exit codes and stage behaviour of the `privlora` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
[experiment]
seeds = 3
methods = lora,smp_lora
[data]
dim = 2
splits = 4,4,4,4
pretrain_pool = 32
[model]
hidden = 8
time_dim = 2
cond_dim = 2
[pretrain]
epochs = 2
[train]
epochs = 3
batch = 2
rank = 1
steps = 10
diag_every = 2
power_iters = 5
[probe]
features = 2
draws = 1
eval_draws = 2
[attack]
epochs = 2
[metrics]
quality_samples = 5
";

fn privlora(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_privlora")).args(args).output().unwrap()
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.conf");
    fs::write(&path, TINY).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn show_config_prints_the_effective_settings() {
    let out = privlora(&["show-config", "--seed", "9", "--method", "mp_lora", "--lambda", "0.3"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("seeds = 9"), "{text}");
    assert!(text.contains("methods = mp_lora"));
    assert!(text.contains("lambda = 0.3"));
}

#[test]
fn configuration_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.conf");
    fs::write(&bad, "[train]\nlambda = 3\n").unwrap();
    assert_eq!(privlora(&["show-config", "--config", bad.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(privlora(&["show-config", "--method", "nope"]).status.code(), Some(2));
    assert_eq!(privlora(&["show-config", "--lambda", "-1"]).status.code(), Some(2));
    assert_eq!(privlora(&["no-such-command"]).status.code(), Some(2));
    let out = tmp.path().join("empty");
    let cfg = tiny_config(tmp.path());
    let stage = privlora(&["attack-eval", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(stage.status.code(), Some(2));
}

#[test]
fn staged_commands_match_a_single_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let whole = tmp.path().join("whole");
    let staged = tmp.path().join("staged");
    let run = privlora(&["run", "--config", &cfg, "--out", whole.to_str().unwrap()]);
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    assert!(String::from_utf8(run.stdout).unwrap().starts_with("metric,method,mean,stderr,n"));

    for stage in ["train", "attack-eval", "diagnose", "report"] {
        let out = privlora(&[stage, "--config", &cfg, "--out", staged.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    for file in ["summary.csv", "correlation.txt", "smp_lora/seed3/runlog.csv", "smp_lora/seed3/metrics.txt", "lora/seed3/diag.csv"] {
        assert_eq!(fs::read(whole.join(file)).unwrap(), fs::read(staged.join(file)).unwrap(), "{file}");
    }
}
