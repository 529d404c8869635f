use std::path::{Path, PathBuf};
use std::process::Command;

use flowconsist::io::read_csv;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_flowconsist"))
}

fn run(args: &[&str]) -> (i32, String, String) {
    let out = bin().env_remove("FLOWCONSIST_OUT").args(args).output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stdout).into_owned(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, format!("output_dir = {:?}\n{body}", dir.join("out"))).unwrap();
    path
}

const SMOKE: &str = "seed = 3
log_every = 2
[train]
total_steps = 10
batch_size = 16
[train.arch]
hidden = 8
depth = 1
embed_dim = 4
embed_hidden = 4
max_freq = 4.0
";

const DIRAC: &str = "seed = 1
[diagnostics]
n_mc = 2000
[[mixture.components]]
weight = 1.0
mean = [0.5, -0.5]
variance = 0.0
";

#[test]
fn missing_config_is_a_config_error() {
    let (code, _, err) = run(&["train", "--config", "/nonexistent/run.toml"]);
    assert_eq!(code, 2);
    assert!(err.contains("cannot read"));
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[train]\nlearning_rat = 1.0\n");
    assert_eq!(run(&["train", "--config", cfg.to_str().unwrap()]).0, 2);
}

#[test]
fn smoke_train_then_sample() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMOKE);
    let (code, _, err) = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    let ck = dir.path().join("out/checkpoint.fck");
    assert!(ck.exists());
    let (header, rows) = read_csv(&dir.path().join("out/metrics.csv")).unwrap();
    assert_eq!(header[0], "step");
    assert!(!rows.is_empty());

    let sample = |name: &str, n: &str| {
        let out = dir.path().join(name);
        let (code, _, err) = run(&["sample", "--checkpoint", ck.to_str().unwrap(), "--n", n, "--seed", "4", "--out", out.to_str().unwrap()]);
        assert_eq!(code, 0, "{err}");
        std::fs::read(out).unwrap()
    };
    let a = sample("a.csv", "50");
    assert_eq!(a, sample("b.csv", "50"));
    let empty = String::from_utf8(sample("e.csv", "0")).unwrap();
    assert_eq!(empty.lines().next().unwrap(), "x0,x1");
    assert_eq!(empty.lines().count(), 2);

    let mut bytes = std::fs::read(&ck).unwrap();
    bytes.truncate(bytes.len() / 2);
    let bad = dir.path().join("bad.fck");
    std::fs::write(&bad, &bytes).unwrap();
    let (code, _, _) = run(&["sample", "--checkpoint", bad.to_str().unwrap(), "--out", dir.path().join("x.csv").to_str().unwrap()]);
    assert_eq!(code, 2);
}

#[test]
fn diagnose_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, err) = run(&["diagnose", "--experiment", "thm9"]);
    assert_eq!(code, 2);
    assert!(err.contains("unknown experiment"));

    let cfg = write_config(dir.path(), "[diagnostics]\nn_points = 200\n");
    let out = dir.path().join("thm1.csv");
    let (code, stdout, _) = run(&["diagnose", "--experiment", "thm1", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0, "{stdout}");
    assert!(stdout.contains("PASS"));
    assert!(out.exists());

    let cfg = write_config(dir.path(), DIRAC);
    let (code, _, err) = run(&["diagnose", "--experiment", "thm2", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    let (_, rows) = read_csv(&dir.path().join("out/diag_thm2.csv")).unwrap();
    let l_var: Vec<_> = rows.iter().filter(|r| r[0] == "thm2_l_var").collect();
    assert_eq!(l_var.len(), 1);
    assert_eq!(l_var[0][2].parse::<f64>().unwrap(), 0.0);

    // accumulation needs a trained model
    assert_eq!(run(&["diagnose", "--experiment", "accumulation", "--config", cfg.to_str().unwrap()]).0, 2);
}

#[test]
fn failing_assertion_exits_4_and_keeps_csv() {
    // a single drift path cannot hit the t = 0 velocity band of 3 SE = 0
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[diagnostics]\nn_paths = 1\nt_grid = 2\n");
    let (code, stdout, _) = run(&["diagnose", "--experiment", "drift", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code, 4, "{stdout}");
    assert!(stdout.contains("FAIL"));
    assert!(dir.path().join("out/diag_drift.csv").exists());
}

#[test]
fn config_default_parses_back() {
    let (code, text, _) = run(&["config-default"]);
    assert_eq!(code, 0);
    assert!(text.starts_with('#'));
    let cfg = flowconsist::config::RunConfig::from_toml(&text).unwrap();
    assert_eq!(cfg, flowconsist::config::RunConfig::default());
}

#[test]
fn output_env_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[diagnostics]\nn_points = 10\n");
    let env_out = dir.path().join("env");
    let status = bin()
        .env("FLOWCONSIST_OUT", &env_out)
        .args(["diagnose", "--experiment", "thm1", "--config", cfg.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(status.status.success());
    assert!(env_out.join("diag_thm1.csv").exists());
}
