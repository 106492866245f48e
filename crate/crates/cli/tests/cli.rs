//! End-to-end runs of the `lfm` binary: exit codes, error messages and the
//! full synth, ingest, train, predict, backtest chain.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use serde_json::Value;

const SMOKE_BUDGET: Duration = Duration::from_secs(600);

fn lfm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lfm"))
        .args(args)
        .env("RUST_LOG", "off")
        .output()
        .expect("lfm binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Writes `run.toml` under `root` with data and output directories inside it.
fn write_config(root: &Path, extra: &str) -> PathBuf {
    let text = format!(
        "[paths]\ndata_dir = \"{}\"\nout_dir = \"{}\"\n{extra}",
        root.join("data").display(),
        root.join("out").display()
    );
    let path = root.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

const SMALL_WORLD: &str = r#"
[periods]
in_sample_start = "1970-01"
in_sample_end = "1979-12"
out_of_sample_start = "1980-01"
out_of_sample_end = "1984-12"
[synth]
n_stocks = 80
n_months = 180
"#;

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&lfm(&["--help"])), 0);
    assert_eq!(code(&lfm(&["--version"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&lfm(&[])), 1);
    assert_eq!(code(&lfm(&["frobnicate"])), 1);
    assert_eq!(code(&lfm(&["backtest", "--mode", "clairvoyant:x"])), 1);
    let missing = lfm(&["synth", "--config", "/nonexistent/run.toml"]);
    assert_eq!(code(&missing), 1);
    assert!(
        stderr(&missing).contains("cannot read config"),
        "{}",
        stderr(&missing)
    );

    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "[backtest]\ntop_n = 0\n");
    assert_eq!(code(&lfm(&["synth", "--config", bad.to_str().unwrap()])), 1);
    let unknown = write_config(dir.path(), "[backtest]\ntop_m = 5\n");
    assert_eq!(
        code(&lfm(&["synth", "--config", unknown.to_str().unwrap()])),
        1
    );
}

#[test]
fn missing_data_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = lfm(&["ingest", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn backtest_on_empty_universe_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let extra = format!("{SMALL_WORLD}[universe]\nmin_market_cap_musd = 1e12\n");
    let cfg = write_config(dir.path(), &extra);
    let cfg = cfg.to_str().unwrap();
    assert_eq!(code(&lfm(&["synth", "--config", cfg])), 0);
    let out = lfm(&["backtest", "--config", cfg, "--mode", "qfm"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("empty universe"), "{}", stderr(&out));
}

#[test]
fn lfm_backtest_without_checkpoint_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_WORLD);
    let cfg = cfg.to_str().unwrap();
    assert_eq!(code(&lfm(&["synth", "--config", cfg])), 0);
    assert_eq!(
        code(&lfm(&["backtest", "--config", cfg, "--mode", "lfm"])),
        2
    );
}

#[test]
fn sweep_zero_horizon_matches_qfm() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_WORLD);
    let cfg = cfg.to_str().unwrap();
    assert_eq!(code(&lfm(&["synth", "--config", cfg, "--seed", "3"])), 0);
    assert_eq!(
        code(&lfm(&[
            "sweep",
            "--config",
            cfg,
            "--seed",
            "3",
            "--horizons",
            "0,12"
        ])),
        0
    );
    assert_eq!(
        code(&lfm(&[
            "backtest", "--config", cfg, "--seed", "3", "--mode", "qfm"
        ])),
        0
    );

    let out = dir.path().join("out");
    let mut reader = csv::Reader::from_path(out.join("sweep.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(&rows[0][0], "0");
    assert_eq!(&rows[1][0], "12");
    let sweep_car: f64 = rows[0][1].parse().unwrap();
    let report = read_json(&out.join("report.json"));
    let qfm_car = report["report"]["car"].as_f64().unwrap();
    assert_eq!(sweep_car.to_bits(), qfm_car.to_bits());
    assert!(out.join("sweep.svg").exists());
}

#[test]
fn full_pipeline_on_200_stocks_and_240_months() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let extra = r#"
[periods]
in_sample_start = "1970-01"
in_sample_end = "1981-12"
out_of_sample_start = "1982-01"
out_of_sample_end = "1989-12"
[predictor]
kind = "mlp"
hidden_units = 16
hidden_keep_prob = 1.0
[synth]
n_stocks = 200
n_months = 240
"#;
    let cfg = write_config(dir.path(), extra);
    let cfg = cfg.to_str().unwrap();
    for args in [
        vec!["synth"],
        vec!["ingest"],
        vec!["train"],
        vec!["predict"],
        vec!["backtest", "--mode", "lfm"],
    ] {
        let mut full = args.clone();
        full.extend(["--config", cfg, "--seed", "5"]);
        let out = lfm(&full);
        assert_eq!(code(&out), 0, "{args:?}: {}", stderr(&out));
    }
    let out = dir.path().join("out");
    for name in [
        "panel_summary.json",
        "checkpoint.json",
        "training_log.csv",
        "train_summary.json",
        "predictions.csv",
        "mse_summary.json",
        "mse_monthly.csv",
        "mse_monthly.svg",
        "trades.csv",
        "nav.csv",
        "report.json",
        "nav.svg",
    ] {
        assert!(out.join(name).exists(), "missing {name}");
    }
    let mse = read_json(&out.join("mse_summary.json"));
    assert!(mse["mse_model"].as_f64().unwrap() < mse["mse_naive"].as_f64().unwrap());
    let report = read_json(&out.join("report.json"));
    assert_eq!(report["report"]["mode"], "lfm");
    assert!(report["audit"]["violations"].as_array().unwrap().is_empty());
    assert!(report["report"]["mse_model"]["overall"].as_f64().is_some());
    let nav_rows = std::fs::read_to_string(out.join("nav.csv"))
        .unwrap()
        .lines()
        .count();
    assert_eq!(nav_rows, 1 + 96);
    assert!(start.elapsed() < SMOKE_BUDGET, "took {:?}", start.elapsed());
}

#[test]
fn seed_override_changes_generated_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_WORLD);
    let cfg = cfg.to_str().unwrap();
    let market = dir.path().join("data").join("market.csv");
    assert_eq!(code(&lfm(&["synth", "--config", cfg, "--seed", "1"])), 0);
    let first = std::fs::read(&market).unwrap();
    assert_eq!(code(&lfm(&["synth", "--config", cfg, "--seed", "1"])), 0);
    assert_eq!(std::fs::read(&market).unwrap(), first);
    assert_eq!(code(&lfm(&["synth", "--config", cfg, "--seed", "2"])), 0);
    assert_ne!(std::fs::read(&market).unwrap(), first);
}
