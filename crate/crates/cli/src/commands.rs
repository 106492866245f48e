//! The six pipeline commands. Each reads its inputs from the configured
//! paths and writes deterministic output files.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;

use lfm_core::backtest::{
    audit_ledger, run_backtest, write_nav_csv, write_trades_csv, AuditReport, Ledger,
};
use lfm_core::factor::FactorMode;
use lfm_core::forecast::{load_checkpoint, save_checkpoint, Predictor, PredictorKind, TrainingLog};
use lfm_core::ingest::{ingest_dir, IngestSummary};
use lfm_core::metrics::{line_chart_svg, write_mse_monthly_csv, PerformanceReport};
use lfm_core::synth::generate_panel;
use lfm_core::types::canonical_field_order;
use lfm_core::{Error, Panel};

use crate::config::RunConfig;
use crate::pipeline::{
    backtest_config, evaluate, evaluation_samples, split_for, training_samples, Evaluation,
};
use crate::CliError;

pub const PANEL_SUMMARY_FILE: &str = "panel_summary.json";
pub const TRAINING_LOG_FILE: &str = "training_log.csv";
pub const TRAIN_SUMMARY_FILE: &str = "train_summary.json";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const MSE_SUMMARY_FILE: &str = "mse_summary.json";
pub const MSE_MONTHLY_FILE: &str = "mse_monthly.csv";
pub const MSE_CHART_FILE: &str = "mse_monthly.svg";
pub const TRADES_FILE: &str = "trades.csv";
pub const NAV_FILE: &str = "nav.csv";
pub const REPORT_FILE: &str = "report.json";
pub const NAV_CHART_FILE: &str = "nav.svg";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const SWEEP_CHART_FILE: &str = "sweep.svg";

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn out_file(cfg: &RunConfig, name: &str) -> Result<PathBuf, CliError> {
    let dir = &cfg.paths.out_dir;
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    Ok(dir.join(name))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| io_err(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    write_text(path, &text)
}

pub fn load_panel(cfg: &RunConfig) -> Result<(Panel, IngestSummary), CliError> {
    let ingested = ingest_dir(&cfg.paths.data_dir, &cfg.universe)?;
    Ok((ingested.panel, ingested.summary))
}

#[derive(Debug, Clone, Serialize)]
pub struct SynthSummary {
    pub data_dir: PathBuf,
    pub n_stocks: usize,
    pub n_months: usize,
    pub seed: u64,
}

/// Generates a synthetic universe and writes it to the data directory.
pub fn cmd_synth(cfg: &RunConfig) -> Result<SynthSummary, CliError> {
    let world = generate_panel(&cfg.synth)?;
    world.write_csv(&cfg.paths.data_dir)?;
    info!("wrote synthetic data to {}", cfg.paths.data_dir.display());
    Ok(SynthSummary {
        data_dir: cfg.paths.data_dir.clone(),
        n_stocks: cfg.synth.n_stocks,
        n_months: cfg.synth.n_months,
        seed: cfg.synth.seed,
    })
}

/// Ingests the data directory and writes the panel summary.
pub fn cmd_ingest(cfg: &RunConfig) -> Result<IngestSummary, CliError> {
    let (_, summary) = load_panel(cfg)?;
    write_json(&out_file(cfg, PANEL_SUMMARY_FILE)?, &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub kind: PredictorKind,
    pub n_samples: usize,
    pub n_train_securities: usize,
    pub n_validation_securities: usize,
    pub best_epoch: Option<usize>,
    pub best_validation_mse: Option<f64>,
    pub epochs_run: Option<usize>,
    pub checkpoint: PathBuf,
}

fn write_training_log(path: &Path, log: Option<&TrainingLog>) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let header = ["epoch", "train_loss", "validation_mse"];
    w.write_record(header).map_err(Error::from)?;
    for e in log.iter().flat_map(|l| &l.epochs) {
        w.write_record([
            e.epoch.to_string(),
            e.train_loss.to_string(),
            e.validation_mse.to_string(),
        ])
        .map_err(Error::from)?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Fits the configured predictor on the in-sample period and saves a checkpoint.
pub fn cmd_train(cfg: &RunConfig) -> Result<(Predictor, TrainSummary), CliError> {
    let (panel, _) = load_panel(cfg)?;
    cfg.periods.validate()?;
    let samples = training_samples(&panel, &cfg.periods)?;
    let split = split_for(&samples, &cfg.predictor)?;
    let predictor = lfm_core::forecast::fit_predictor(&samples, &split, &cfg.predictor)?;

    let checkpoint = cfg.checkpoint_path();
    if let Some(parent) = checkpoint.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    save_checkpoint(&predictor, &checkpoint)?;
    let log = match &predictor {
        Predictor::Mlp(m) => Some(&m.log),
        _ => None,
    };
    write_training_log(&out_file(cfg, TRAINING_LOG_FILE)?, log)?;
    let summary = TrainSummary {
        kind: predictor.kind(),
        n_samples: samples.len(),
        n_train_securities: split.train.len(),
        n_validation_securities: split.validation.len(),
        best_epoch: log.map(|l| l.best_epoch),
        best_validation_mse: log.map(|l| l.best_validation_mse),
        epochs_run: log.map(|l| l.epochs.len()),
        checkpoint,
    };
    write_json(&out_file(cfg, TRAIN_SUMMARY_FILE)?, &summary)?;
    Ok((predictor, summary))
}

#[derive(Debug, Clone, Serialize)]
pub struct MseSummary {
    pub kind: PredictorKind,
    pub n_samples: usize,
    pub mse_model: f64,
    pub mse_naive: f64,
    /// `1 − model / naive`.
    pub improvement_over_naive: f64,
}

fn write_predictions(path: &Path, eval: &Evaluation) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut header = vec![
        "sid".to_string(),
        "month".into(),
        "ebit_forecast_musd".into(),
    ];
    header.extend(
        canonical_field_order()
            .into_iter()
            .map(|f| format!("pred_{f}")),
    );
    w.write_record(&header).map_err(Error::from)?;
    for p in &eval.predictions {
        let mut row = vec![
            p.sid.to_string(),
            p.t.to_string(),
            p.ebit_forecast_musd.to_string(),
        ];
        row.extend(p.values.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(Error::from)?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn mse_chart(eval: &Evaluation) -> String {
    let labels: Vec<String> = eval
        .model
        .monthly
        .iter()
        .map(|m| m.month.to_string())
        .collect();
    let model: Vec<f64> = eval.model.monthly.iter().map(|m| m.mse).collect();
    let naive: Vec<f64> = eval.naive.monthly.iter().map(|m| m.mse).collect();
    line_chart_svg(
        "Out-of-sample MSE by month",
        &labels,
        &[("model", &model), ("naive", &naive)],
    )
}

/// Forecasts the out-of-sample period with the saved checkpoint and
/// compares against the naive baseline.
pub fn cmd_predict(cfg: &RunConfig) -> Result<(Evaluation, MseSummary), CliError> {
    let (panel, _) = load_panel(cfg)?;
    let predictor = load_checkpoint(&cfg.checkpoint_path())?;
    let samples = evaluation_samples(&panel, &cfg.periods)?;
    let eval = evaluate(&predictor, &samples)?;
    write_predictions(&out_file(cfg, PREDICTIONS_FILE)?, &eval)?;
    let mut w = create(&out_file(cfg, MSE_MONTHLY_FILE)?)?;
    write_mse_monthly_csv(&mut w, Some(&eval.model), Some(&eval.naive))?;
    write_text(&out_file(cfg, MSE_CHART_FILE)?, &mse_chart(&eval))?;
    let summary = MseSummary {
        kind: predictor.kind(),
        n_samples: samples.len(),
        mse_model: eval.model.overall,
        mse_naive: eval.naive.overall,
        improvement_over_naive: 1.0 - eval.model.overall / eval.naive.overall,
    };
    write_json(&out_file(cfg, MSE_SUMMARY_FILE)?, &summary)?;
    Ok((eval, summary))
}

#[derive(Debug, Clone, Serialize)]
pub struct BacktestOutcome {
    pub report: PerformanceReport,
    pub audit: AuditReport,
    #[serde(skip)]
    pub ledger: Ledger,
}

fn nav_chart(title: &str, ledger: &Ledger) -> String {
    let labels: Vec<String> = ledger.months.iter().map(|m| m.month.to_string()).collect();
    let nav: Vec<f64> = ledger.months.iter().map(|m| m.nav).collect();
    line_chart_svg(title, &labels, &[("NAV (MUSD)", &nav)])
}

/// Simulates the out-of-sample period with `cfg.mode` and writes the ledger and report.
pub fn cmd_backtest(cfg: &RunConfig) -> Result<BacktestOutcome, CliError> {
    let (panel, _) = load_panel(cfg)?;
    let bt = backtest_config(&cfg.backtest, &cfg.periods, &panel)?;
    let predictor = match cfg.mode {
        FactorMode::Lfm => Some(load_checkpoint(&cfg.checkpoint_path())?),
        _ => None,
    };
    let ledger = run_backtest(&panel, cfg.mode, predictor.as_ref(), &bt)?;
    let mut report = PerformanceReport::from_ledger(cfg.mode, &ledger, cfg.risk_free_monthly)?;
    if let Some(p) = &predictor {
        let eval = evaluate(p, &evaluation_samples(&panel, &cfg.periods)?)?;
        report.mse_model = Some(eval.model);
        report.mse_naive = Some(eval.naive);
    }
    let audit = audit_ledger(&ledger, &panel, &bt, 1e-6);
    write_trades_csv(create(&out_file(cfg, TRADES_FILE)?)?, &ledger)?;
    write_nav_csv(create(&out_file(cfg, NAV_FILE)?)?, &ledger)?;
    let outcome = BacktestOutcome {
        report,
        audit,
        ledger,
    };
    write_json(&out_file(cfg, REPORT_FILE)?, &outcome)?;
    write_text(
        &out_file(cfg, NAV_CHART_FILE)?,
        &nav_chart(&format!("NAV, {}", cfg.mode), &outcome.ledger),
    )?;
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub horizon: u32,
    pub car: f64,
    pub sharpe: Option<f64>,
    pub max_drawdown: f64,
    pub final_nav: f64,
}

/// Backtests each clairvoyance horizon and tabulates CAR against horizon.
pub fn cmd_sweep(cfg: &RunConfig, horizons: &[u32]) -> Result<Vec<SweepRow>, CliError> {
    if horizons.is_empty() {
        return Err(CliError::Usage("sweep needs at least one horizon".into()));
    }
    let (panel, _) = load_panel(cfg)?;
    let bt = backtest_config(&cfg.backtest, &cfg.periods, &panel)?;
    let mut rows = Vec::with_capacity(horizons.len());
    for &h in horizons {
        let mode = FactorMode::Clairvoyant(h);
        let ledger = run_backtest(&panel, mode, None, &bt)?;
        let report = PerformanceReport::from_ledger(mode, &ledger, cfg.risk_free_monthly)?;
        info!("clairvoyant:{h} CAR {:.4}", report.car);
        rows.push(SweepRow {
            horizon: h,
            car: report.car,
            sharpe: report.sharpe,
            max_drawdown: report.max_drawdown,
            final_nav: report.final_nav,
        });
    }
    let path = out_file(cfg, SWEEP_FILE)?;
    let mut w = csv::Writer::from_writer(create(&path)?);
    w.write_record(["horizon", "car", "sharpe", "max_drawdown", "final_nav"])
        .map_err(Error::from)?;
    for r in &rows {
        w.write_record([
            r.horizon.to_string(),
            r.car.to_string(),
            r.sharpe.map(|s| s.to_string()).unwrap_or_default(),
            r.max_drawdown.to_string(),
            r.final_nav.to_string(),
        ])
        .map_err(Error::from)?;
    }
    w.flush().map_err(|e| io_err(&path, e))?;
    let labels: Vec<String> = rows.iter().map(|r| format!("h={}", r.horizon)).collect();
    let cars: Vec<f64> = rows.iter().map(|r| r.car).collect();
    write_text(
        &out_file(cfg, SWEEP_CHART_FILE)?,
        &line_chart_svg("CAR by clairvoyance horizon", &labels, &[("CAR", &cars)]),
    )?;
    Ok(rows)
}
