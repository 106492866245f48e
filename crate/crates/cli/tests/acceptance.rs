//! Acceptance suite. Prints one `[PASS]` or `[FAIL]` line per criterion and
//! exits non-zero if any criterion fails.
//!
//! Criteria 1 to 3 and 9 share one pipeline run per seed on a 300-stock,
//! 240-month synthetic world: months 0..=143 are in-sample, 144..=239 are
//! traded and evaluated.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lfm_cli::commands::{cmd_backtest, cmd_ingest, cmd_predict, cmd_sweep, cmd_synth, cmd_train};
use lfm_cli::config::RunConfig;
use lfm_cli::pipeline::{
    backtest_config, evaluate, evaluation_samples, split_for, training_samples, Periods,
};
use lfm_core::backtest::{audit_ledger, run_backtest, slippage_fraction, BacktestConfig, Ledger};
use lfm_core::factor::{clairvoyant_factor, qfm_factor, FactorMode};
use lfm_core::features::{fit_standardizer, SampleBuilder, N_INPUTS};
use lfm_core::forecast::{
    fit_predictor, gradient_entry, load_checkpoint, mlp_gradient, mlp_loss, save_checkpoint,
    Network, Predictor, PredictorConfig, PredictorKind, TrainingLog,
};
use lfm_core::metrics::compound_annual_return;
use lfm_core::synth::{generate_panel, SynthConfig};
use lfm_core::{MonthIndex, Panel, N_FUNDAMENTALS};

const SEEDS: [u64; 3] = [1, 2, 3];
const MIN_RELATIVE_GAP: f64 = 0.02;
const CLAIRVOYANT_EDGE: f64 = 0.03;
const LFM_SHORTFALL: f64 = 0.01;
const FD_STEP: f64 = 1e-5;
const FD_TOLERANCE: f64 = 1e-4;
const FD_PARAMS: usize = 200;
const ACCOUNTING_TOLERANCE: f64 = 1e-6;
const ORACLE_TOLERANCE: f64 = 1e-9;
const ROUND_TRIP_TOLERANCE: f64 = 1e-12;
const FORECAST_BUDGET: Duration = Duration::from_secs(600);
const CLAIRVOYANCE_BUDGET: Duration = Duration::from_secs(300);

fn periods() -> Periods {
    Periods {
        in_sample_start: MonthIndex::new(0),
        in_sample_end: MonthIndex::new(143),
        out_of_sample_start: MonthIndex::new(144),
        out_of_sample_end: MonthIndex::new(239),
    }
}

/// A network sized for a single core: sixteen units per hidden layer, no
/// hidden dropout. Other settings keep their defaults.
fn mlp_config(seed: u64) -> PredictorConfig {
    PredictorConfig {
        kind: PredictorKind::Mlp,
        hidden_units: 16,
        hidden_keep_prob: 1.0,
        seed,
        ..PredictorConfig::default()
    }
}

struct SeedRun {
    seed: u64,
    panel: Panel,
    mse_naive: f64,
    mse_linear: f64,
    mse_mlp: f64,
    mlp: Predictor,
    car_qfm: f64,
    car_clairvoyant: BTreeMap<u32, f64>,
    car_lfm: f64,
    lfm_ledger: Ledger,
    backtest: BacktestConfig,
    forecast_time: Duration,
    clairvoyance_time: Duration,
}

fn car(ledger: &Ledger) -> f64 {
    compound_annual_return(&ledger.nav_series()).expect("positive NAV")
}

fn run_seed(seed: u64) -> SeedRun {
    let periods = periods();
    let start = Instant::now();
    let world = generate_panel(&SynthConfig {
        seed,
        ..SynthConfig::default()
    })
    .expect("synthetic world");
    let panel = world.panel;
    let train = training_samples(&panel, &periods).expect("training samples");
    let eval = evaluation_samples(&panel, &periods).expect("evaluation samples");
    let fit = |kind: PredictorKind| {
        let cfg = PredictorConfig {
            kind,
            ..mlp_config(seed)
        };
        let split = split_for(&train, &cfg).expect("split");
        fit_predictor(&train, &split, &cfg).expect("fit")
    };
    let naive = fit(PredictorKind::Naive);
    let linear = fit(PredictorKind::Linear);
    let mlp = fit(PredictorKind::Mlp);
    let mse = |p: &Predictor| evaluate(p, &eval).expect("evaluate").model.overall;
    let (mse_naive, mse_linear, mse_mlp) = (mse(&naive), mse(&linear), mse(&mlp));
    let forecast_time = start.elapsed();

    let backtest =
        backtest_config(&BacktestConfig::default(), &periods, &panel).expect("backtest window");
    let start = Instant::now();
    let run = |mode: FactorMode, p: Option<&Predictor>| {
        run_backtest(&panel, mode, p, &backtest).expect("backtest")
    };
    let car_qfm = car(&run(FactorMode::Qfm, None));
    let car_clairvoyant = [0, 6, 12]
        .into_iter()
        .map(|h| (h, car(&run(FactorMode::Clairvoyant(h), None))))
        .collect();
    let clairvoyance_time = start.elapsed();
    let lfm_ledger = run(FactorMode::Lfm, Some(&mlp));
    let car_lfm = car(&lfm_ledger);

    SeedRun {
        seed,
        panel,
        mse_naive,
        mse_linear,
        mse_mlp,
        mlp,
        car_qfm,
        car_clairvoyant,
        car_lfm,
        lfm_ledger,
        backtest,
        forecast_time,
        clairvoyance_time,
    }
}

struct Outcome {
    id: &'static str,
    passed: bool,
    detail: String,
}

fn report(id: &'static str, passed: bool, detail: String) -> Outcome {
    println!("[{}] {id} {detail}", if passed { "PASS" } else { "FAIL" });
    Outcome { id, passed, detail }
}

fn ac1_ordering(runs: &[SeedRun]) -> Outcome {
    let mut passed = true;
    let mut parts = Vec::new();
    for r in runs {
        let linear_gap = 1.0 - r.mse_linear / r.mse_naive;
        let mlp_gap = 1.0 - r.mse_mlp / r.mse_linear;
        passed &= linear_gap >= MIN_RELATIVE_GAP && mlp_gap >= MIN_RELATIVE_GAP;
        parts.push(format!(
            "seed {}: naive {:.4} linear {:.4} mlp {:.4} (gaps {:.1}% {:.1}%)",
            r.seed,
            r.mse_naive,
            r.mse_linear,
            r.mse_mlp,
            100.0 * linear_gap,
            100.0 * mlp_gap
        ));
    }
    let elapsed: Duration = runs.iter().map(|r| r.forecast_time).sum();
    passed &= elapsed < FORECAST_BUDGET;
    report(
        "AC1",
        passed,
        format!(
            "MSE mlp <= linear <= naive, gaps >= 2%: {}; {:.1}s",
            parts.join("; "),
            elapsed.as_secs_f64()
        ),
    )
}

fn ac2_clairvoyance(runs: &[SeedRun]) -> Outcome {
    let mut passed = true;
    let mut parts = Vec::new();
    for r in runs {
        let c = &r.car_clairvoyant;
        passed &= c[&0] <= c[&6] && c[&6] <= c[&12] && c[&12] - r.car_qfm >= CLAIRVOYANT_EDGE;
        parts.push(format!(
            "seed {}: qfm {:.4} c0 {:.4} c6 {:.4} c12 {:.4}",
            r.seed, r.car_qfm, c[&0], c[&6], c[&12]
        ));
    }
    let elapsed: Duration = runs.iter().map(|r| r.clairvoyance_time).sum();
    passed &= elapsed < CLAIRVOYANCE_BUDGET;
    report(
        "AC2",
        passed,
        format!(
            "CAR non-decreasing in horizon, c12 >= qfm + 3pp: {}; {:.1}s",
            parts.join("; "),
            elapsed.as_secs_f64()
        ),
    )
}

fn ac3_lfm_vs_qfm(runs: &[SeedRun]) -> Outcome {
    let wins = runs.iter().filter(|r| r.car_lfm >= r.car_qfm).count();
    let worst = runs
        .iter()
        .map(|r| r.car_lfm - r.car_qfm)
        .fold(f64::INFINITY, f64::min);
    let parts: Vec<String> = runs
        .iter()
        .map(|r| format!("seed {}: lfm {:.4} qfm {:.4}", r.seed, r.car_lfm, r.car_qfm))
        .collect();
    report(
        "AC3",
        wins >= 2 && worst >= -LFM_SHORTFALL,
        format!(
            "LFM-MLP CAR >= QFM on {wins}/3 seeds, worst shortfall {:.4}: {}",
            (-worst).max(0.0),
            parts.join("; ")
        ),
    )
}

fn ac4_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut net = Network::new(N_INPUTS, 32, 2, N_FUNDAMENTALS, &mut rng);
    // The output layer starts at zero; randomize every parameter so all gradients are live.
    for i in 0..net.n_params() {
        net.set_param(i, rng.random_range(-0.3..0.3));
    }
    let batch = 32;
    let x = Array2::from_shape_fn((batch, N_INPUTS), |_| rng.random_range(-2.0..2.0));
    let y = Array2::from_shape_fn((batch, N_FUNDAMENTALS), |_| rng.random_range(-2.0..2.0));
    let alpha1 = PredictorConfig::default().alpha1;
    let (_, grads) = mlp_gradient(&net, x.view(), y.view(), alpha1);
    let mut worst: f64 = 0.0;
    for _ in 0..FD_PARAMS {
        let i = rng.random_range(0..net.n_params());
        let original = net.param(i);
        net.set_param(i, original + FD_STEP);
        let up = mlp_loss(&net, x.view(), y.view(), alpha1);
        net.set_param(i, original - FD_STEP);
        let down = mlp_loss(&net, x.view(), y.view(), alpha1);
        net.set_param(i, original);
        let numeric = (up - down) / (2.0 * FD_STEP);
        let analytic = gradient_entry(&grads, i);
        let scale = numeric.abs().max(analytic.abs()).max(1e-8);
        worst = worst.max((numeric - analytic).abs() / scale);
    }
    report(
        "AC4",
        worst < FD_TOLERANCE,
        format!("finite-difference gradient check over {FD_PARAMS} parameters: max relative error {worst:.2e}"),
    )
}

fn ac5_accounting(run: &SeedRun) -> Outcome {
    let mut passed = true;
    let mut parts = Vec::new();
    let qfm = run_backtest(&run.panel, FactorMode::Qfm, None, &run.backtest).expect("backtest");
    for (label, ledger) in [("qfm", &qfm), ("lfm", &run.lfm_ledger)] {
        let audit = audit_ledger(ledger, &run.panel, &run.backtest, ACCOUNTING_TOLERANCE);
        passed &= audit.is_clean() && !ledger.trades.is_empty();
        parts.push(format!(
            "{label}: {} trades, cash err {:.1e}, nav err {:.1e}, min cash {:.3}, max participation {:.4}, {} violations",
            ledger.trades.len(),
            audit.max_cash_identity_error,
            audit.max_nav_identity_error,
            audit.min_cash,
            audit.max_participation,
            audit.violations.len()
        ));
    }
    report(
        "AC5",
        passed,
        format!("ledger audit at 1e-6: {}", parts.join("; ")),
    )
}

fn ac6_frictionless() -> Outcome {
    let world = generate_panel(&SynthConfig {
        n_stocks: 1,
        n_months: 120,
        seed: 6,
        exec_noise: 0.0,
        volume_noise: 0.0,
        turnover: 1.0,
        ..SynthConfig::default()
    })
    .expect("synthetic world");
    let panel = world.panel;
    let (start, end) = (panel.start(), panel.end());
    let cfg = BacktestConfig {
        top_n: 1,
        hold_months: 10_000,
        max_participation: 1.0,
        per_share_cost: 0.0,
        slippage_at_max: 0.0,
        start,
        end,
        ..BacktestConfig::default()
    };
    let ledger = run_backtest(&panel, FactorMode::Qfm, None, &cfg).expect("backtest");
    let sid = &panel.ids()[0];
    let series = panel.series(sid).expect("single series");
    let rows: Vec<_> = series.observations().iter().map(|o| o.market).collect();
    // Dividends are held as cash from the month after purchase.
    let dividends: f64 = rows[1..].iter().map(|r| r.dividend_per_share).sum();
    let total_return = (rows[rows.len() - 1].close_price + dividends) / rows[0].exec_price;
    let realized = ledger.final_nav() / cfg.initial_cash;
    let rel = (realized - total_return).abs() / total_return;
    report(
        "AC6",
        rel < ORACLE_TOLERANCE && ledger.trades.len() == 1,
        format!(
            "frictionless buy-and-hold over {} months: total return {total_return:.9}, backtest {realized:.9}, relative error {rel:.1e}",
            rows.len()
        ),
    )
}

fn ac7_exact_cases(run: &SeedRun) -> Outcome {
    let cfg = BacktestConfig::default();
    let s10 = slippage_fraction(0.10, &cfg).expect("within cap");
    let s05 = slippage_fraction(0.05, &cfg).expect("within cap");
    let slippage_ok = (s10 - 0.01).abs() < 1e-15 && (s05 - 0.0025).abs() < 1e-15;

    let mut bitwise = true;
    for t in run.panel.start().through(run.panel.end()) {
        let q = qfm_factor(&run.panel, t).expect("qfm");
        let c = clairvoyant_factor(&run.panel, t, 0).expect("clairvoyant");
        bitwise &= q.values.len() == c.values.len()
            && q.values
                .iter()
                .zip(&c.values)
                .all(|((a, x), (b, y))| a == b && x.to_bits() == y.to_bits());
        bitwise &= q.exclusions == c.exclusions;
    }

    let frozen = generate_panel(&SynthConfig::frozen(50, 100, 7)).expect("frozen world");
    let samples: Vec<_> = SampleBuilder::new(&frozen.panel)
        .build(frozen.panel.start()..=frozen.panel.end(), None)
        .samples
        .into_iter()
        .filter(|s| s.target.is_some())
        .collect();
    let naive_cfg = PredictorConfig {
        kind: PredictorKind::Naive,
        ..PredictorConfig::default()
    };
    let split = split_for(&samples, &naive_cfg).expect("split");
    let naive = fit_predictor(&samples, &split, &naive_cfg).expect("naive");
    let frozen_mse = evaluate(&naive, &samples).expect("evaluate").naive.overall;

    let train = training_samples(&run.panel, &periods()).expect("samples");
    let z = fit_standardizer(&train).expect("standardizer");
    let mut round_trip: f64 = 0.0;
    for s in &train {
        let back = z.inverse_inputs(&z.transform_inputs(&s.inputs));
        for (row, row_back) in s.inputs.iter().zip(&back) {
            for (a, b) in row.iter().zip(row_back) {
                round_trip = round_trip.max((a - b).abs() / a.abs().max(1.0));
            }
        }
        let y = s.target.expect("target");
        for (a, b) in y.iter().zip(&z.inverse_target(&z.transform_target(&y))) {
            round_trip = round_trip.max((a - b).abs() / a.abs().max(1.0));
        }
    }

    report(
        "AC7",
        slippage_ok && bitwise && frozen_mse == 0.0 && round_trip < ROUND_TRIP_TOLERANCE,
        format!(
            "slippage(0.10) {s10}, slippage(0.05) {s05}; clairvoyant(0) == qfm bitwise: {bitwise}; \
             frozen-world naive MSE {frozen_mse}; standardize round trip {round_trip:.1e}"
        ),
    )
}

fn snapshot_dir(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let Ok(entries) = std::fs::read_dir(dir) else {
        return files;
    };
    for entry in entries {
        let path = entry.expect("dir entry").path();
        if path.is_file() {
            let name = path
                .file_name()
                .expect("file name")
                .to_string_lossy()
                .into_owned();
            files.insert(name, std::fs::read(&path).expect("readable file"));
        }
    }
    files
}

fn ac8_determinism() -> Outcome {
    let root = tempfile::tempdir().expect("tempdir");
    let text = format!(
        r#"
        seed = 8
        [paths]
        data_dir = "{data}"
        out_dir = "{out}"
        [periods]
        in_sample_start = "1970-01"
        in_sample_end = "1979-12"
        out_of_sample_start = "1980-01"
        out_of_sample_end = "1984-12"
        [predictor]
        kind = "mlp"
        hidden_units = 8
        max_epochs = 30
        [synth]
        n_stocks = 60
        n_months = 180
        "#,
        data = root.path().join("data").display(),
        out = root.path().join("out").display(),
    );
    let config = root.path().join("run.toml");
    std::fs::write(&config, text).expect("write config");
    let cfg = RunConfig::load(Some(&config), &Default::default()).expect("config");
    let with_mode = |mode| RunConfig {
        mode,
        ..cfg.clone()
    };

    let run_all = || -> Vec<(String, BTreeMap<String, Vec<u8>>)> {
        let mut snapshots = Vec::new();
        let mut record = |step: &str| {
            let mut files = snapshot_dir(&cfg.paths.data_dir);
            files.extend(snapshot_dir(&cfg.paths.out_dir));
            snapshots.push((step.to_string(), files));
        };
        cmd_synth(&cfg).expect("synth");
        record("synth");
        cmd_ingest(&cfg).expect("ingest");
        record("ingest");
        cmd_train(&cfg).expect("train");
        record("train");
        cmd_predict(&cfg).expect("predict");
        record("predict");
        for mode in [
            FactorMode::Qfm,
            FactorMode::Lfm,
            FactorMode::Clairvoyant(12),
        ] {
            cmd_backtest(&with_mode(mode)).expect("backtest");
            record(&format!("backtest {mode}"));
        }
        cmd_sweep(&cfg, &[0, 6, 12]).expect("sweep");
        record("sweep");
        snapshots
    };
    // The second pass runs over the first pass's outputs, so each step is
    // compared on the files present after that step of the first pass.
    let first = run_all();
    let second = run_all();
    let differing: Vec<&str> = first
        .iter()
        .zip(&second)
        .filter(|(a, b)| a.1.iter().any(|(name, bytes)| b.1.get(name) != Some(bytes)))
        .map(|(a, _)| a.0.as_str())
        .collect();
    let n_files = first.last().map_or(0, |s| s.1.len());

    let checkpoint = cfg.checkpoint_path();
    let loaded = load_checkpoint(&checkpoint).expect("load");
    let copy = root.path().join("copy.json");
    save_checkpoint(&loaded, &copy).expect("save");
    let bytes_equal = std::fs::read(&checkpoint).ok() == std::fs::read(&copy).ok();
    let reloaded = load_checkpoint(&copy).expect("reload");
    let (trained, _) = cmd_train(&cfg).expect("train");
    let params_equal = loaded == reloaded && loaded == trained;

    report(
        "AC8",
        differing.is_empty() && bytes_equal && params_equal,
        format!(
            "two full command runs over {n_files} files, differing steps: {differing:?}; \
             checkpoint bytes equal after reload/save: {bytes_equal}; parameters equal: {params_equal}"
        ),
    )
}

fn training_log(p: &Predictor) -> &TrainingLog {
    match p {
        Predictor::Mlp(m) => &m.log,
        _ => panic!("expected an MLP"),
    }
}

fn ac9_early_stopping(runs: &[SeedRun]) -> Outcome {
    let patience = mlp_config(0).patience_epochs;
    let max_epochs = mlp_config(0).max_epochs;
    let mut passed = true;
    let mut parts = Vec::new();
    for r in runs {
        let log = training_log(&r.mlp);
        let min = log
            .epochs
            .iter()
            .map(|e| e.validation_mse)
            .fold(f64::INFINITY, f64::min);
        let run = log.epochs.len();
        let halted = run - log.best_epoch <= patience || run == max_epochs;
        passed &= log.best_validation_mse == min && halted;
        parts.push(format!(
            "seed {}: best epoch {} of {run}, best {:.5}, min recorded {:.5}",
            r.seed, log.best_epoch, log.best_validation_mse, min
        ));
    }
    report(
        "AC9",
        passed,
        format!(
            "best-epoch model and 25-epoch patience: {}",
            parts.join("; ")
        ),
    )
}

fn main() -> ExitCode {
    // Let `cargo test -- <filter>` skip this target when the filter does not name it.
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    if !filter.is_empty() && !filter.iter().any(|f| "acceptance".contains(f.as_str())) {
        return ExitCode::SUCCESS;
    }
    let start = Instant::now();
    let runs: Vec<SeedRun> = SEEDS.iter().map(|&s| run_seed(s)).collect();
    let outcomes = [
        ac1_ordering(&runs),
        ac2_clairvoyance(&runs),
        ac3_lfm_vs_qfm(&runs),
        ac4_gradients(),
        ac5_accounting(&runs[0]),
        ac6_frictionless(),
        ac7_exact_cases(&runs[0]),
        ac8_determinism(),
        ac9_early_stopping(&runs),
    ];
    let failed: Vec<&Outcome> = outcomes.iter().filter(|o| !o.passed).collect();
    println!(
        "acceptance: {}/{} criteria passed in {:.1}s",
        outcomes.len() - failed.len(),
        outcomes.len(),
        start.elapsed().as_secs_f64()
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        for o in failed {
            eprintln!("failed {}: {}", o.id, o.detail);
        }
        ExitCode::FAILURE
    }
}
