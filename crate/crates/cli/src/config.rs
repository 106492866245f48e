//! Run configuration loaded from a TOML file with command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use lfm_core::backtest::BacktestConfig;
use lfm_core::factor::FactorMode;
use lfm_core::forecast::PredictorConfig;
use lfm_core::ingest::UniverseConfig;
use lfm_core::synth::SynthConfig;

use crate::pipeline::Periods;
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Directory holding `fundamentals.csv`, `market.csv` and `cpi.csv`.
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Defaults to `<out_dir>/checkpoint.json`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Clairvoyance horizons in months.
    pub horizons: Vec<u32>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            horizons: vec![0, 3, 6, 9, 12],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Drives the synthetic generator, the validation split and network initialization.
    pub seed: u64,
    /// Factor used by `backtest` when `--mode` is absent.
    pub mode: FactorMode,
    /// Monthly risk-free rate for the Sharpe ratio.
    pub risk_free_monthly: f64,
    pub paths: PathsConfig,
    pub periods: Periods,
    pub universe: UniverseConfig,
    pub predictor: PredictorConfig,
    /// `start` and `end` are taken from the out-of-sample period.
    pub backtest: BacktestConfig,
    pub synth: SynthConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            mode: FactorMode::Qfm,
            risk_free_monthly: 0.0,
            paths: PathsConfig::default(),
            periods: Periods::default(),
            universe: UniverseConfig::default(),
            predictor: PredictorConfig::default(),
            backtest: BacktestConfig::default(),
            synth: SynthConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<FactorMode>,
    pub out_dir: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))
    }

    /// Reads `path` (defaults when `None`) and applies overrides. The global
    /// seed is propagated to the generator and the predictor.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    CliError::Usage(format!("cannot read config {}: {e}", p.display()))
                })?;
                Self::from_toml(&text)?
            }
            None => RunConfig::default(),
        };
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
        }
        if let Some(mode) = overrides.mode {
            cfg.mode = mode;
        }
        if let Some(out) = &overrides.out_dir {
            cfg.paths.out_dir = out.clone();
        }
        if let Some(data) = &overrides.data_dir {
            cfg.paths.data_dir = data.clone();
        }
        cfg.synth.seed = cfg.seed;
        cfg.predictor.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.periods.validate()?;
        self.universe.validate()?;
        self.predictor.validate()?;
        self.synth.validate()?;
        let probe = BacktestConfig {
            start: self.periods.out_of_sample_start,
            end: self.periods.out_of_sample_end,
            ..self.backtest.clone()
        };
        probe.validate()?;
        if !self.risk_free_monthly.is_finite() {
            return Err(CliError::Usage("risk_free_monthly must be finite".into()));
        }
        Ok(())
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.paths
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.paths.out_dir.join("checkpoint.json"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use lfm_core::MonthIndex;

    #[test]
    fn defaults_follow_the_reference_setup() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.backtest.top_n, 50);
        assert_eq!(cfg.backtest.max_participation, 0.10);
        assert_eq!(cfg.predictor.hidden_units, 1024);
        assert_eq!(cfg.predictor.hidden_layers, 2);
        assert_eq!(cfg.periods.in_sample_end.to_string(), "1999-12");
        assert_eq!(cfg.periods.out_of_sample_start.to_string(), "2000-01");
        assert_eq!(cfg.periods.out_of_sample_end.to_string(), "2016-12");
        cfg.validate().unwrap();
    }

    #[test]
    fn toml_sections_and_overrides() {
        let text = r#"
            seed = 4
            mode = "clairvoyant:6"
            [periods]
            in_sample_start = "1970-01"
            in_sample_end = "1981-12"
            out_of_sample_start = "1982-01"
            out_of_sample_end = "1989-12"
            [predictor]
            kind = "linear"
            [backtest]
            top_n = 10
            [synth]
            n_stocks = 50
        "#;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, text).unwrap();
        let cfg = RunConfig::load(
            Some(&path),
            &Overrides {
                seed: Some(9),
                ..Overrides::default()
            },
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.synth.seed, 9);
        assert_eq!(cfg.predictor.seed, 9);
        assert_eq!(cfg.mode, FactorMode::Clairvoyant(6));
        assert_eq!(cfg.backtest.top_n, 10);
        assert_eq!(cfg.synth.n_stocks, 50);
        assert_eq!(cfg.periods.out_of_sample_start, MonthIndex::new(144));
    }

    #[test]
    fn bad_configs_are_usage_errors() {
        assert!(matches!(
            RunConfig::from_toml("bogus = 1"),
            Err(CliError::Usage(_))
        ));
        let overlapping = r#"
            [periods]
            in_sample_start = "1970-01"
            in_sample_end = "1990-12"
            out_of_sample_start = "1985-01"
            out_of_sample_end = "1995-12"
        "#;
        let cfg = RunConfig::from_toml(overlapping).unwrap();
        assert!(matches!(cfg.validate(), Err(CliError::Usage(_))));
        let missing = RunConfig::load(
            Some(Path::new("/nonexistent/run.toml")),
            &Overrides::default(),
        );
        assert!(matches!(missing, Err(CliError::Usage(_))));
    }
}
