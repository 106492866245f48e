//! Pipeline stages shared by the commands: sample selection for the
//! in-sample and out-of-sample periods, training, and forecast evaluation.

use serde::{Deserialize, Serialize};

use lfm_core::backtest::BacktestConfig;
use lfm_core::features::{Sample, SampleBuilder, TargetVector, LOOKAHEAD};
use lfm_core::forecast::{
    fit_predictor, naive_predict, Prediction, Predictor, PredictorConfig, SplitPlan,
};
use lfm_core::metrics::{mse_series, MseSeries};
use lfm_core::{Error, MonthIndex, Panel, Result};

/// In-sample (training) and out-of-sample (evaluation) month ranges, inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Periods {
    pub in_sample_start: MonthIndex,
    pub in_sample_end: MonthIndex,
    pub out_of_sample_start: MonthIndex,
    pub out_of_sample_end: MonthIndex,
}

impl Default for Periods {
    fn default() -> Self {
        Periods {
            in_sample_start: MonthIndex::new(0),
            in_sample_end: MonthIndex::new(359),
            out_of_sample_start: MonthIndex::new(360),
            out_of_sample_end: MonthIndex::new(563),
        }
    }
}

impl Periods {
    pub fn validate(&self) -> Result<()> {
        if self.in_sample_start > self.in_sample_end
            || self.out_of_sample_start > self.out_of_sample_end
        {
            return Err(Error::Config("period start after its end".into()));
        }
        if self.in_sample_end >= self.out_of_sample_start {
            return Err(Error::Config(
                "in-sample period must end before the out-of-sample period starts".into(),
            ));
        }
        Ok(())
    }

    /// Last-step months whose twelve-month target stays inside the in-sample period.
    pub fn training_months(&self) -> Result<(MonthIndex, MonthIndex)> {
        let last = self
            .in_sample_end
            .checked_sub(LOOKAHEAD)
            .filter(|m| *m >= self.in_sample_start)
            .ok_or_else(|| {
                Error::Config("in-sample period shorter than the forecast horizon".into())
            })?;
        Ok((self.in_sample_start, last))
    }
}

/// Training samples: last step and target both inside the in-sample period.
pub fn training_samples(panel: &Panel, periods: &Periods) -> Result<Vec<Sample>> {
    let (first, last) = periods.training_months()?;
    let set = SampleBuilder::new(panel).build(first..=last, None);
    let samples: Vec<Sample> = set
        .samples
        .into_iter()
        .filter(|s| s.target.is_some())
        .collect();
    if samples.is_empty() {
        return Err(Error::EmptyUniverse(
            "no training samples in the in-sample period".into(),
        ));
    }
    Ok(samples)
}

/// Out-of-sample samples with realized targets.
pub fn evaluation_samples(panel: &Panel, periods: &Periods) -> Result<Vec<Sample>> {
    let set = SampleBuilder::new(panel).build(
        periods.out_of_sample_start..=periods.out_of_sample_end,
        None,
    );
    let samples: Vec<Sample> = set
        .samples
        .into_iter()
        .filter(|s| s.target.is_some())
        .collect();
    if samples.is_empty() {
        return Err(Error::EmptyUniverse(
            "no out-of-sample samples with realized targets".into(),
        ));
    }
    Ok(samples)
}

pub fn split_for(samples: &[Sample], cfg: &PredictorConfig) -> Result<SplitPlan> {
    SplitPlan::new(
        samples.iter().map(|s| s.sid.clone()),
        cfg.validation_stock_fraction,
        cfg.seed,
    )
}

/// Fits `cfg.kind` on the in-sample period.
pub fn train(panel: &Panel, periods: &Periods, cfg: &PredictorConfig) -> Result<Predictor> {
    periods.validate()?;
    let samples = training_samples(panel, periods)?;
    let split = split_for(&samples, cfg)?;
    fit_predictor(&samples, &split, cfg)
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub predictions: Vec<Prediction>,
    pub model: MseSeries,
    /// Carry-forward baseline under the same standardizer.
    pub naive: MseSeries,
}

/// Standardized-space MSE of `predictor` and of the naive baseline.
pub fn evaluate(predictor: &Predictor, samples: &[Sample]) -> Result<Evaluation> {
    let z = predictor.standardizer();
    let predictions = predictor.predict(samples)?;
    let months: Vec<MonthIndex> = samples.iter().map(|s| s.t).collect();
    let targets: Vec<TargetVector> = samples
        .iter()
        .map(|s| {
            s.standardized_target(z)
                .expect("evaluation samples carry targets")
        })
        .collect();
    let model_values: Vec<TargetVector> = predictions.iter().map(|p| p.values).collect();
    let naive_values: Vec<TargetVector> = samples.iter().map(|s| naive_predict(s, z)).collect();
    Ok(Evaluation {
        model: mse_series(&months, &model_values, &targets)?,
        naive: mse_series(&months, &naive_values, &targets)?,
        predictions,
    })
}

/// `base` with its trading window set to the out-of-sample period, clipped
/// to the panel.
pub fn backtest_config(
    base: &BacktestConfig,
    periods: &Periods,
    panel: &Panel,
) -> Result<BacktestConfig> {
    let start = periods.out_of_sample_start.max(panel.start());
    let end = periods.out_of_sample_end.min(panel.end());
    if start >= end {
        return Err(Error::EmptyUniverse(format!(
            "panel {}..={} does not cover the out-of-sample period",
            panel.start(),
            panel.end()
        )));
    }
    Ok(BacktestConfig {
        start,
        end,
        ..base.clone()
    })
}
