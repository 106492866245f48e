//! Twelve-month-ahead fundamentals predictors: naive carry-forward, ridge
//! regression, and a multi-task MLP.
//!
//! All predictors work in standardized-scaled space: fundamentals divided by
//! the last-step market cap, then standardized with statistics fitted on the
//! training partition. Predictions convert back to millions USD through
//! [`Prediction::ebit_forecast_musd`].

mod adadelta;
mod checkpoint;
mod linear;
mod mlp;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adadelta::{AdaDelta, ADADELTA_EPSILON, ADADELTA_RHO};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION,
};
pub use linear::{fit_linear, ridge_fit, LinearModel, MIN_LINEAR_SAMPLES};
pub use mlp::{
    clip_global_norm, gradient_entry, mlp_gradient, mlp_loss, train_mlp, Dense, EpochRecord,
    MlpModel, Network, TrainingLog,
};

use crate::calendar::MonthIndex;
use crate::error::{Error, Result};
use crate::features::{fit_standardizer, Sample, Standardizer, TargetVector};
use crate::types::{SecurityId, EBIT_INDEX, N_FUNDAMENTALS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    Naive,
    Linear,
    Mlp,
}

impl std::str::FromStr for PredictorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(PredictorKind::Naive),
            "linear" => Ok(PredictorKind::Linear),
            "mlp" => Ok(PredictorKind::Mlp),
            other => Err(Error::Config(format!("unknown predictor kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    pub kind: PredictorKind,
    pub hidden_layers: usize,
    pub hidden_units: usize,
    pub input_keep_prob: f64,
    pub hidden_keep_prob: f64,
    /// Weight of the EBIT term in the training loss.
    pub alpha1: f64,
    pub max_grad_norm: f64,
    pub patience_epochs: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub validation_stock_fraction: f64,
    pub ridge_lambda: f64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            kind: PredictorKind::Mlp,
            hidden_layers: 2,
            hidden_units: 1024,
            input_keep_prob: 1.0,
            hidden_keep_prob: 0.5,
            alpha1: 0.75,
            max_grad_norm: 1.0,
            patience_epochs: 25,
            max_epochs: 1000,
            batch_size: 256,
            seed: 0,
            validation_stock_fraction: 0.30,
            ridge_lambda: 1e-6,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        let keep = |p: f64| p > 0.0 && p <= 1.0;
        let checks = [
            (self.hidden_units > 0, "hidden_units must be positive"),
            (
                keep(self.input_keep_prob),
                "input_keep_prob must be in (0, 1]",
            ),
            (
                keep(self.hidden_keep_prob),
                "hidden_keep_prob must be in (0, 1]",
            ),
            (
                (0.0..=1.0).contains(&self.alpha1),
                "alpha1 must be in [0, 1]",
            ),
            (self.max_grad_norm > 0.0, "max_grad_norm must be positive"),
            (self.patience_epochs > 0, "patience_epochs must be positive"),
            (self.max_epochs > 0, "max_epochs must be positive"),
            (self.batch_size > 0, "batch_size must be positive"),
            (
                self.validation_stock_fraction > 0.0 && self.validation_stock_fraction < 1.0,
                "validation_stock_fraction must be in (0, 1)",
            ),
            (
                self.ridge_lambda >= 0.0,
                "ridge_lambda must be non-negative",
            ),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::Config((*msg).into())),
            None => Ok(()),
        }
    }
}

/// Seeded partition of securities into training and validation sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train: BTreeSet<SecurityId>,
    pub validation: BTreeSet<SecurityId>,
}

impl SplitPlan {
    /// Shuffles the sorted, de-duplicated ids with `seed` and assigns the
    /// first `round(fraction * n)` to validation (at least one per side when
    /// `n >= 2`).
    pub fn new(
        ids: impl IntoIterator<Item = SecurityId>,
        fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut ids: Vec<SecurityId> = ids
            .into_iter()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if ids.len() < 2 {
            return Err(Error::Domain(
                "a split needs at least two securities".into(),
            ));
        }
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::Domain(format!(
                "validation fraction {fraction} outside (0, 1)"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ids.shuffle(&mut rng);
        let n_val = ((fraction * ids.len() as f64).round() as usize).clamp(1, ids.len() - 1);
        let train = ids.split_off(n_val).into_iter().collect();
        Ok(SplitPlan {
            train,
            validation: ids.into_iter().collect(),
        })
    }

    pub fn partition<'a>(&self, samples: &'a [Sample]) -> (Vec<&'a Sample>, Vec<&'a Sample>) {
        let train = samples
            .iter()
            .filter(|s| self.train.contains(&s.sid))
            .collect();
        let val = samples
            .iter()
            .filter(|s| self.validation.contains(&s.sid))
            .collect();
        (train, val)
    }
}

/// Per-target weights: `alpha1` on EBIT, `(1 - alpha1) / 15` on every other item.
pub fn loss_weights(alpha1: f64) -> [f64; N_FUNDAMENTALS] {
    let mut w = [(1.0 - alpha1) / (N_FUNDAMENTALS - 1) as f64; N_FUNDAMENTALS];
    w[EBIT_INDEX] = alpha1;
    w
}

/// `alpha1 * (ebit error)^2 + (1 - alpha1) * mean of the other fifteen squared errors`.
pub fn weighted_loss(pred: &TargetVector, target: &TargetVector, alpha1: f64) -> f64 {
    loss_weights(alpha1)
        .iter()
        .zip(pred.iter().zip(target.iter()))
        .map(|(w, (p, y))| w * (p - y) * (p - y))
        .sum()
}

/// Unweighted mean squared error across the sixteen targets.
pub fn unweighted_mse(pred: &TargetVector, target: &TargetVector) -> f64 {
    pred.iter()
        .zip(target)
        .map(|(p, y)| (p - y) * (p - y))
        .sum::<f64>()
        / N_FUNDAMENTALS as f64
}

/// Carries the last input step's fundamentals forward unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaivePredictor {
    pub standardizer: Standardizer,
}

/// Naive forecast in standardized target space.
pub fn naive_predict(sample: &Sample, standardizer: &Standardizer) -> TargetVector {
    standardizer.transform_target(&sample.last_step_scaled(standardizer))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Predictor {
    Naive(NaivePredictor),
    Linear(LinearModel),
    Mlp(MlpModel),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub sid: SecurityId,
    pub t: MonthIndex,
    /// Standardized-scaled forecasts for the sixteen items at t+12.
    pub values: TargetVector,
    /// EBIT forecast converted back to millions USD.
    pub ebit_forecast_musd: f64,
}

impl Predictor {
    pub fn kind(&self) -> PredictorKind {
        match self {
            Predictor::Naive(_) => PredictorKind::Naive,
            Predictor::Linear(_) => PredictorKind::Linear,
            Predictor::Mlp(_) => PredictorKind::Mlp,
        }
    }

    pub fn standardizer(&self) -> &Standardizer {
        match self {
            Predictor::Naive(p) => &p.standardizer,
            Predictor::Linear(m) => &m.standardizer,
            Predictor::Mlp(m) => &m.standardizer,
        }
    }

    /// Checks the standardizer and parameter shapes against the fixed topology.
    pub fn validate(&self) -> Result<()> {
        self.standardizer().validate()?;
        match self {
            Predictor::Naive(_) => Ok(()),
            Predictor::Linear(m) => m.validate(),
            Predictor::Mlp(m) => m.network.validate(),
        }
    }

    /// Forecasts in standardized target space, one row per sample.
    pub fn predict_standardized(&self, samples: &[Sample]) -> Result<Vec<TargetVector>> {
        self.validate()?;
        let z = self.standardizer();
        Ok(match self {
            Predictor::Naive(_) => samples.iter().map(|s| naive_predict(s, z)).collect(),
            Predictor::Linear(m) => samples
                .iter()
                .map(|s| m.predict_one(&s.standardized_inputs(z)))
                .collect(),
            Predictor::Mlp(m) => m.predict_batch(samples),
        })
    }

    pub fn predict(&self, samples: &[Sample]) -> Result<Vec<Prediction>> {
        let values = self.predict_standardized(samples)?;
        let z = self.standardizer();
        Ok(samples
            .iter()
            .zip(values)
            .map(|(s, values)| Prediction {
                sid: s.sid.clone(),
                t: s.t,
                ebit_forecast_musd: z.inverse_target_column(EBIT_INDEX, values[EBIT_INDEX])
                    * s.mcap_t,
                values,
            })
            .collect())
    }
}

/// Fits the configured predictor. The standardizer is always fitted on the
/// training partition of `split`; the MLP also uses the validation partition
/// for early stopping.
pub fn fit_predictor(
    samples: &[Sample],
    split: &SplitPlan,
    cfg: &PredictorConfig,
) -> Result<Predictor> {
    cfg.validate()?;
    match cfg.kind {
        PredictorKind::Naive => {
            let (train, _) = split.partition(samples);
            let train: Vec<Sample> = train.into_iter().cloned().collect();
            Ok(Predictor::Naive(NaivePredictor {
                standardizer: fit_standardizer(&train)?,
            }))
        }
        PredictorKind::Linear => {
            let (train, _) = split.partition(samples);
            let train: Vec<Sample> = train.into_iter().cloned().collect();
            Ok(Predictor::Linear(fit_linear(&train, cfg)?))
        }
        PredictorKind::Mlp => Ok(Predictor::Mlp(train_mlp(samples, split, cfg)?)),
    }
}
