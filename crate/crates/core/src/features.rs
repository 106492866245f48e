//! Sample construction: five yearly-spaced input steps of sixteen
//! market-cap-scaled fundamentals plus four cross-sectional momentum
//! percentiles, and the sixteen fundamentals twelve months ahead as target.

use std::collections::BTreeMap;
use std::io::Write;
use std::ops::RangeInclusive;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calendar::MonthIndex;
use crate::error::{Error, Result};
use crate::panel::Panel;
use crate::types::{Fundamental, SecurityId, N_FUNDAMENTALS};

pub const N_STEPS: usize = 5;
/// Months between consecutive input steps.
pub const STEP_SPACING: u32 = 12;
/// Months from the last input step to the target.
pub const LOOKAHEAD: u32 = 12;
pub const MOMENTUM_HORIZONS: [u32; 4] = [1, 3, 6, 9];
pub const N_MOMENTUM: usize = MOMENTUM_HORIZONS.len();
pub const N_INPUT_COLS: usize = N_FUNDAMENTALS + N_MOMENTUM;
pub const N_INPUTS: usize = N_STEPS * N_INPUT_COLS;

/// Percentile assigned when a cross-section has a single member or a
/// security has no return history at that horizon.
pub const NEUTRAL_PERCENTILE: f64 = 0.5;

pub type InputMatrix = [[f64; N_INPUT_COLS]; N_STEPS];
pub type TargetVector = [f64; N_FUNDAMENTALS];

/// Months offsets of the input steps relative to the last step `t`.
pub fn step_offsets() -> [u32; N_STEPS] {
    let mut out = [0; N_STEPS];
    for (i, o) in out.iter_mut().enumerate() {
        *o = (N_STEPS - 1 - i) as u32 * STEP_SPACING;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValueSpace {
    /// Fundamentals divided by the last-step market cap; momentum in [0, 1].
    Scaled,
    /// Scaled values after per-column standardization.
    Standardized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub sid: SecurityId,
    /// Last input step.
    pub t: MonthIndex,
    /// Rows are months t-48, t-36, t-24, t-12, t; columns are the sixteen
    /// fundamentals then momentum percentiles for 1, 3, 6, 9 months.
    pub inputs: InputMatrix,
    /// Fundamentals at t+12; absent when t+12 lies past the panel end.
    pub target: Option<TargetVector>,
    /// Millions USD, the divisor used for every fundamental entry.
    pub mcap_t: f64,
    pub space: ValueSpace,
}

impl Sample {
    /// Inputs flattened step-major and standardized.
    pub fn standardized_inputs(&self, standardizer: &Standardizer) -> [f64; N_INPUTS] {
        match self.space {
            ValueSpace::Scaled => standardizer.transform_inputs(&self.inputs),
            ValueSpace::Standardized => flatten(&self.inputs),
        }
    }

    pub fn standardized_target(&self, standardizer: &Standardizer) -> Option<TargetVector> {
        let target = self.target?;
        Some(match self.space {
            ValueSpace::Scaled => standardizer.transform_target(&target),
            ValueSpace::Standardized => target,
        })
    }

    /// Fundamentals of the last input step in scaled space.
    pub fn last_step_scaled(&self, standardizer: &Standardizer) -> TargetVector {
        let last = match self.space {
            ValueSpace::Scaled => self.inputs[N_STEPS - 1],
            ValueSpace::Standardized => standardizer.inverse_inputs_row(&self.inputs[N_STEPS - 1]),
        };
        let mut out = [0.0; N_FUNDAMENTALS];
        out.copy_from_slice(&last[..N_FUNDAMENTALS]);
        out
    }
}

pub fn flatten(m: &InputMatrix) -> [f64; N_INPUTS] {
    let mut out = [0.0; N_INPUTS];
    for (step, row) in m.iter().enumerate() {
        out[step * N_INPUT_COLS..(step + 1) * N_INPUT_COLS].copy_from_slice(row);
    }
    out
}

/// Fractional ranks in [0, 1]: rank / (n - 1) with ranks 0..n-1 and ties
/// sharing their average rank. A single value maps to 0.5.
pub fn percentile_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    if n == 0 {
        return Vec::new();
    }
    if n == 1 {
        return vec![NEUTRAL_PERCENTILE];
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; n];
    let denom = (n - 1) as f64;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j - 1) as f64 / 2.0;
        for &k in &order[i..j] {
            out[k] = avg / denom;
        }
        i = j;
    }
    out
}

/// Cross-sectional percentile of `close(t) / close(t - horizon) - 1` over
/// securities with a close at both months.
pub fn momentum_percentile(
    panel: &Panel,
    t: MonthIndex,
    horizon: u32,
) -> Result<BTreeMap<SecurityId, f64>> {
    if horizon == 0 {
        return Err(Error::Domain("momentum horizon must be positive".into()));
    }
    let Some(past) = t.checked_sub(horizon) else {
        return Ok(BTreeMap::new());
    };
    let mut ids = Vec::new();
    let mut returns = Vec::new();
    for (sid, s) in panel.iter() {
        if let (Some(now), Some(then)) = (s.get(t), s.get(past)) {
            ids.push(sid.clone());
            returns.push(now.market.close_price / then.market.close_price - 1.0);
        }
    }
    Ok(ids.into_iter().zip(percentile_ranks(&returns)).collect())
}

/// Momentum percentiles for every (security, month) in a panel, aligned
/// with each security's series. `NaN` marks an undefined entry.
#[derive(Debug, Clone)]
pub struct MomentumTable {
    values: Vec<Vec<[f64; N_MOMENTUM]>>,
}

impl MomentumTable {
    pub fn new(panel: &Panel) -> Self {
        let mut values: Vec<Vec<[f64; N_MOMENTUM]>> = panel
            .iter()
            .map(|(_, s)| vec![[f64::NAN; N_MOMENTUM]; s.months().len()])
            .collect();
        let mut slots = Vec::new();
        let mut returns = Vec::new();
        for t in panel.start().through(panel.end()) {
            for (h_idx, &h) in MOMENTUM_HORIZONS.iter().enumerate() {
                let Some(past) = t.checked_sub(h) else {
                    continue;
                };
                slots.clear();
                returns.clear();
                for (i, (_, s)) in panel.iter().enumerate() {
                    if let (Some(pos), Some(then)) = (s.position(t), s.get(past)) {
                        slots.push((i, pos));
                        returns.push(
                            s.observations()[pos].market.close_price / then.market.close_price
                                - 1.0,
                        );
                    }
                }
                for (&(i, pos), p) in slots.iter().zip(percentile_ranks(&returns)) {
                    values[i][pos][h_idx] = p;
                }
            }
        }
        MomentumTable { values }
    }

    /// Percentiles for the `pos`-th observation of security `index`.
    pub fn get(&self, index: usize, pos: usize) -> [f64; N_MOMENTUM] {
        self.values[index][pos]
    }
}

/// Divides every entry by the last-step market cap.
pub fn scale_by_mcap(
    raw: &[[f64; N_FUNDAMENTALS]; N_STEPS],
    mcap_t: f64,
) -> Result<[[f64; N_FUNDAMENTALS]; N_STEPS]> {
    if !(mcap_t.is_finite() && mcap_t > 0.0) {
        return Err(Error::Domain(format!(
            "market cap must be positive, got {mcap_t}"
        )));
    }
    let mut out = *raw;
    for row in out.iter_mut() {
        for v in row.iter_mut() {
            *v /= mcap_t;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct SampleSet {
    pub samples: Vec<Sample>,
    /// (security, month) pairs in range without a full input window.
    pub skipped: usize,
}

impl SampleSet {
    pub fn with_targets(&self) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(|s| s.target.is_some())
    }
}

/// Builds samples from one panel, computing momentum percentiles once.
pub struct SampleBuilder<'a> {
    panel: &'a Panel,
    momentum: MomentumTable,
}

impl<'a> SampleBuilder<'a> {
    pub fn new(panel: &'a Panel) -> Self {
        SampleBuilder {
            panel,
            momentum: MomentumTable::new(panel),
        }
    }

    pub fn panel(&self) -> &Panel {
        self.panel
    }

    /// Sample for security `index` at last step `t`, or `None` if any input
    /// step lacks an observation or scaling is impossible.
    pub fn sample_at(&self, index: usize, t: MonthIndex) -> Option<Sample> {
        let series = self.panel.series_at(index);
        let mut raw = [[0.0; N_FUNDAMENTALS]; N_STEPS];
        let mut momentum = [[0.0; N_MOMENTUM]; N_STEPS];
        for (step, offset) in step_offsets().iter().enumerate() {
            let m = t.checked_sub(*offset)?;
            let pos = series.position(m)?;
            raw[step] = *series.observations()[pos].fundamentals.as_array();
            momentum[step] =
                self.momentum
                    .get(index, pos)
                    .map(|p| if p.is_nan() { NEUTRAL_PERCENTILE } else { p });
        }
        let mcap_t = series.get(t)?.market.market_cap;
        let scaled = scale_by_mcap(&raw, mcap_t).ok()?;
        let mut inputs = [[0.0; N_INPUT_COLS]; N_STEPS];
        for step in 0..N_STEPS {
            inputs[step][..N_FUNDAMENTALS].copy_from_slice(&scaled[step]);
            inputs[step][N_FUNDAMENTALS..].copy_from_slice(&momentum[step]);
        }
        let target = series.get(t.plus(LOOKAHEAD)).map(|o| {
            let mut y = *o.fundamentals.as_array();
            y.iter_mut().for_each(|v| *v /= mcap_t);
            y
        });
        Some(Sample {
            sid: self.panel.ids()[index].clone(),
            t,
            inputs,
            target,
            mcap_t,
            space: ValueSpace::Scaled,
        })
    }

    /// Samples for every security with an observation at `t`.
    pub fn cross_section(&self, t: MonthIndex) -> Vec<Sample> {
        (0..self.panel.n_securities())
            .filter(|&i| self.panel.series_at(i).get(t).is_some())
            .filter_map(|i| self.sample_at(i, t))
            .collect()
    }

    /// All samples with last step in `months`, sorted by (sid, t). Samples
    /// whose target lies inside the panel range but is missing are skipped;
    /// targets past the panel end yield inference-only samples.
    pub fn build(
        &self,
        months: RangeInclusive<MonthIndex>,
        standardizer: Option<&Standardizer>,
    ) -> SampleSet {
        let mut set = SampleSet::default();
        for (index, (_, series)) in self.panel.iter().enumerate() {
            for &t in series.months() {
                if !months.contains(&t) {
                    continue;
                }
                match self.sample_at(index, t) {
                    Some(s) if s.target.is_some() || t.plus(LOOKAHEAD) > self.panel.end() => {
                        set.samples.push(match standardizer {
                            Some(z) => z.transform_sample(&s),
                            None => s,
                        });
                    }
                    _ => set.skipped += 1,
                }
            }
        }
        set
    }
}

pub fn build_samples(
    panel: &Panel,
    months: RangeInclusive<MonthIndex>,
    standardizer: Option<&Standardizer>,
) -> SampleSet {
    SampleBuilder::new(panel).build(months, standardizer)
}

/// Per-column statistics with the population (1/n) convention. Input
/// statistics pool all five steps of each of the twenty input columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub input_constant: Vec<bool>,
    pub target_mean: Vec<f64>,
    pub target_std: Vec<f64>,
    pub target_constant: Vec<bool>,
}

fn column_stats(n: usize, sum: f64, values: impl Iterator<Item = f64>) -> (f64, f64, bool) {
    let mean = sum / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    if std.is_nan() || std <= 1e-12 * (1.0 + mean.abs()) {
        (mean, 1.0, true)
    } else {
        (mean, std, false)
    }
}

/// Fits statistics on training samples (scaled space); targets come from
/// samples that carry one.
pub fn fit_standardizer(samples: &[Sample]) -> Result<Standardizer> {
    if samples.is_empty() {
        return Err(Error::Domain(
            "cannot fit a standardizer on zero samples".into(),
        ));
    }
    if samples.iter().any(|s| s.space != ValueSpace::Scaled) {
        return Err(Error::Contract(
            "standardizer must be fitted on scaled samples".into(),
        ));
    }
    let with_target: Vec<&TargetVector> =
        samples.iter().filter_map(|s| s.target.as_ref()).collect();
    if with_target.is_empty() {
        return Err(Error::Domain("no training sample carries a target".into()));
    }

    let mut z = Standardizer {
        input_mean: Vec::with_capacity(N_INPUT_COLS),
        input_std: Vec::with_capacity(N_INPUT_COLS),
        input_constant: Vec::with_capacity(N_INPUT_COLS),
        target_mean: Vec::with_capacity(N_FUNDAMENTALS),
        target_std: Vec::with_capacity(N_FUNDAMENTALS),
        target_constant: Vec::with_capacity(N_FUNDAMENTALS),
    };
    let n_in = samples.len() * N_STEPS;
    for c in 0..N_INPUT_COLS {
        let col = || {
            samples
                .iter()
                .flat_map(move |s| s.inputs.iter().map(move |row| row[c]))
        };
        let (m, sd, k) = column_stats(n_in, col().sum(), col());
        z.input_mean.push(m);
        z.input_std.push(sd);
        z.input_constant.push(k);
    }
    for c in 0..N_FUNDAMENTALS {
        let col = || with_target.iter().map(move |y| y[c]);
        let (m, sd, k) = column_stats(with_target.len(), col().sum(), col());
        z.target_mean.push(m);
        z.target_std.push(sd);
        z.target_constant.push(k);
    }
    Ok(z)
}

impl Standardizer {
    /// Checks column counts and that every deviation is positive and finite.
    pub fn validate(&self) -> Result<()> {
        let shapes = [
            ("input_mean", self.input_mean.len(), N_INPUT_COLS),
            ("input_std", self.input_std.len(), N_INPUT_COLS),
            ("input_constant", self.input_constant.len(), N_INPUT_COLS),
            ("target_mean", self.target_mean.len(), N_FUNDAMENTALS),
            ("target_std", self.target_std.len(), N_FUNDAMENTALS),
            (
                "target_constant",
                self.target_constant.len(),
                N_FUNDAMENTALS,
            ),
        ];
        for (name, got, want) in shapes {
            if got != want {
                return Err(Error::Contract(format!(
                    "standardizer {name} has {got} columns, expected {want}"
                )));
            }
        }
        let all = self.input_mean.iter().chain(&self.target_mean);
        let stds = self.input_std.iter().chain(&self.target_std);
        if all.clone().any(|v| !v.is_finite()) || stds.clone().any(|s| !(s.is_finite() && *s > 0.0))
        {
            return Err(Error::Contract(
                "standardizer statistics must be finite with std > 0".into(),
            ));
        }
        Ok(())
    }

    pub fn transform_inputs(&self, inputs: &InputMatrix) -> [f64; N_INPUTS] {
        let mut out = [0.0; N_INPUTS];
        for (step, row) in inputs.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                out[step * N_INPUT_COLS + c] = (v - self.input_mean[c]) / self.input_std[c];
            }
        }
        out
    }

    pub fn inverse_inputs(&self, flat: &[f64; N_INPUTS]) -> InputMatrix {
        let mut out = [[0.0; N_INPUT_COLS]; N_STEPS];
        for (step, row) in out.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = flat[step * N_INPUT_COLS + c] * self.input_std[c] + self.input_mean[c];
            }
        }
        out
    }

    fn inverse_inputs_row(&self, row: &[f64; N_INPUT_COLS]) -> [f64; N_INPUT_COLS] {
        let mut out = *row;
        for (c, v) in out.iter_mut().enumerate() {
            *v = *v * self.input_std[c] + self.input_mean[c];
        }
        out
    }

    pub fn transform_target(&self, y: &TargetVector) -> TargetVector {
        let mut out = *y;
        for (c, v) in out.iter_mut().enumerate() {
            *v = (*v - self.target_mean[c]) / self.target_std[c];
        }
        out
    }

    pub fn inverse_target(&self, y: &TargetVector) -> TargetVector {
        let mut out = *y;
        for (c, v) in out.iter_mut().enumerate() {
            *v = *v * self.target_std[c] + self.target_mean[c];
        }
        out
    }

    /// Inverse for a single target column.
    pub fn inverse_target_column(&self, column: usize, value: f64) -> f64 {
        value * self.target_std[column] + self.target_mean[column]
    }

    pub fn transform_sample(&self, sample: &Sample) -> Sample {
        if sample.space == ValueSpace::Standardized {
            return sample.clone();
        }
        let flat = self.transform_inputs(&sample.inputs);
        let mut inputs = [[0.0; N_INPUT_COLS]; N_STEPS];
        for (step, row) in inputs.iter_mut().enumerate() {
            row.copy_from_slice(&flat[step * N_INPUT_COLS..(step + 1) * N_INPUT_COLS]);
        }
        Sample {
            inputs,
            target: sample.target.map(|y| self.transform_target(&y)),
            space: ValueSpace::Standardized,
            ..sample.clone()
        }
    }
}

pub fn input_column_names() -> Vec<String> {
    let mut cols: Vec<String> = Fundamental::ALL
        .iter()
        .map(|f| f.name().to_string())
        .collect();
    cols.extend(MOMENTUM_HORIZONS.iter().map(|h| format!("mom_{h}m")));
    cols
}

/// CSV with `sid,t`, the 100 inputs step-major (`s0_*` is t-48, `s4_*` is t),
/// then the 16 targets (empty when absent).
pub fn write_samples_csv<W: Write>(writer: W, samples: &[Sample]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let names = input_column_names();
    let mut header = vec!["sid".to_string(), "t".to_string()];
    for step in 0..N_STEPS {
        header.extend(names.iter().map(|n| format!("s{step}_{n}")));
    }
    header.extend(
        Fundamental::ALL
            .iter()
            .map(|f| format!("target_{}", f.name())),
    );
    w.write_record(&header)?;
    for s in samples {
        let mut row = vec![s.sid.to_string(), s.t.to_string()];
        row.extend(flatten(&s.inputs).iter().map(|v| v.to_string()));
        match &s.target {
            Some(y) => row.extend(y.iter().map(|v| v.to_string())),
            None => row.extend(std::iter::repeat_n(String::new(), N_FUNDAMENTALS)),
        }
        w.write_record(&row)?;
    }
    w.flush()
        .map_err(|e| Error::io(Path::new("<samples>"), e))?;
    Ok(())
}
