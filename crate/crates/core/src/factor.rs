//! EBIT/EV factor snapshots: current (QFM), predicted (LFM) and
//! clairvoyant (realized future EBIT), plus deterministic top-n ranking.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use log::debug;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::calendar::MonthIndex;
use crate::error::{Error, Result};
use crate::features::SampleBuilder;
use crate::forecast::Predictor;
use crate::panel::Panel;
use crate::types::{Fundamental, FundamentalVector, MarketRow, SecurityId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FactorMode {
    Qfm,
    Lfm,
    /// Oracle EBIT this many months ahead.
    Clairvoyant(u32),
}

impl fmt::Display for FactorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FactorMode::Qfm => f.write_str("qfm"),
            FactorMode::Lfm => f.write_str("lfm"),
            FactorMode::Clairvoyant(h) => write!(f, "clairvoyant:{h}"),
        }
    }
}

impl FromStr for FactorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qfm" => Ok(FactorMode::Qfm),
            "lfm" => Ok(FactorMode::Lfm),
            _ => s
                .strip_prefix("clairvoyant:")
                .and_then(|h| h.parse().ok())
                .map(FactorMode::Clairvoyant)
                .ok_or_else(|| {
                    Error::Config(format!(
                        "unknown factor mode `{s}` (qfm, lfm, clairvoyant:H)"
                    ))
                }),
        }
    }
}

impl Serialize for FactorMode {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FactorMode {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(deserializer)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exclusion {
    NonPositiveEnterpriseValue,
    /// No input window could be built for the predictor.
    MissingSample,
    /// No observation at the oracle month.
    MissingFuture,
    NonFiniteFactor,
}

impl fmt::Display for Exclusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Exclusion::NonPositiveEnterpriseValue => "non_positive_ev",
            Exclusion::MissingSample => "missing_sample",
            Exclusion::MissingFuture => "missing_future",
            Exclusion::NonFiniteFactor => "non_finite_factor",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorSnapshot {
    pub t: MonthIndex,
    pub mode: FactorMode,
    pub values: BTreeMap<SecurityId, f64>,
    pub exclusions: BTreeMap<SecurityId, Exclusion>,
}

impl FactorSnapshot {
    fn new(t: MonthIndex, mode: FactorMode) -> Self {
        FactorSnapshot {
            t,
            mode,
            values: BTreeMap::new(),
            exclusions: BTreeMap::new(),
        }
    }

    fn record(&mut self, sid: &SecurityId, value: std::result::Result<f64, Exclusion>) {
        match value {
            Ok(v) if v.is_finite() => {
                self.values.insert(sid.clone(), v);
            }
            Ok(_) => {
                self.exclusions
                    .insert(sid.clone(), Exclusion::NonFiniteFactor);
            }
            Err(e) => {
                debug!("{} {}: {sid} excluded ({e})", self.t, self.mode);
                self.exclusions.insert(sid.clone(), e);
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// `market_cap + total_liabilities − cash`, millions USD; `None` when not positive.
pub fn enterprise_value(row: &MarketRow, f: &FundamentalVector) -> Option<f64> {
    let ev = row.market_cap + f[Fundamental::TotalLiabilitiesMrq] - f[Fundamental::CashMrq];
    (ev > 0.0).then_some(ev)
}

fn require_month(panel: &Panel, t: MonthIndex) -> Result<()> {
    if t < panel.start() || t > panel.end() {
        return Err(Error::Domain(format!(
            "month {t} outside panel range {}..={}",
            panel.start(),
            panel.end()
        )));
    }
    Ok(())
}

/// `ebit(t) / EV(t)`.
pub fn qfm_factor(panel: &Panel, t: MonthIndex) -> Result<FactorSnapshot> {
    clairvoyant_snapshot(panel, t, 0, FactorMode::Qfm)
}

/// `ebit(t + h) / EV(t)` using realized future fundamentals.
pub fn clairvoyant_factor(panel: &Panel, t: MonthIndex, horizon: u32) -> Result<FactorSnapshot> {
    clairvoyant_snapshot(panel, t, horizon, FactorMode::Clairvoyant(horizon))
}

fn clairvoyant_snapshot(
    panel: &Panel,
    t: MonthIndex,
    horizon: u32,
    mode: FactorMode,
) -> Result<FactorSnapshot> {
    require_month(panel, t)?;
    let mut snap = FactorSnapshot::new(t, mode);
    for (sid, obs) in panel.cross_section(t) {
        let value = enterprise_value(&obs.market, &obs.fundamentals)
            .ok_or(Exclusion::NonPositiveEnterpriseValue)
            .and_then(|ev| {
                let future = if horizon == 0 {
                    Some(obs)
                } else {
                    panel.get(sid, t.plus(horizon))
                };
                future
                    .map(|o| o.fundamentals[Fundamental::EbitTtm] / ev)
                    .ok_or(Exclusion::MissingFuture)
            });
        snap.record(sid, value);
    }
    Ok(snap)
}

/// `predicted ebit(t + 12) / EV(t)`.
pub fn lfm_factor(panel: &Panel, t: MonthIndex, predictor: &Predictor) -> Result<FactorSnapshot> {
    LfmSource::new(panel, predictor).snapshot(t)
}

/// Reuses one sample builder (and its momentum table) across months.
pub struct LfmSource<'a> {
    builder: SampleBuilder<'a>,
    predictor: &'a Predictor,
}

impl<'a> LfmSource<'a> {
    pub fn new(panel: &'a Panel, predictor: &'a Predictor) -> Self {
        LfmSource {
            builder: SampleBuilder::new(panel),
            predictor,
        }
    }

    pub fn snapshot(&self, t: MonthIndex) -> Result<FactorSnapshot> {
        let panel = self.builder.panel();
        require_month(panel, t)?;
        let samples = self.builder.cross_section(t);
        let predictions = self.predictor.predict(&samples)?;
        let forecasts: BTreeMap<&SecurityId, f64> = predictions
            .iter()
            .map(|p| (&p.sid, p.ebit_forecast_musd))
            .collect();
        let mut snap = FactorSnapshot::new(t, FactorMode::Lfm);
        for (sid, obs) in panel.cross_section(t) {
            let value = enterprise_value(&obs.market, &obs.fundamentals)
                .ok_or(Exclusion::NonPositiveEnterpriseValue)
                .and_then(|ev| {
                    forecasts
                        .get(sid)
                        .map(|f| f / ev)
                        .ok_or(Exclusion::MissingSample)
                });
            snap.record(sid, value);
        }
        Ok(snap)
    }
}

/// Descending by factor, ties by ascending id; at most `n` ids.
pub fn rank_top_n(snapshot: &FactorSnapshot, n: usize) -> Vec<SecurityId> {
    let mut entries: Vec<(&SecurityId, f64)> =
        snapshot.values.iter().map(|(s, v)| (s, *v)).collect();
    entries.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.0.cmp(b.0))
    });
    entries
        .into_iter()
        .take(n)
        .map(|(s, _)| s.clone())
        .collect()
}

/// Rows `t,sid,mode,factor,eligible,reason` for every security considered.
pub fn write_factor_csv<W: Write>(writer: W, snapshots: &[FactorSnapshot]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["t", "sid", "mode", "factor", "eligible", "reason"])?;
    for snap in snapshots {
        let mut rows: BTreeMap<&SecurityId, (String, &str, String)> = BTreeMap::new();
        for (sid, v) in &snap.values {
            rows.insert(sid, (v.to_string(), "1", String::new()));
        }
        for (sid, e) in &snap.exclusions {
            rows.insert(sid, (String::new(), "0", e.to_string()));
        }
        for (sid, (factor, eligible, reason)) in rows {
            w.write_record([
                snap.t.to_string(),
                sid.to_string(),
                snap.mode.to_string(),
                factor,
                eligible.to_string(),
                reason,
            ])?;
        }
    }
    w.flush()
        .map_err(|e| Error::io(Path::new("<factors>"), e))?;
    Ok(())
}
