//! Immutable month-indexed universe of (market row, fundamentals) per security.

use serde::{Deserialize, Serialize};

use crate::calendar::MonthIndex;
use crate::error::{Error, Result};
use crate::types::{FundamentalVector, MarketRow, SecurityId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub market: MarketRow,
    pub fundamentals: FundamentalVector,
}

/// One security's observations, months strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct SecuritySeries {
    months: Vec<MonthIndex>,
    obs: Vec<Observation>,
}

impl SecuritySeries {
    pub fn get(&self, t: MonthIndex) -> Option<&Observation> {
        self.position(t).map(|i| &self.obs[i])
    }

    /// Position of month `t` within this series.
    pub fn position(&self, t: MonthIndex) -> Option<usize> {
        self.months.binary_search(&t).ok()
    }

    pub fn months(&self) -> &[MonthIndex] {
        &self.months
    }

    pub fn observations(&self) -> &[Observation] {
        &self.obs
    }

    pub fn first_month(&self) -> MonthIndex {
        self.months[0]
    }

    pub fn last_month(&self) -> MonthIndex {
        self.months[self.months.len() - 1]
    }

    /// Latest observation strictly before `t`.
    pub fn last_before(&self, t: MonthIndex) -> Option<(MonthIndex, &Observation)> {
        let i = self.months.partition_point(|m| *m < t);
        (i > 0).then(|| (self.months[i - 1], &self.obs[i - 1]))
    }

    pub fn iter(&self) -> impl Iterator<Item = (MonthIndex, &Observation)> {
        self.months.iter().copied().zip(self.obs.iter())
    }
}

/// Securities are stored sorted by id so every iteration order is canonical.
/// Shared immutably across threads after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    ids: Vec<SecurityId>,
    series: Vec<SecuritySeries>,
    start: MonthIndex,
    end: MonthIndex,
}

impl Panel {
    pub fn builder() -> PanelBuilder {
        PanelBuilder::default()
    }

    pub fn start(&self) -> MonthIndex {
        self.start
    }

    pub fn end(&self) -> MonthIndex {
        self.end
    }

    pub fn n_securities(&self) -> usize {
        self.ids.len()
    }

    pub fn n_observations(&self) -> usize {
        self.series.iter().map(|s| s.obs.len()).sum()
    }

    pub fn ids(&self) -> &[SecurityId] {
        &self.ids
    }

    pub fn contains(&self, sid: &SecurityId) -> bool {
        self.index_of(sid).is_some()
    }

    /// Dense position of `sid` in the canonical ordering.
    pub fn index_of(&self, sid: &SecurityId) -> Option<usize> {
        self.ids.binary_search(sid).ok()
    }

    pub fn series(&self, sid: &SecurityId) -> Option<&SecuritySeries> {
        self.index_of(sid).map(|i| &self.series[i])
    }

    pub fn series_at(&self, index: usize) -> &SecuritySeries {
        &self.series[index]
    }

    /// Observation at exactly month `t`. Unknown securities are an error,
    /// a known security without data at `t` is `Ok(None)`.
    pub fn lookup(&self, sid: &SecurityId, t: MonthIndex) -> Result<Option<&Observation>> {
        let series = self
            .series(sid)
            .ok_or_else(|| Error::NotFound(sid.to_string()))?;
        Ok(series.get(t))
    }

    /// Like [`Panel::lookup`] but folds unknown securities into `None`.
    pub fn get(&self, sid: &SecurityId, t: MonthIndex) -> Option<&Observation> {
        self.series(sid).and_then(|s| s.get(t))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&SecurityId, &SecuritySeries)> {
        self.ids.iter().zip(self.series.iter())
    }

    /// All securities with an observation at `t`, in id order.
    pub fn cross_section(
        &self,
        t: MonthIndex,
    ) -> impl Iterator<Item = (&SecurityId, &Observation)> {
        self.iter()
            .filter_map(move |(sid, s)| s.get(t).map(|o| (sid, o)))
    }

    /// A copy holding only months `<= end`. Returns `None` if nothing survives.
    pub fn truncated(&self, end: MonthIndex) -> Option<Panel> {
        let mut builder = Panel::builder();
        for (sid, s) in self.iter() {
            for (m, o) in s.iter().take_while(|(m, _)| *m <= end) {
                builder.push(sid.clone(), m, *o).ok()?;
            }
        }
        builder.build().ok()
    }
}

#[derive(Debug, Default)]
pub struct PanelBuilder {
    entries: std::collections::BTreeMap<SecurityId, SecuritySeries>,
}

impl PanelBuilder {
    /// Appends an observation; months must be strictly increasing per security.
    pub fn push(&mut self, sid: SecurityId, t: MonthIndex, obs: Observation) -> Result<()> {
        obs.market.validate()?;
        FundamentalVector::new(obs.fundamentals.0)?;
        let series = self
            .entries
            .entry(sid.clone())
            .or_insert_with(|| SecuritySeries {
                months: Vec::new(),
                obs: Vec::new(),
            });
        if let Some(last) = series.months.last() {
            if *last >= t {
                return Err(Error::Domain(format!(
                    "{sid}: month {t} not after previous month {last}"
                )));
            }
        }
        series.months.push(t);
        series.obs.push(obs);
        Ok(())
    }

    pub fn build(self) -> Result<Panel> {
        if self.entries.is_empty() {
            return Err(Error::EmptyUniverse("panel has no observations".into()));
        }
        let start = self
            .entries
            .values()
            .map(|s| s.first_month())
            .min()
            .unwrap();
        let end = self.entries.values().map(|s| s.last_month()).max().unwrap();
        let (ids, series) = self.entries.into_iter().unzip();
        Ok(Panel {
            ids,
            series,
            start,
            end,
        })
    }
}
