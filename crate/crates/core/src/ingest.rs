//! CSV ingestion, forward fill, universe filtering and panel assembly.
//!
//! Three files make up a data directory:
//!
//! * `fundamentals.csv`: `sid,year,month` then the sixteen canonical line
//!   items. An empty cell means the item was not reported that month.
//! * `market.csv`: `sid,year,month,close_price,exec_price,shares_outstanding,
//!   market_cap,month_share_volume,dividend_per_share,is_us,is_financial`.
//! * `cpi.csv`: `year,month,cpi`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calendar::MonthIndex;
use crate::error::{Error, Result};
use crate::panel::{Observation, Panel};
use crate::types::{Fundamental, FundamentalVector, MarketRow, SecurityId, N_FUNDAMENTALS};

pub const FUNDAMENTALS_FILE: &str = "fundamentals.csv";
pub const MARKET_FILE: &str = "market.csv";
pub const CPI_FILE: &str = "cpi.csv";

pub const MARKET_COLUMNS: [&str; 11] = [
    "sid",
    "year",
    "month",
    "close_price",
    "exec_price",
    "shares_outstanding",
    "market_cap",
    "month_share_volume",
    "dividend_per_share",
    "is_us",
    "is_financial",
];

pub const CPI_COLUMNS: [&str; 3] = ["year", "month", "cpi"];

pub fn fundamentals_columns() -> Vec<&'static str> {
    let mut cols = vec!["sid", "year", "month"];
    cols.extend(Fundamental::ALL.iter().map(|f| f.name()));
    cols
}

/// One row of `fundamentals.csv`; `None` marks an unreported item.
#[derive(Debug, Clone, PartialEq)]
pub struct FundamentalRecord {
    pub sid: SecurityId,
    pub month: MonthIndex,
    pub values: [Option<f64>; N_FUNDAMENTALS],
}

impl FundamentalRecord {
    pub fn is_complete(&self) -> bool {
        self.values.iter().all(Option::is_some)
    }

    pub fn complete(&self) -> Option<FundamentalVector> {
        let mut out = [0.0; N_FUNDAMENTALS];
        for (dst, v) in out.iter_mut().zip(self.values.iter()) {
            *dst = (*v)?;
        }
        Some(FundamentalVector(out))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarketRecord {
    pub sid: SecurityId,
    pub month: MonthIndex,
    pub row: MarketRow,
}

/// Month-indexed consumer price index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CpiSeries(BTreeMap<MonthIndex, f64>);

impl CpiSeries {
    pub fn new(values: BTreeMap<MonthIndex, f64>) -> Result<Self> {
        if let Some((m, v)) = values.iter().find(|(_, v)| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::Config(format!(
                "CPI at {m} must be positive, got {v}"
            )));
        }
        Ok(CpiSeries(values))
    }

    /// Constant index over `[start, end]`.
    pub fn flat(start: MonthIndex, end: MonthIndex, level: f64) -> Self {
        CpiSeries(start.through(end).map(|m| (m, level)).collect())
    }

    pub fn get(&self, t: MonthIndex) -> Option<f64> {
        self.0.get(&t).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (MonthIndex, f64)> + '_ {
        self.0.iter().map(|(m, v)| (*m, *v))
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UniverseConfig {
    pub min_market_cap_musd: f64,
    pub min_consecutive_months: usize,
    pub exclude_financials: bool,
    pub exclude_non_us: bool,
    /// Month whose price level market caps are deflated to.
    pub cpi_reference: MonthIndex,
    /// Loaded from `cpi.csv`, never from the config file.
    #[serde(skip)]
    pub cpi: CpiSeries,
}

impl Default for UniverseConfig {
    fn default() -> Self {
        UniverseConfig {
            min_market_cap_musd: 100.0,
            min_consecutive_months: 12,
            exclude_financials: true,
            exclude_non_us: true,
            cpi_reference: MonthIndex::new(480),
            cpi: CpiSeries::default(),
        }
    }
}

impl UniverseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_market_cap_musd.is_finite() && self.min_market_cap_musd > 0.0) {
            return Err(Error::Config("min_market_cap_musd must be positive".into()));
        }
        if self.min_consecutive_months == 0 {
            return Err(Error::Config(
                "min_consecutive_months must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

fn parse_error(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Maps each expected column to its position, rejecting missing, unknown and
/// repeated headers.
fn header_positions(
    headers: &csv::StringRecord,
    expected: &[&str],
    path: &Path,
) -> Result<Vec<usize>> {
    let mut seen = HashMap::new();
    for (i, h) in headers.iter().enumerate() {
        let h = h.trim();
        if !expected.contains(&h) {
            return Err(parse_error(path, 1, format!("unknown column `{h}`")));
        }
        if seen.insert(h.to_string(), i).is_some() {
            return Err(parse_error(path, 1, format!("duplicate column `{h}`")));
        }
    }
    expected
        .iter()
        .map(|c| {
            seen.get(*c)
                .copied()
                .ok_or_else(|| parse_error(path, 1, format!("missing column `{c}`")))
        })
        .collect()
}

struct RowCtx<'a> {
    path: &'a Path,
    line: u64,
    record: &'a csv::StringRecord,
}

impl RowCtx<'_> {
    fn cell(&self, pos: usize) -> &str {
        self.record.get(pos).unwrap_or("").trim()
    }

    fn number(&self, pos: usize, name: &str) -> Result<f64> {
        let cell = self.cell(pos);
        if cell.is_empty() {
            return Err(parse_error(self.path, self.line, format!("empty `{name}`")));
        }
        self.parse_f64(cell, name)
    }

    fn optional_number(&self, pos: usize, name: &str) -> Result<Option<f64>> {
        let cell = self.cell(pos);
        if cell.is_empty() {
            Ok(None)
        } else {
            self.parse_f64(cell, name).map(Some)
        }
    }

    fn parse_f64(&self, cell: &str, name: &str) -> Result<f64> {
        match cell.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(parse_error(
                self.path,
                self.line,
                format!("non-numeric `{name}` value `{cell}`"),
            )),
        }
    }

    fn flag(&self, pos: usize, name: &str) -> Result<bool> {
        match self.cell(pos) {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(parse_error(
                self.path,
                self.line,
                format!("`{name}` must be 0 or 1, got `{other}`"),
            )),
        }
    }

    fn month(&self, year_pos: usize, month_pos: usize) -> Result<MonthIndex> {
        let year: i32 = self
            .cell(year_pos)
            .parse()
            .map_err(|_| parse_error(self.path, self.line, "non-numeric `year`"))?;
        let month: u32 = self
            .cell(month_pos)
            .parse()
            .map_err(|_| parse_error(self.path, self.line, "non-numeric `month`"))?;
        MonthIndex::from_ymd(year, month)
            .map_err(|e| parse_error(self.path, self.line, e.to_string()))
    }

    fn sid(&self, pos: usize) -> Result<SecurityId> {
        SecurityId::new(self.cell(pos))
            .map_err(|e| parse_error(self.path, self.line, e.to_string()))
    }
}

fn csv_reader<R: Read>(reader: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::None)
        .from_reader(reader)
}

fn open(path: &Path) -> Result<std::fs::File> {
    std::fs::File::open(path).map_err(|e| Error::io(path, e))
}

pub fn parse_fundamentals_csv(path: &Path) -> Result<Vec<FundamentalRecord>> {
    parse_fundamentals_reader(open(path)?, path)
}

/// `label` names the source in error messages.
pub fn parse_fundamentals_reader<R: Read>(
    reader: R,
    label: &Path,
) -> Result<Vec<FundamentalRecord>> {
    let mut rdr = csv_reader(reader);
    let cols = fundamentals_columns();
    let pos = header_positions(rdr.headers()?, &cols, label)?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let record = rec?;
        let line = record.position().map_or(0, |p| p.line());
        let ctx = RowCtx {
            path: label,
            line,
            record: &record,
        };
        let sid = ctx.sid(pos[0])?;
        let month = ctx.month(pos[1], pos[2])?;
        if !seen.insert((sid.clone(), month)) {
            return Err(parse_error(
                label,
                line,
                format!("duplicate ({sid}, {month})"),
            ));
        }
        let mut values = [None; N_FUNDAMENTALS];
        for (k, f) in Fundamental::ALL.iter().enumerate() {
            values[k] = ctx.optional_number(pos[3 + k], f.name())?;
        }
        out.push(FundamentalRecord { sid, month, values });
    }
    Ok(out)
}

pub fn parse_market_csv(path: &Path) -> Result<Vec<MarketRecord>> {
    parse_market_reader(open(path)?, path)
}

pub fn parse_market_reader<R: Read>(reader: R, label: &Path) -> Result<Vec<MarketRecord>> {
    let mut rdr = csv_reader(reader);
    let pos = header_positions(rdr.headers()?, &MARKET_COLUMNS, label)?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let record = rec?;
        let line = record.position().map_or(0, |p| p.line());
        let ctx = RowCtx {
            path: label,
            line,
            record: &record,
        };
        let sid = ctx.sid(pos[0])?;
        let month = ctx.month(pos[1], pos[2])?;
        if !seen.insert((sid.clone(), month)) {
            return Err(parse_error(
                label,
                line,
                format!("duplicate ({sid}, {month})"),
            ));
        }
        let row = MarketRow {
            close_price: ctx.number(pos[3], MARKET_COLUMNS[3])?,
            exec_price: ctx.number(pos[4], MARKET_COLUMNS[4])?,
            shares_outstanding: ctx.number(pos[5], MARKET_COLUMNS[5])?,
            market_cap: ctx.number(pos[6], MARKET_COLUMNS[6])?,
            month_share_volume: ctx.number(pos[7], MARKET_COLUMNS[7])?,
            dividend_per_share: ctx.number(pos[8], MARKET_COLUMNS[8])?,
            is_us: ctx.flag(pos[9], MARKET_COLUMNS[9])?,
            is_financial_sector: ctx.flag(pos[10], MARKET_COLUMNS[10])?,
        };
        row.validate()
            .map_err(|e| parse_error(label, line, e.to_string()))?;
        out.push(MarketRecord { sid, month, row });
    }
    Ok(out)
}

pub fn parse_cpi_csv(path: &Path) -> Result<CpiSeries> {
    parse_cpi_reader(open(path)?, path)
}

pub fn parse_cpi_reader<R: Read>(reader: R, label: &Path) -> Result<CpiSeries> {
    let mut rdr = csv_reader(reader);
    let pos = header_positions(rdr.headers()?, &CPI_COLUMNS, label)?;
    let mut values = BTreeMap::new();
    for rec in rdr.records() {
        let record = rec?;
        let line = record.position().map_or(0, |p| p.line());
        let ctx = RowCtx {
            path: label,
            line,
            record: &record,
        };
        let month = ctx.month(pos[0], pos[1])?;
        let cpi = ctx.number(pos[2], "cpi")?;
        if values.insert(month, cpi).is_some() {
            return Err(parse_error(label, line, format!("duplicate month {month}")));
        }
    }
    CpiSeries::new(values).map_err(|e| parse_error(label, 0, e.to_string()))
}

fn sorted_by_security(mut records: Vec<FundamentalRecord>) -> Vec<FundamentalRecord> {
    records.sort_by(|a, b| a.sid.cmp(&b.sid).then(a.month.cmp(&b.month)));
    records
}

/// Fills each missing item with the latest earlier value of the same item
/// for the same security. Items never observed so far stay missing.
pub fn forward_fill_partial(records: Vec<FundamentalRecord>) -> Vec<FundamentalRecord> {
    let mut records = sorted_by_security(records);
    let mut last: [Option<f64>; N_FUNDAMENTALS] = [None; N_FUNDAMENTALS];
    let mut current: Option<SecurityId> = None;
    for rec in &mut records {
        if current.as_ref() != Some(&rec.sid) {
            last = [None; N_FUNDAMENTALS];
            current = Some(rec.sid.clone());
        }
        for (v, prev) in rec.values.iter_mut().zip(last.iter_mut()) {
            match v {
                Some(x) => *prev = Some(*x),
                None => *v = *prev,
            }
        }
    }
    records
}

/// A fully populated fundamentals observation.
#[derive(Debug, Clone, PartialEq)]
pub struct CompleteFundamentals {
    pub sid: SecurityId,
    pub month: MonthIndex,
    pub values: FundamentalVector,
}

/// Forward fill, then drop months that are still incomplete.
pub fn forward_fill(records: Vec<FundamentalRecord>) -> Vec<CompleteFundamentals> {
    forward_fill_partial(records)
        .into_iter()
        .filter_map(|r| {
            r.complete().map(|values| CompleteFundamentals {
                sid: r.sid,
                month: r.month,
                values,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionCounts {
    pub non_us: usize,
    pub financial: usize,
    pub below_min_market_cap: usize,
    /// Qualifying months that sat in a run shorter than the minimum.
    pub short_run: usize,
    /// Securities with no surviving month.
    pub securities_dropped: usize,
}

#[derive(Debug, Clone)]
pub struct FilterOutcome {
    pub kept: Vec<MarketRecord>,
    pub excluded: ExclusionCounts,
}

/// Keeps a security-month iff it is US (when required), not financial (when
/// required), and its CPI-deflated market cap reaches the threshold; then
/// drops qualifying months that do not belong to a run of at least
/// `min_consecutive_months` consecutive qualifying months. Securities may
/// re-enter after a gap.
pub fn apply_universe_filter(
    rows: Vec<MarketRecord>,
    cfg: &UniverseConfig,
) -> Result<FilterOutcome> {
    cfg.validate()?;
    let cpi_ref = cfg.cpi.get(cfg.cpi_reference).ok_or_else(|| {
        Error::Config(format!(
            "CPI missing for reference month {}",
            cfg.cpi_reference
        ))
    })?;

    let mut rows = rows;
    rows.sort_by(|a, b| a.sid.cmp(&b.sid).then(a.month.cmp(&b.month)));

    let mut excluded = ExclusionCounts::default();
    let mut qualifies = Vec::with_capacity(rows.len());
    for r in &rows {
        let ok = if cfg.exclude_non_us && !r.row.is_us {
            excluded.non_us += 1;
            false
        } else if cfg.exclude_financials && r.row.is_financial_sector {
            excluded.financial += 1;
            false
        } else {
            let cpi = cfg
                .cpi
                .get(r.month)
                .ok_or_else(|| Error::Config(format!("CPI missing for {}", r.month)))?;
            let real_cap = r.row.market_cap * (cpi_ref / cpi);
            if real_cap >= cfg.min_market_cap_musd {
                true
            } else {
                excluded.below_min_market_cap += 1;
                false
            }
        };
        qualifies.push(ok);
    }

    // Mark runs of consecutive qualifying months within each security.
    let mut keep = vec![false; rows.len()];
    let mut i = 0;
    while i < rows.len() {
        if !qualifies[i] {
            i += 1;
            continue;
        }
        let mut j = i + 1;
        while j < rows.len()
            && qualifies[j]
            && rows[j].sid == rows[j - 1].sid
            && rows[j].month.months_since(rows[j - 1].month) == 1
        {
            j += 1;
        }
        if j - i >= cfg.min_consecutive_months {
            keep[i..j].iter_mut().for_each(|k| *k = true);
        } else {
            excluded.short_run += j - i;
        }
        i = j;
    }

    let all_sids: HashSet<&SecurityId> = rows.iter().map(|r| &r.sid).collect();
    let kept_sids: HashSet<&SecurityId> = rows
        .iter()
        .zip(&keep)
        .filter(|(_, k)| **k)
        .map(|(r, _)| &r.sid)
        .collect();
    excluded.securities_dropped = all_sids.len() - kept_sids.len();

    let kept = rows
        .into_iter()
        .zip(keep)
        .filter_map(|(r, k)| k.then_some(r))
        .collect();
    Ok(FilterOutcome { kept, excluded })
}

/// Joins complete fundamentals with filtered market rows; only months with
/// both make it into the panel.
pub fn build_panel(
    fundamentals: &[CompleteFundamentals],
    market: &[MarketRecord],
) -> Result<Panel> {
    let by_key: HashMap<(&SecurityId, MonthIndex), &FundamentalVector> = fundamentals
        .iter()
        .map(|f| ((&f.sid, f.month), &f.values))
        .collect();
    let mut rows: Vec<&MarketRecord> = market.iter().collect();
    rows.sort_by(|a, b| a.sid.cmp(&b.sid).then(a.month.cmp(&b.month)));

    let mut builder = Panel::builder();
    let mut n = 0usize;
    for r in rows {
        if let Some(f) = by_key.get(&(&r.sid, r.month)) {
            builder.push(
                r.sid.clone(),
                r.month,
                Observation {
                    market: r.row,
                    fundamentals: **f,
                },
            )?;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyUniverse(
            "no security-month has both market data and complete fundamentals".into(),
        ));
    }
    builder.build()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IngestSummary {
    pub fundamental_records: usize,
    pub market_records: usize,
    pub incomplete_fundamental_months: usize,
    pub excluded: ExclusionCounts,
    pub panel_securities: usize,
    pub panel_observations: usize,
    pub start: MonthIndex,
    pub end: MonthIndex,
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub panel: Panel,
    pub summary: IngestSummary,
}

/// Parse, forward fill, filter, and assemble a panel from a data directory.
/// `cfg.cpi` is replaced with the directory's `cpi.csv`.
pub fn ingest_dir(dir: &Path, cfg: &UniverseConfig) -> Result<Ingested> {
    let fundamentals = parse_fundamentals_csv(&dir.join(FUNDAMENTALS_FILE))?;
    let market = parse_market_csv(&dir.join(MARKET_FILE))?;
    let cpi = parse_cpi_csv(&dir.join(CPI_FILE))?;
    let cfg = UniverseConfig { cpi, ..cfg.clone() };
    ingest_records(fundamentals, market, &cfg)
}

pub fn ingest_records(
    fundamentals: Vec<FundamentalRecord>,
    market: Vec<MarketRecord>,
    cfg: &UniverseConfig,
) -> Result<Ingested> {
    let n_fund = fundamentals.len();
    let n_market = market.len();
    let filled = forward_fill(fundamentals);
    let filtered = apply_universe_filter(market, cfg)?;
    let panel = build_panel(&filled, &filtered.kept)?;
    let summary = IngestSummary {
        fundamental_records: n_fund,
        market_records: n_market,
        incomplete_fundamental_months: n_fund - filled.len(),
        excluded: filtered.excluded,
        panel_securities: panel.n_securities(),
        panel_observations: panel.n_observations(),
        start: panel.start(),
        end: panel.end(),
    };
    Ok(Ingested { panel, summary })
}

fn create(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_fundamentals_csv(path: &Path, records: &[FundamentalRecord]) -> Result<()> {
    write_fundamentals(create(path)?, records)
}

pub fn write_fundamentals<W: Write>(
    mut w: csv::Writer<W>,
    records: &[FundamentalRecord],
) -> Result<()> {
    w.write_record(fundamentals_columns())?;
    for r in records {
        let mut row = vec![
            r.sid.to_string(),
            r.month.year().to_string(),
            r.month.month().to_string(),
        ];
        row.extend(r.values.iter().map(|v| fmt_opt(*v)));
        w.write_record(&row)?;
    }
    w.flush()
        .map_err(|e| Error::io(PathBuf::from("<fundamentals>"), e))?;
    Ok(())
}

pub fn write_market_csv(path: &Path, records: &[MarketRecord]) -> Result<()> {
    let mut w = create(path)?;
    w.write_record(MARKET_COLUMNS)?;
    for r in records {
        let m = &r.row;
        w.write_record([
            r.sid.to_string(),
            r.month.year().to_string(),
            r.month.month().to_string(),
            m.close_price.to_string(),
            m.exec_price.to_string(),
            m.shares_outstanding.to_string(),
            m.market_cap.to_string(),
            m.month_share_volume.to_string(),
            m.dividend_per_share.to_string(),
            u8::from(m.is_us).to_string(),
            u8::from(m.is_financial_sector).to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn write_cpi_csv(path: &Path, cpi: &CpiSeries) -> Result<()> {
    let mut w = create(path)?;
    w.write_record(CPI_COLUMNS)?;
    for (m, v) in cpi.iter() {
        w.write_record([m.year().to_string(), m.month().to_string(), v.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
