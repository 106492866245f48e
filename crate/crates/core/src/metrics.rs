//! Performance and forecast-quality statistics: CAR, Sharpe ratio, drawdown,
//! aggregate and monthly MSE, plus JSON/CSV/SVG renderings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backtest::Ledger;
use crate::calendar::MonthIndex;
use crate::error::{Error, Result};
use crate::factor::FactorMode;
use crate::features::TargetVector;
use crate::forecast::unweighted_mse;

/// `(nav_end / nav_start)^(12 / (len − 1)) − 1` for a monthly NAV series.
pub fn compound_annual_return(nav: &[f64]) -> Result<f64> {
    if nav.len() < 2 {
        return Err(Error::Domain("CAR needs at least two NAV points".into()));
    }
    if let Some(bad) = nav.iter().find(|v| v.is_nan() || **v <= 0.0) {
        return Err(Error::Domain(format!(
            "CAR needs positive NAV, found {bad}"
        )));
    }
    let periods = (nav.len() - 1) as f64;
    Ok((nav[nav.len() - 1] / nav[0]).powf(12.0 / periods) - 1.0)
}

/// Simple returns between consecutive NAV points.
pub fn monthly_returns(nav: &[f64]) -> Vec<f64> {
    nav.windows(2).map(|w| w[1] / w[0] - 1.0).collect()
}

/// Annualized `mean(r − rf) / std(r − rf) · √12` with sample standard
/// deviation; `None` for fewer than two returns or zero variance.
pub fn sharpe_ratio(returns: &[f64], risk_free_monthly: f64) -> Option<f64> {
    if returns.len() < 2 {
        return None;
    }
    let n = returns.len() as f64;
    let excess: Vec<f64> = returns.iter().map(|r| r - risk_free_monthly).collect();
    let mean = excess.iter().sum::<f64>() / n;
    let var = excess.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1.0);
    // Treat rounding-level spread around a constant series as zero variance.
    if var <= (mean * mean) * 1e-24 || var == 0.0 {
        return None;
    }
    Some(mean / var.sqrt() * 12f64.sqrt())
}

/// Largest peak-to-trough decline as a positive fraction.
pub fn max_drawdown(nav: &[f64]) -> f64 {
    let mut peak = f64::NEG_INFINITY;
    let mut worst: f64 = 0.0;
    for &v in nav {
        peak = peak.max(v);
        if peak > 0.0 {
            worst = worst.max(1.0 - v / peak);
        }
    }
    worst
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonthlyMse {
    pub month: MonthIndex,
    pub mse: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseSeries {
    pub overall: f64,
    pub n: usize,
    pub monthly: Vec<MonthlyMse>,
}

/// Unweighted MSE over all sixteen targets, overall and grouped by month.
pub fn mse_series(
    months: &[MonthIndex],
    predictions: &[TargetVector],
    targets: &[TargetVector],
) -> Result<MseSeries> {
    if months.len() != predictions.len() || months.len() != targets.len() {
        return Err(Error::Contract(format!(
            "misaligned MSE inputs: {} months, {} predictions, {} targets",
            months.len(),
            predictions.len(),
            targets.len()
        )));
    }
    if months.is_empty() {
        return Err(Error::Domain("MSE of an empty set".into()));
    }
    let mut by_month: BTreeMap<MonthIndex, (f64, usize)> = BTreeMap::new();
    let mut total = 0.0;
    for ((m, p), y) in months.iter().zip(predictions).zip(targets) {
        let e = unweighted_mse(p, y);
        total += e;
        let entry = by_month.entry(*m).or_insert((0.0, 0));
        entry.0 += e;
        entry.1 += 1;
    }
    Ok(MseSeries {
        overall: total / months.len() as f64,
        n: months.len(),
        monthly: by_month
            .into_iter()
            .map(|(month, (sum, n))| MonthlyMse {
                month,
                mse: sum / n as f64,
                n,
            })
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavPoint {
    pub month: MonthIndex,
    pub nav: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceReport {
    pub mode: FactorMode,
    pub start: MonthIndex,
    pub end: MonthIndex,
    pub initial_nav: f64,
    pub final_nav: f64,
    pub car: f64,
    /// Absent when returns have zero variance.
    pub sharpe: Option<f64>,
    pub risk_free_monthly: f64,
    pub max_drawdown: f64,
    pub monthly_returns: Vec<f64>,
    pub nav: Vec<NavPoint>,
    pub n_trades: usize,
    pub skipped_months: usize,
    pub mse_model: Option<MseSeries>,
    pub mse_naive: Option<MseSeries>,
}

impl PerformanceReport {
    pub fn from_ledger(mode: FactorMode, ledger: &Ledger, risk_free_monthly: f64) -> Result<Self> {
        let (start, end) = match (ledger.months.first(), ledger.months.last()) {
            (Some(a), Some(b)) => (a.month, b.month),
            _ => return Err(Error::Domain("ledger has no months".into())),
        };
        let series = ledger.nav_series();
        let returns = monthly_returns(&series);
        Ok(PerformanceReport {
            mode,
            start,
            end,
            initial_nav: ledger.initial_cash,
            final_nav: ledger.final_nav(),
            car: compound_annual_return(&series)?,
            sharpe: sharpe_ratio(&returns, risk_free_monthly),
            risk_free_monthly,
            max_drawdown: max_drawdown(&series),
            monthly_returns: returns,
            nav: ledger
                .months
                .iter()
                .map(|m| NavPoint {
                    month: m.month,
                    nav: m.nav,
                })
                .collect(),
            n_trades: ledger.trades.len(),
            skipped_months: ledger.months.iter().filter(|m| m.skipped).count(),
            mse_model: None,
            mse_naive: None,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// `month,mse_model,mse_naive,n`; a missing series leaves its column empty.
pub fn write_mse_monthly_csv<W: Write>(
    writer: W,
    model: Option<&MseSeries>,
    naive: Option<&MseSeries>,
) -> Result<()> {
    let mut rows: BTreeMap<MonthIndex, (Option<f64>, Option<f64>, usize)> = BTreeMap::new();
    for m in model.iter().flat_map(|s| &s.monthly) {
        let r = rows.entry(m.month).or_default();
        r.0 = Some(m.mse);
        r.2 = m.n;
    }
    for m in naive.iter().flat_map(|s| &s.monthly) {
        let r = rows.entry(m.month).or_default();
        r.1 = Some(m.mse);
        r.2 = r.2.max(m.n);
    }
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["month", "mse_model", "mse_naive", "n"])?;
    for (month, (a, b, n)) in rows {
        w.write_record([month.to_string(), cell(a), cell(b), n.to_string()])?;
    }
    w.flush()
        .map_err(|e| Error::io(Path::new("<mse_monthly>"), e))
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#ff7f0e", "#000000", "#2ca02c", "#d62728", "#9467bd",
];

/// Minimal self-contained SVG line chart. Every series shares the x axis
/// (`x_labels`, one per point); non-finite points break the line.
pub fn line_chart_svg(title: &str, x_labels: &[String], series: &[(&str, &[f64])]) -> String {
    let (w, h) = (800.0, 400.0);
    let (left, right, top, bottom) = (70.0, 20.0, 40.0, 50.0);
    let finite = series
        .iter()
        .flat_map(|(_, s)| s.iter().copied())
        .filter(|v| v.is_finite());
    let (mut lo, mut hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
        (a.min(v), b.max(v))
    });
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo, hi) = (lo - 0.5, hi + 0.5);
    }
    let n = series
        .iter()
        .map(|(_, s)| s.len())
        .max()
        .unwrap_or(0)
        .max(2);
    let x = |i: usize| left + (w - left - right) * i as f64 / (n - 1) as f64;
    let y = |v: f64| top + (h - top - bottom) * (1.0 - (v - lo) / (hi - lo));

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r##"<g stroke="#888" fill="none"><line x1="{left}" y1="{top}" x2="{left}" y2="{b}"/><line x1="{left}" y1="{b}" x2="{r}" y2="{b}"/></g>"##,
        b = h - bottom,
        r = w - right
    );
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#,
            left - 6.0,
            y(v) + 4.0,
            format_tick(v)
        );
    }
    if let (Some(first), Some(last)) = (x_labels.first(), x_labels.last()) {
        let _ = writeln!(
            svg,
            r#"<text x="{left}" y="{}">{}</text>"#,
            h - bottom + 18.0,
            escape(first)
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            w - right,
            h - bottom + 18.0,
            escape(last)
        );
    }
    for (k, (name, values)) in series.iter().enumerate() {
        let colour = PALETTE[k % PALETTE.len()];
        let mut d = String::new();
        let mut pen_down = false;
        for (i, v) in values.iter().enumerate() {
            if v.is_finite() {
                let _ = write!(
                    d,
                    "{}{:.2},{:.2} ",
                    if pen_down { "L" } else { "M" },
                    x(i),
                    y(*v)
                );
                pen_down = true;
            } else {
                pen_down = false;
            }
        }
        let _ = writeln!(
            svg,
            r#"<path d="{}" fill="none" stroke="{colour}" stroke-width="1.5"/>"#,
            d.trim_end()
        );
        let ly = top + 16.0 * k as f64;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{ly}" fill="{colour}">{}</text>"#,
            left + 10.0,
            escape(name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn format_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}
