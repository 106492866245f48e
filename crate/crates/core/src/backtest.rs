//! Monthly portfolio simulator: top-n equal-capital buys, minimum holding
//! period, volume participation cap, per-share fees, quadratic slippage and
//! dividend crediting.
//!
//! Cash and NAV are in millions USD; prices, fees and per-share amounts are
//! in USD.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::path::Path;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::calendar::MonthIndex;
use crate::error::{Error, Result};
use crate::factor::{
    clairvoyant_factor, qfm_factor, rank_top_n, FactorMode, FactorSnapshot, LfmSource,
};
use crate::forecast::Predictor;
use crate::panel::Panel;
use crate::types::{MarketRow, SecurityId};

pub const USD_PER_MUSD: f64 = 1e6;

/// Relative slack when checking a participation against the cap.
const CAP_TOLERANCE: f64 = 1e-12;
const SIZING_ITERATIONS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BacktestConfig {
    pub top_n: usize,
    pub hold_months: u32,
    /// Millions USD.
    pub initial_cash: f64,
    /// Fraction of the month's share volume one order may fill.
    pub max_participation: f64,
    /// USD per share traded.
    pub per_share_cost: f64,
    /// Slippage fraction at full participation.
    pub slippage_at_max: f64,
    pub start: MonthIndex,
    pub end: MonthIndex,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        BacktestConfig {
            top_n: 50,
            hold_months: 12,
            initial_cash: 100.0,
            max_participation: 0.10,
            per_share_cost: 0.01,
            slippage_at_max: 0.01,
            start: MonthIndex::new(360),
            end: MonthIndex::new(563),
        }
    }
}

impl BacktestConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.top_n > 0, "top_n must be positive"),
            (self.hold_months > 0, "hold_months must be positive"),
            (
                self.initial_cash > 0.0 && self.initial_cash.is_finite(),
                "initial_cash must be positive",
            ),
            (
                self.max_participation > 0.0 && self.max_participation <= 1.0,
                "max_participation must be in (0, 1]",
            ),
            (
                self.per_share_cost >= 0.0,
                "per_share_cost must be non-negative",
            ),
            (
                (0.0..1.0).contains(&self.slippage_at_max),
                "slippage_at_max must be in [0, 1)",
            ),
            (self.start < self.end, "start must precede end"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::Config((*msg).into())),
            None => Ok(()),
        }
    }
}

/// `slippage_at_max · (participation / max_participation)²`.
pub fn slippage_fraction(participation: f64, cfg: &BacktestConfig) -> Result<f64> {
    if participation.is_nan()
        || participation < 0.0
        || participation > cfg.max_participation * (1.0 + CAP_TOLERANCE)
    {
        return Err(Error::Contract(format!(
            "participation {participation} outside [0, {}]",
            cfg.max_participation
        )));
    }
    let ratio = participation / cfg.max_participation;
    Ok(cfg.slippage_at_max * ratio * ratio)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Buy,
    Sell,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Buy => "buy",
            Side::Sell => "sell",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fill {
    pub shares: f64,
    /// USD per share including slippage.
    pub price: f64,
    /// USD.
    pub fee: f64,
    /// Signed cash change in millions USD.
    pub cash_delta: f64,
}

impl Fill {
    fn gross_musd(&self) -> f64 {
        self.shares * self.price / USD_PER_MUSD
    }
}

/// Fills up to the participation cap at `exec_price` adjusted by slippage.
pub fn execute_order(
    side: Side,
    sid: &SecurityId,
    desired_shares: f64,
    row: &MarketRow,
    cfg: &BacktestConfig,
) -> Result<Fill> {
    if desired_shares.is_nan() || desired_shares < 0.0 {
        return Err(Error::Contract(format!(
            "{sid}: desired shares {desired_shares} is negative"
        )));
    }
    let cap = cfg.max_participation * row.month_share_volume;
    if cap <= 0.0 && desired_shares > 0.0 {
        warn!("{sid}: zero share volume, {side} order not filled");
    }
    let shares = desired_shares.min(cap);
    let participation = if row.month_share_volume > 0.0 {
        (shares / row.month_share_volume).min(cfg.max_participation)
    } else {
        0.0
    };
    let s = slippage_fraction(participation, cfg)?;
    Ok(priced_fill(side, shares, row.exec_price, s, cfg))
}

fn priced_fill(
    side: Side,
    shares: f64,
    exec_price: f64,
    slippage: f64,
    cfg: &BacktestConfig,
) -> Fill {
    let (price, sign) = match side {
        Side::Buy => (exec_price * (1.0 + slippage), -1.0),
        Side::Sell => (exec_price * (1.0 - slippage), 1.0),
    };
    let fee = cfg.per_share_cost * shares;
    let gross = shares * price;
    let cash_delta = match side {
        Side::Buy => sign * (gross + fee) / USD_PER_MUSD,
        Side::Sell => sign * (gross - fee) / USD_PER_MUSD,
    };
    Fill {
        shares,
        price,
        fee,
        cash_delta,
    }
}

/// Largest share count whose all-in buy cost fits within `budget` (millions
/// USD), capped at the participation limit.
pub fn shares_for_budget(budget: f64, row: &MarketRow, cfg: &BacktestConfig) -> f64 {
    let cap = cfg.max_participation * row.month_share_volume;
    let budget_usd = budget * USD_PER_MUSD;
    if budget_usd <= 0.0 || cap <= 0.0 || row.exec_price <= 0.0 {
        return 0.0;
    }
    let cost = |q: f64| {
        let ratio = q / cap;
        q * row.exec_price * (1.0 + cfg.slippage_at_max * ratio * ratio) + cfg.per_share_cost * q
    };
    if cost(cap) <= budget_usd {
        return cap;
    }
    if cfg.slippage_at_max == 0.0 {
        let q = budget_usd / (row.exec_price + cfg.per_share_cost);
        return if cost(q) <= budget_usd {
            q
        } else {
            q * (1.0 - f64::EPSILON)
        };
    }
    let (mut lo, mut hi) = (0.0, cap);
    for _ in 0..SIZING_ITERATIONS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if cost(mid) <= budget_usd {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub sid: SecurityId,
    pub shares: f64,
    pub acquired: MonthIndex,
}

impl Position {
    pub fn age(&self, t: MonthIndex) -> i64 {
        t.months_since(self.acquired)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PortfolioState {
    /// Millions USD.
    pub cash: f64,
    pub positions: BTreeMap<SecurityId, Position>,
}

impl PortfolioState {
    pub fn new(cash: f64) -> Self {
        PortfolioState {
            cash,
            positions: BTreeMap::new(),
        }
    }

    /// Mark-to-market value of all positions at `t` in millions USD.
    pub fn positions_value(&self, panel: &Panel, t: MonthIndex) -> f64 {
        self.positions
            .values()
            .map(|p| {
                panel
                    .get(&p.sid, t)
                    .map(|o| p.shares * o.market.close_price / USD_PER_MUSD)
                    .unwrap_or(0.0)
            })
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trade {
    pub month: MonthIndex,
    pub sid: SecurityId,
    pub side: Side,
    pub shares: f64,
    /// USD per share including slippage.
    pub price: f64,
    /// USD.
    pub fee: f64,
    /// Liquidation of a security that left the panel; not volume capped.
    pub forced: bool,
}

/// One month of accounting, all amounts in millions USD.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonthRecord {
    pub month: MonthIndex,
    pub cash_start: f64,
    pub dividends: f64,
    /// Gross purchase value excluding fees.
    pub buy_outflow: f64,
    /// Gross sale value before fees.
    pub sell_inflow: f64,
    pub fees: f64,
    pub cash_end: f64,
    pub positions_value: f64,
    pub nav: f64,
    pub n_positions: usize,
    /// No eligible securities this month, so no discretionary trades.
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Ledger {
    pub initial_cash: f64,
    pub months: Vec<MonthRecord>,
    pub trades: Vec<Trade>,
}

impl Ledger {
    pub fn new(initial_cash: f64) -> Self {
        Ledger {
            initial_cash,
            ..Ledger::default()
        }
    }

    /// Initial cash followed by the NAV at the end of every month.
    pub fn nav_series(&self) -> Vec<f64> {
        std::iter::once(self.initial_cash)
            .chain(self.months.iter().map(|m| m.nav))
            .collect()
    }

    pub fn final_nav(&self) -> f64 {
        self.months.last().map_or(self.initial_cash, |m| m.nav)
    }
}

struct MonthFlows {
    record: MonthRecord,
}

impl MonthFlows {
    fn new(month: MonthIndex, cash_start: f64, skipped: bool) -> Self {
        MonthFlows {
            record: MonthRecord {
                month,
                cash_start,
                dividends: 0.0,
                buy_outflow: 0.0,
                sell_inflow: 0.0,
                fees: 0.0,
                cash_end: cash_start,
                positions_value: 0.0,
                nav: 0.0,
                n_positions: 0,
                skipped,
            },
        }
    }

    fn apply(
        &mut self,
        state: &mut PortfolioState,
        ledger: &mut Ledger,
        sid: &SecurityId,
        side: Side,
        fill: Fill,
        forced: bool,
    ) {
        if fill.shares <= 0.0 {
            return;
        }
        state.cash += fill.cash_delta;
        self.record.fees += fill.fee / USD_PER_MUSD;
        match side {
            Side::Buy => self.record.buy_outflow += fill.gross_musd(),
            Side::Sell => self.record.sell_inflow += fill.gross_musd(),
        }
        ledger.trades.push(Trade {
            month: self.record.month,
            sid: sid.clone(),
            side,
            shares: fill.shares,
            price: fill.price,
            fee: fill.fee,
            forced,
        });
    }
}

/// One month of trading at `snapshot.t`:
/// dividends are credited, positions that left the panel are liquidated at
/// their last exec price with full slippage, aged positions outside the
/// current top-n are sold, then free cash is split equally over open slots
/// in rank order. Sales always precede purchases.
pub fn rebalance_month(
    state: &mut PortfolioState,
    panel: &Panel,
    snapshot: &FactorSnapshot,
    cfg: &BacktestConfig,
    ledger: &mut Ledger,
) -> Result<()> {
    let t = snapshot.t;
    let skipped = snapshot.is_empty();
    if skipped {
        warn!("{t}: no eligible securities, trading skipped");
    }
    let mut flows = MonthFlows::new(t, state.cash, skipped);

    for p in state.positions.values() {
        if let Some(obs) = panel.get(&p.sid, t) {
            let d = p.shares * obs.market.dividend_per_share / USD_PER_MUSD;
            flows.record.dividends += d;
        }
    }
    state.cash += flows.record.dividends;

    let delisted: Vec<SecurityId> = state
        .positions
        .keys()
        .filter(|sid| panel.get(sid, t).is_none())
        .cloned()
        .collect();
    for sid in delisted {
        let pos = state.positions.remove(&sid).expect("listed above");
        let last = panel
            .series(&sid)
            .and_then(|s| s.last_before(t))
            .map(|(_, o)| o.market.exec_price)
            .ok_or_else(|| Error::NotFound(format!("{sid}: no price history for forced sale")))?;
        debug!(
            "{t}: {sid} left the panel, liquidating {} shares",
            pos.shares
        );
        let fill = priced_fill(Side::Sell, pos.shares, last, cfg.slippage_at_max, cfg);
        flows.apply(state, ledger, &sid, Side::Sell, fill, true);
    }

    if !skipped {
        let ranked = rank_top_n(snapshot, usize::MAX);
        let top: BTreeSet<&SecurityId> = ranked.iter().take(cfg.top_n).collect();

        let expiring: Vec<SecurityId> = state
            .positions
            .values()
            .filter(|p| p.age(t) >= i64::from(cfg.hold_months) && !top.contains(&p.sid))
            .map(|p| p.sid.clone())
            .collect();
        for sid in expiring {
            let obs = panel
                .get(&sid, t)
                .expect("delisted positions already removed");
            let shares = state.positions[&sid].shares;
            let fill = execute_order(Side::Sell, &sid, shares, &obs.market, cfg)?;
            flows.apply(state, ledger, &sid, Side::Sell, fill, false);
            let pos = state.positions.get_mut(&sid).expect("present");
            pos.shares -= fill.shares;
            if pos.shares <= 0.0 {
                state.positions.remove(&sid);
            } else {
                debug!("{t}: {sid} partially sold, {} shares remain", pos.shares);
            }
        }

        let mut slots = cfg.top_n.saturating_sub(state.positions.len());
        for sid in &ranked {
            if slots == 0 || state.cash <= 0.0 {
                break;
            }
            if state.positions.contains_key(sid) {
                continue;
            }
            let obs = panel.get(sid, t).expect("snapshot ids are in the panel");
            let budget = state.cash / slots as f64;
            let shares = shares_for_budget(budget, &obs.market, cfg);
            if shares <= 0.0 {
                continue;
            }
            let fill = execute_order(Side::Buy, sid, shares, &obs.market, cfg)?;
            flows.apply(state, ledger, sid, Side::Buy, fill, false);
            state.positions.insert(
                sid.clone(),
                Position {
                    sid: sid.clone(),
                    shares: fill.shares,
                    acquired: t,
                },
            );
            slots -= 1;
        }
    }

    if state.cash < -1e-9 {
        return Err(Error::Contract(format!(
            "{t}: cash went negative ({})",
            state.cash
        )));
    }
    let mut record = flows.record;
    record.cash_end = state.cash;
    record.positions_value = state.positions_value(panel, t);
    record.nav = record.cash_end + record.positions_value;
    record.n_positions = state.positions.len();
    ledger.months.push(record);
    Ok(())
}

/// Runs `rebalance_month` over `cfg.start..=cfg.end` with snapshots from `snapshots`.
pub fn run_backtest_with<F>(panel: &Panel, cfg: &BacktestConfig, mut snapshots: F) -> Result<Ledger>
where
    F: FnMut(MonthIndex) -> Result<FactorSnapshot>,
{
    cfg.validate()?;
    if cfg.start < panel.start() || cfg.end > panel.end() {
        return Err(Error::Domain(format!(
            "backtest range {}..={} not covered by panel {}..={}",
            cfg.start,
            cfg.end,
            panel.start(),
            panel.end()
        )));
    }
    let mut state = PortfolioState::new(cfg.initial_cash);
    let mut ledger = Ledger::new(cfg.initial_cash);
    for t in cfg.start.through(cfg.end) {
        let snapshot = snapshots(t)?;
        rebalance_month(&mut state, panel, &snapshot, cfg, &mut ledger)?;
    }
    Ok(ledger)
}

pub fn run_backtest(
    panel: &Panel,
    mode: FactorMode,
    predictor: Option<&Predictor>,
    cfg: &BacktestConfig,
) -> Result<Ledger> {
    match mode {
        FactorMode::Qfm => run_backtest_with(panel, cfg, |t| qfm_factor(panel, t)),
        FactorMode::Clairvoyant(h) => {
            run_backtest_with(panel, cfg, |t| clairvoyant_factor(panel, t, h))
        }
        FactorMode::Lfm => {
            let predictor = predictor
                .ok_or_else(|| Error::Config("lfm mode requires a trained predictor".into()))?;
            let source = LfmSource::new(panel, predictor);
            run_backtest_with(panel, cfg, |t| source.snapshot(t))
        }
    }
}

/// Results of re-deriving the accounting from a ledger.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct AuditReport {
    pub max_cash_identity_error: f64,
    pub max_nav_identity_error: f64,
    pub min_cash: f64,
    pub min_shares: f64,
    /// Largest `shares / volume` over non-forced trades.
    pub max_participation: f64,
    pub violations: Vec<String>,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Re-checks cash flow and NAV identities, non-negative cash and holdings,
/// and the participation cap, using only the ledger and the panel.
pub fn audit_ledger(
    ledger: &Ledger,
    panel: &Panel,
    cfg: &BacktestConfig,
    tolerance: f64,
) -> AuditReport {
    let mut report = AuditReport {
        min_cash: f64::INFINITY,
        min_shares: f64::INFINITY,
        ..AuditReport::default()
    };
    let rel = |err: f64, scale: f64| err / scale.abs().max(1e-12);
    let mut holdings: BTreeMap<&SecurityId, f64> = BTreeMap::new();
    let mut trades = ledger.trades.iter().peekable();
    let mut prev_cash = ledger.initial_cash;

    for m in &ledger.months {
        let expected = m.cash_start + m.dividends + m.sell_inflow - m.buy_outflow - m.fees;
        let scale = m
            .cash_start
            .abs()
            .max(m.buy_outflow)
            .max(m.sell_inflow)
            .max(m.cash_end.abs());
        let cash_err = rel((expected - m.cash_end).abs(), scale)
            .max(rel((m.cash_start - prev_cash).abs(), scale));
        report.max_cash_identity_error = report.max_cash_identity_error.max(cash_err);
        if cash_err > tolerance {
            report
                .violations
                .push(format!("{}: cash identity off by {cash_err:e}", m.month));
        }
        prev_cash = m.cash_end;
        report.min_cash = report.min_cash.min(m.cash_end);
        if m.cash_end < -1e-9 {
            report
                .violations
                .push(format!("{}: negative cash {}", m.month, m.cash_end));
        }

        let (mut buys, mut sells, mut fees) = (0.0, 0.0, 0.0);
        while let Some(tr) = trades.next_if(|tr| tr.month == m.month) {
            let gross = tr.shares * tr.price / USD_PER_MUSD;
            match tr.side {
                Side::Buy => buys += gross,
                Side::Sell => sells += gross,
            }
            fees += tr.fee / USD_PER_MUSD;
            let h = holdings.entry(&tr.sid).or_insert(0.0);
            *h += if tr.side == Side::Buy {
                tr.shares
            } else {
                -tr.shares
            };
            if !tr.forced {
                if let Some(obs) = panel.get(&tr.sid, tr.month) {
                    let v = obs.market.month_share_volume;
                    let p = if v > 0.0 {
                        tr.shares / v
                    } else {
                        f64::INFINITY
                    };
                    report.max_participation = report.max_participation.max(p);
                    if p > cfg.max_participation * (1.0 + CAP_TOLERANCE) {
                        report
                            .violations
                            .push(format!("{}: {} traded {p} of volume", tr.month, tr.sid));
                    }
                } else {
                    report.violations.push(format!(
                        "{}: {} traded without a panel row",
                        tr.month, tr.sid
                    ));
                }
            }
        }
        let flow_err = rel(
            (buys - m.buy_outflow).abs() + (sells - m.sell_inflow).abs() + (fees - m.fees).abs(),
            scale,
        );
        if flow_err > tolerance {
            report.violations.push(format!(
                "{}: trade totals disagree with month record ({flow_err:e})",
                m.month
            ));
        }

        // Sub-share residue from repeated partial fills counts as flat.
        holdings.retain(|_, s| *s > 1e-6);
        for (sid, s) in &holdings {
            report.min_shares = report.min_shares.min(*s);
            if *s < 0.0 {
                report
                    .violations
                    .push(format!("{}: short position in {sid}", m.month));
            }
        }
        let marked: f64 = holdings
            .iter()
            .map(|(sid, s)| {
                panel
                    .get(sid, m.month)
                    .map_or(0.0, |o| s * o.market.close_price / USD_PER_MUSD)
            })
            .sum();
        let nav_err = rel((m.cash_end + marked - m.nav).abs(), m.nav);
        report.max_nav_identity_error = report.max_nav_identity_error.max(nav_err);
        if nav_err > tolerance {
            report
                .violations
                .push(format!("{}: NAV identity off by {nav_err:e}", m.month));
        }
    }
    if trades.next().is_some() {
        report
            .violations
            .push("trades dated outside the recorded months".into());
    }
    if report.min_shares == f64::INFINITY {
        report.min_shares = 0.0;
    }
    report
}

fn flush<W: Write>(mut w: csv::Writer<W>, what: &str) -> Result<()> {
    w.flush().map_err(|e| Error::io(Path::new(what), e))
}

/// `month,sid,side,shares,price,fee`.
pub fn write_trades_csv<W: Write>(writer: W, ledger: &Ledger) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["month", "sid", "side", "shares", "price", "fee"])?;
    for tr in &ledger.trades {
        w.write_record([
            tr.month.to_string(),
            tr.sid.to_string(),
            tr.side.to_string(),
            tr.shares.to_string(),
            tr.price.to_string(),
            tr.fee.to_string(),
        ])?;
    }
    flush(w, "<trades>")
}

/// `month,nav,cash,n_positions`.
pub fn write_nav_csv<W: Write>(writer: W, ledger: &Ledger) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["month", "nav", "cash", "n_positions"])?;
    for m in &ledger.months {
        w.write_record([
            m.month.to_string(),
            m.nav.to_string(),
            m.cash_end.to_string(),
            m.n_positions.to_string(),
        ])?;
    }
    flush(w, "<nav>")
}
