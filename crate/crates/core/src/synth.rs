//! Seeded synthetic universe with known dynamics.
//!
//! Every item other than revenue is a fixed multiple of revenue times `1 + d`,
//! where the deviation `d` is an AR(1) process with cross-item correlated
//! shocks (optionally a threshold AR(1) with a separate persistence at or
//! above zero). Revenue follows a log random walk whose drift switches sign
//! with the EBIT deviation, so next year's growth is a nonlinear function of
//! the current margin. Market cap is a multiple of the
//! EBIT twelve months ahead, multiplied by persistent log-normal pricing
//! noise, so knowing future EBIT is informative about returns.
//!
//! Each security draws from its own ChaCha8 stream selected by its index,
//! so a security's path does not depend on how many others are generated.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::calendar::MonthIndex;
use crate::error::{Error, Result};
use crate::features::LOOKAHEAD;
use crate::ingest::{
    write_cpi_csv, write_fundamentals_csv, write_market_csv, CpiSeries, FundamentalRecord,
    MarketRecord, CPI_FILE, FUNDAMENTALS_FILE, MARKET_FILE,
};
use crate::panel::{Observation, Panel};
use crate::types::{Fundamental, FundamentalVector, MarketRow, SecurityId, N_FUNDAMENTALS};

/// Smallest history that yields one full sample: 48 months of lags, 12 of
/// look-ahead and some margin.
pub const MIN_SYNTH_MONTHS: usize = 73;

/// Typical item-to-revenue ratios, in canonical field order.
pub const BASE_RATIOS: [f64; N_FUNDAMENTALS] = [
    1.00, // revenue
    0.60, // cogs
    0.20, // sga
    0.12, // ebit
    0.08, // net income
    0.10, // cash
    0.15, // receivables
    0.12, // inventories
    0.05, // other current assets
    0.40, // ppe
    0.20, // other assets
    0.05, // current debt
    0.10, // accounts payable
    0.02, // taxes payable
    0.06, // other current liabilities
    0.50, // total liabilities
];

const CPI_LEVEL: f64 = 100.0;
const EBIT: usize = Fundamental::EbitTtm.index();

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_stocks: usize,
    pub n_months: usize,
    pub seed: u64,
    pub start: MonthIndex,
    /// Months simulated and discarded before `start`.
    pub burn_in: usize,
    /// Annual log-revenue drift.
    pub revenue_drift: f64,
    /// Monthly log-revenue shock scale.
    pub revenue_noise: f64,
    /// Cross-sectional spread of per-stock drift (annual).
    pub drift_dispersion: f64,
    /// Annual log-revenue growth added when the EBIT deviation is well above
    /// zero and subtracted when it is well below.
    pub growth_sensitivity: f64,
    /// EBIT deviation scale over which the growth regime switches (a `tanh` ramp).
    pub growth_switch_scale: f64,
    /// Log-normal spread of per-stock item ratios around [`BASE_RATIOS`].
    pub ratio_dispersion: f64,
    /// AR(1) persistence of item deviations while below zero.
    pub persistence: f64,
    /// Persistence at or above zero; `None` uses `persistence` (plain AR(1)).
    pub persistence_above: Option<f64>,
    /// Monthly shock scale of item deviations.
    pub deviation_noise: f64,
    /// Share of deviation shock variance common to all items of a stock.
    pub item_correlation: f64,
    /// Market cap multiple on forward EBIT.
    pub price_multiple: f64,
    /// Market cap floor as a multiple of current revenue.
    pub price_floor: f64,
    pub pricing_noise: f64,
    /// Monthly persistence of the pricing noise factor.
    pub pricing_persistence: f64,
    /// Fraction of positive net income paid out as dividends.
    pub payout_ratio: f64,
    /// Mean monthly share turnover.
    pub turnover: f64,
    pub volume_noise: f64,
    /// Log-scale dispersion of the execution price around the close.
    pub exec_noise: f64,
    /// Median initial revenue, millions USD.
    pub initial_revenue: f64,
    pub initial_revenue_dispersion: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_stocks: 300,
            n_months: 240,
            seed: 1,
            start: MonthIndex::new(0),
            burn_in: 60,
            revenue_drift: 0.04,
            revenue_noise: 0.005,
            drift_dispersion: 0.0,
            growth_sensitivity: 0.6,
            growth_switch_scale: 0.02,
            ratio_dispersion: 0.0,
            persistence: 0.98,
            persistence_above: None,
            deviation_noise: 0.01,
            item_correlation: 0.5,
            price_multiple: 10.0,
            price_floor: 0.3,
            pricing_noise: 0.3,
            pricing_persistence: 0.9,
            payout_ratio: 0.3,
            turnover: 0.08,
            volume_noise: 0.3,
            exec_noise: 0.005,
            initial_revenue: 500.0,
            initial_revenue_dispersion: 1.0,
        }
    }
}

impl SynthConfig {
    /// Deterministic world: no drift, no shocks, no pricing noise, unit persistence.
    pub fn frozen(n_stocks: usize, n_months: usize, seed: u64) -> Self {
        SynthConfig {
            n_stocks,
            n_months,
            seed,
            revenue_drift: 0.0,
            revenue_noise: 0.0,
            drift_dispersion: 0.0,
            growth_sensitivity: 0.0,
            persistence: 1.0,
            persistence_above: None,
            deviation_noise: 0.0,
            pricing_noise: 0.0,
            exec_noise: 0.0,
            ..SynthConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let non_neg = |v: f64| v.is_finite() && v >= 0.0;
        let checks = [
            (self.n_stocks >= 1, "n_stocks must be at least 1"),
            (
                self.n_months >= MIN_SYNTH_MONTHS,
                "n_months must be at least 73",
            ),
            (unit(self.persistence), "persistence must be in [0, 1]"),
            (
                self.persistence_above.is_none_or(unit),
                "persistence_above must be in [0, 1]",
            ),
            (
                unit(self.item_correlation),
                "item_correlation must be in [0, 1]",
            ),
            (
                unit(self.pricing_persistence) && self.pricing_persistence < 1.0,
                "pricing_persistence must be in [0, 1)",
            ),
            (unit(self.payout_ratio), "payout_ratio must be in [0, 1]"),
            (self.price_multiple > 0.0, "price_multiple must be positive"),
            (self.price_floor > 0.0, "price_floor must be positive"),
            (
                self.growth_switch_scale > 0.0,
                "growth_switch_scale must be positive",
            ),
            (
                self.growth_sensitivity.is_finite(),
                "growth_sensitivity must be finite",
            ),
            (self.turnover > 0.0, "turnover must be positive"),
            (
                self.initial_revenue > 0.0,
                "initial_revenue must be positive",
            ),
            (
                [
                    self.revenue_noise,
                    self.drift_dispersion,
                    self.ratio_dispersion,
                    self.deviation_noise,
                    self.pricing_noise,
                    self.volume_noise,
                    self.exec_noise,
                    self.initial_revenue_dispersion,
                ]
                .into_iter()
                .all(non_neg),
                "noise scales must be non-negative",
            ),
            (
                self.revenue_drift.is_finite(),
                "revenue_drift must be finite",
            ),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::Config((*msg).into())),
            None => Ok(()),
        }
    }

    pub fn end(&self) -> MonthIndex {
        self.start.plus(self.n_months as u32 - 1)
    }
}

/// Latent parameters of one generated security.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StockTruth {
    pub sid: SecurityId,
    pub ratios: [f64; N_FUNDAMENTALS],
    pub monthly_drift: f64,
}

#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub config: SynthConfig,
    pub panel: Panel,
    /// EBIT twelve months after each panel month, including months past the panel end.
    pub forward_ebit: BTreeMap<(SecurityId, MonthIndex), f64>,
    pub stocks: Vec<StockTruth>,
}

impl SynthWorld {
    pub fn forward_ebit(&self, sid: &SecurityId, t: MonthIndex) -> Option<f64> {
        self.forward_ebit.get(&(sid.clone(), t)).copied()
    }

    /// Flat CPI covering the panel and the default deflation reference month.
    pub fn cpi(&self) -> CpiSeries {
        let reference = MonthIndex::new(480);
        CpiSeries::flat(
            self.panel.start().min(reference),
            self.panel.end().max(reference),
            CPI_LEVEL,
        )
    }

    /// Writes `fundamentals.csv`, `market.csv` and `cpi.csv` in the ingest schema.
    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut fundamentals = Vec::with_capacity(self.panel.n_observations());
        let mut market = Vec::with_capacity(self.panel.n_observations());
        for (sid, series) in self.panel.iter() {
            for (month, obs) in series.iter() {
                fundamentals.push(FundamentalRecord {
                    sid: sid.clone(),
                    month,
                    values: obs.fundamentals.0.map(Some),
                });
                market.push(MarketRecord {
                    sid: sid.clone(),
                    month,
                    row: obs.market,
                });
            }
        }
        write_fundamentals_csv(&dir.join(FUNDAMENTALS_FILE), &fundamentals)?;
        write_market_csv(&dir.join(MARKET_FILE), &market)?;
        write_cpi_csv(&dir.join(CPI_FILE), &self.cpi())
    }
}

pub fn security_id(index: usize, n_stocks: usize) -> SecurityId {
    let width = n_stocks.to_string().len().max(4);
    SecurityId::new(format!("S{:0width$}", index + 1)).expect("non-empty")
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

struct SimulatedPath {
    fundamentals: Vec<[f64; N_FUNDAMENTALS]>,
    pricing: Vec<f64>,
}

/// Simulates `len` months of fundamentals and the pricing factor after burn-in.
fn simulate_fundamentals(
    cfg: &SynthConfig,
    truth: &StockTruth,
    rng: &mut ChaCha8Rng,
    len: usize,
) -> SimulatedPath {
    let phi_below = cfg.persistence;
    let phi_above = cfg.persistence_above.unwrap_or(cfg.persistence);
    let common = cfg.item_correlation.sqrt();
    let idio = (1.0 - cfg.item_correlation).sqrt();
    let psi = cfg.pricing_persistence;
    let xi_scale = (1.0 - psi * psi).sqrt();

    let mut log_rev = cfg.initial_revenue.ln() + cfg.initial_revenue_dispersion * normal(rng);
    let mut dev = [0.0; N_FUNDAMENTALS];
    let mut xi: f64 = normal(rng);
    let mut out = SimulatedPath {
        fundamentals: Vec::with_capacity(len),
        pricing: Vec::with_capacity(len),
    };
    for step in 0..cfg.burn_in + len {
        if step >= cfg.burn_in {
            let revenue = log_rev.exp();
            let mut f = [0.0; N_FUNDAMENTALS];
            for k in 0..N_FUNDAMENTALS {
                f[k] = truth.ratios[k] * revenue * (1.0 + dev[k]);
            }
            out.fundamentals.push(f);
            out.pricing.push(xi);
        }
        let regime = (dev[EBIT] / cfg.growth_switch_scale).tanh();
        log_rev += truth.monthly_drift
            + cfg.growth_sensitivity / 12.0 * regime
            + cfg.revenue_noise * normal(rng);
        let z_common = normal(rng);
        for d in dev.iter_mut().skip(1) {
            let phi = if *d < 0.0 { phi_below } else { phi_above };
            let shock = common * z_common + idio * normal(rng);
            *d = phi * *d + cfg.deviation_noise * shock;
        }
        xi = psi * xi + xi_scale * normal(rng);
    }
    out
}

/// Generates the panel and its ground truth. Deterministic in `cfg`.
pub fn generate_panel(cfg: &SynthConfig) -> Result<SynthWorld> {
    cfg.validate()?;
    let horizon = LOOKAHEAD as usize;
    let len = cfg.n_months + horizon;
    let mut builder = Panel::builder();
    let mut forward_ebit = BTreeMap::new();
    let mut stocks = Vec::with_capacity(cfg.n_stocks);

    for i in 0..cfg.n_stocks {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64 + 1);
        let sid = security_id(i, cfg.n_stocks);
        let mut ratios = BASE_RATIOS;
        for r in ratios.iter_mut().skip(1) {
            *r *= (cfg.ratio_dispersion * normal(&mut rng)).exp();
        }
        let monthly_drift = (cfg.revenue_drift + cfg.drift_dispersion * normal(&mut rng)) / 12.0;
        let shares = 10f64.powf(rng.random_range(7.0..8.7));
        let truth = StockTruth {
            sid: sid.clone(),
            ratios,
            monthly_drift,
        };
        let path = simulate_fundamentals(cfg, &truth, &mut rng, len);

        for m in 0..cfg.n_months {
            let t = cfg.start.plus(m as u32);
            let f = path.fundamentals[m];
            let future_ebit = path.fundamentals[m + horizon][Fundamental::EbitTtm.index()];
            let revenue = f[Fundamental::RevenueTtm.index()];
            let anchor = (cfg.price_multiple * future_ebit).max(cfg.price_floor * revenue);
            let market_cap = anchor * (cfg.pricing_noise * path.pricing[m]).exp();
            let close = market_cap * 1e6 / shares;
            let exec = close * (cfg.exec_noise * normal(&mut rng)).exp();
            let volume = shares * cfg.turnover * (cfg.volume_noise * normal(&mut rng)).exp();
            let net_income = f[Fundamental::NetIncomeTtm.index()];
            let dividend = cfg.payout_ratio * net_income.max(0.0) / 12.0 * 1e6 / shares;
            let market = MarketRow {
                close_price: close,
                exec_price: exec,
                shares_outstanding: shares,
                market_cap,
                month_share_volume: volume,
                dividend_per_share: dividend,
                is_us: true,
                is_financial_sector: false,
            };
            builder.push(
                sid.clone(),
                t,
                Observation {
                    market,
                    fundamentals: FundamentalVector::new(f)?,
                },
            )?;
            forward_ebit.insert((sid.clone(), t), future_ebit);
        }
        stocks.push(truth);
    }
    Ok(SynthWorld {
        config: cfg.clone(),
        panel: builder.build()?,
        forward_ebit,
        stocks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factor::{clairvoyant_factor, enterprise_value, rank_top_n};

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            n_stocks: 20,
            n_months: 80,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_same_world() {
        let a = generate_panel(&small(5)).unwrap();
        let b = generate_panel(&small(5)).unwrap();
        assert_eq!(a.panel, b.panel);
        assert_eq!(a.forward_ebit, b.forward_ebit);
        let c = generate_panel(&small(6)).unwrap();
        assert_ne!(a.panel, c.panel);
    }

    #[test]
    fn streams_are_independent_of_universe_size() {
        let a = generate_panel(&small(5)).unwrap();
        let b = generate_panel(&SynthConfig {
            n_stocks: 35,
            ..small(5)
        })
        .unwrap();
        let sid = security_id(3, 20);
        assert_eq!(sid, security_id(3, 35));
        assert_eq!(a.panel.series(&sid), b.panel.series(&sid));
    }

    #[test]
    fn shape_and_ids() {
        let w = generate_panel(&small(1)).unwrap();
        assert_eq!(w.panel.n_securities(), 20);
        assert_eq!(w.panel.n_observations(), 20 * 80);
        assert_eq!(w.panel.start(), MonthIndex::new(0));
        assert_eq!(w.panel.end(), MonthIndex::new(79));
        assert_eq!(w.panel.ids()[0].as_str(), "S0001");
        assert!(generate_panel(&SynthConfig {
            n_months: 72,
            ..small(1)
        })
        .is_err());
    }

    #[test]
    fn frozen_world_is_constant() {
        let w = generate_panel(&SynthConfig::frozen(5, 80, 3)).unwrap();
        for (_, series) in w.panel.iter() {
            let first = &series.observations()[0];
            for o in series.observations() {
                assert_eq!(o.fundamentals, first.fundamentals);
                assert_eq!(o.market.market_cap, first.market.market_cap);
            }
        }
    }

    #[test]
    fn deviation_persistence_is_recovered() {
        let phi = 0.9;
        let cfg = SynthConfig {
            n_stocks: 200,
            n_months: 250,
            seed: 11,
            persistence: phi,
            persistence_above: None,
            ratio_dispersion: 0.0,
            ..SynthConfig::default()
        };
        let w = generate_panel(&cfg).unwrap();
        let ebit = Fundamental::EbitTtm.index();
        let (mut sxy, mut sxx) = (0.0, 0.0);
        let (mut sxy12, mut sxx12) = (0.0, 0.0);
        let mut n = 0usize;
        for (_, series) in w.panel.iter() {
            let dev: Vec<f64> = series
                .observations()
                .iter()
                .map(|o| o.fundamentals.0[ebit] / (BASE_RATIOS[ebit] * o.fundamentals.0[0]) - 1.0)
                .collect();
            for pair in dev.windows(2) {
                sxy += pair[0] * pair[1];
                sxx += pair[0] * pair[0];
                n += 1;
            }
            // realized twelve months ahead against the closed-form forecast phi^12 d
            for (now, later) in dev.iter().zip(dev.iter().skip(12)) {
                let predicted = phi.powi(12) * now;
                sxy12 += predicted * later;
                sxx12 += predicted * predicted;
            }
        }
        assert!(n >= 49_000);
        let slope = sxy / sxx;
        assert!((slope - phi).abs() < 0.05, "monthly slope {slope}");
        let slope12 = sxy12 / sxx12;
        assert!((slope12 - 1.0).abs() < 0.05, "twelve-month slope {slope12}");
    }

    #[test]
    fn revenue_growth_follows_the_margin_regime() {
        let cfg = SynthConfig {
            revenue_drift: 0.0,
            revenue_noise: 0.0,
            ..small(8)
        };
        let w = generate_panel(&cfg).unwrap();
        let ebit = Fundamental::EbitTtm.index();
        let (mut up, mut down) = (0usize, 0usize);
        for (_, series) in w.panel.iter() {
            for pair in series.observations().windows(2) {
                let f = &pair[0].fundamentals.0;
                let dev = f[ebit] / (BASE_RATIOS[ebit] * f[0]) - 1.0;
                let step = (pair[1].fundamentals.0[0] / f[0]).ln();
                let expected =
                    cfg.growth_sensitivity / 12.0 * (dev / cfg.growth_switch_scale).tanh();
                assert!(
                    (step - expected).abs() < 1e-12,
                    "step {step} expected {expected}"
                );
                if dev > 0.0 {
                    up += 1;
                } else {
                    down += 1;
                }
            }
        }
        assert!(up > 100 && down > 100, "both regimes visited: {up} {down}");
    }

    #[test]
    fn noiseless_pricing_clairvoyant_ranking_matches_ground_truth() {
        let cfg = SynthConfig {
            pricing_noise: 0.0,
            ..small(2)
        };
        let w = generate_panel(&cfg).unwrap();
        for t in [MonthIndex::new(10), MonthIndex::new(40)] {
            let snap = clairvoyant_factor(&w.panel, t, 12).unwrap();
            let mut brute: Vec<(f64, SecurityId)> = w
                .panel
                .cross_section(t)
                .filter_map(|(sid, o)| {
                    let ev = enterprise_value(&o.market, &o.fundamentals)?;
                    Some((w.forward_ebit(sid, t).unwrap() / ev, sid.clone()))
                })
                .collect();
            brute.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(&b.1)));
            let expected: Vec<SecurityId> = brute.into_iter().map(|(_, s)| s).collect();
            assert_eq!(rank_top_n(&snap, usize::MAX), expected);
        }
    }

    #[test]
    fn csv_emission_round_trips_through_ingest() {
        let w = generate_panel(&small(4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        w.write_csv(dir.path()).unwrap();
        let cfg = crate::ingest::UniverseConfig {
            min_market_cap_musd: 1e-9,
            ..Default::default()
        };
        let ingested = crate::ingest::ingest_dir(dir.path(), &cfg).unwrap();
        assert_eq!(ingested.panel, w.panel);
    }
}
