//! Security identity, fundamental line items and monthly market rows.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Opaque, non-empty security identifier. Ordering is lexicographic and is
/// used for every deterministic tie-break in the crate.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SecurityId(String);

impl SecurityId {
    pub fn new(id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        if id.trim().is_empty() {
            return Err(Error::Domain("security id must be non-empty".into()));
        }
        Ok(SecurityId(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for SecurityId {
    type Error = Error;

    fn try_from(value: String) -> Result<Self> {
        SecurityId::new(value)
    }
}

impl From<SecurityId> for String {
    fn from(value: SecurityId) -> Self {
        value.0
    }
}

impl fmt::Display for SecurityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

pub const N_FUNDAMENTALS: usize = 16;

/// The sixteen reported line items, in canonical order. Every vector, matrix
/// column, CSV header and loss weight in the crate uses this order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Fundamental {
    RevenueTtm,
    CogsTtm,
    SgnaTtm,
    EbitTtm,
    NetIncomeTtm,
    CashMrq,
    ReceivablesMrq,
    InventoriesMrq,
    OtherCurrentAssetsMrq,
    PpeMrq,
    OtherAssetsMrq,
    DebtCurrentMrq,
    AccountsPayableMrq,
    TaxesPayableMrq,
    OtherCurrentLiabilitiesMrq,
    TotalLiabilitiesMrq,
}

impl Fundamental {
    pub const ALL: [Fundamental; N_FUNDAMENTALS] = [
        Fundamental::RevenueTtm,
        Fundamental::CogsTtm,
        Fundamental::SgnaTtm,
        Fundamental::EbitTtm,
        Fundamental::NetIncomeTtm,
        Fundamental::CashMrq,
        Fundamental::ReceivablesMrq,
        Fundamental::InventoriesMrq,
        Fundamental::OtherCurrentAssetsMrq,
        Fundamental::PpeMrq,
        Fundamental::OtherAssetsMrq,
        Fundamental::DebtCurrentMrq,
        Fundamental::AccountsPayableMrq,
        Fundamental::TaxesPayableMrq,
        Fundamental::OtherCurrentLiabilitiesMrq,
        Fundamental::TotalLiabilitiesMrq,
    ];

    pub const fn index(self) -> usize {
        self as usize
    }

    /// Column name used in CSV files and checkpoints.
    pub const fn name(self) -> &'static str {
        match self {
            Fundamental::RevenueTtm => "revenue_ttm",
            Fundamental::CogsTtm => "cogs_ttm",
            Fundamental::SgnaTtm => "sgna_ttm",
            Fundamental::EbitTtm => "ebit_ttm",
            Fundamental::NetIncomeTtm => "net_income_ttm",
            Fundamental::CashMrq => "cash_mrq",
            Fundamental::ReceivablesMrq => "receivables_mrq",
            Fundamental::InventoriesMrq => "inventories_mrq",
            Fundamental::OtherCurrentAssetsMrq => "other_current_assets_mrq",
            Fundamental::PpeMrq => "ppe_mrq",
            Fundamental::OtherAssetsMrq => "other_assets_mrq",
            Fundamental::DebtCurrentMrq => "debt_current_mrq",
            Fundamental::AccountsPayableMrq => "accounts_payable_mrq",
            Fundamental::TaxesPayableMrq => "taxes_payable_mrq",
            Fundamental::OtherCurrentLiabilitiesMrq => "other_current_liabilities_mrq",
            Fundamental::TotalLiabilitiesMrq => "total_liabilities_mrq",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|f| f.name() == name)
    }
}

pub const EBIT_INDEX: usize = Fundamental::EbitTtm.index();

/// The canonical field order as owned strings (stored in checkpoints).
pub fn canonical_field_order() -> Vec<String> {
    Fundamental::ALL
        .iter()
        .map(|f| f.name().to_string())
        .collect()
}

/// Sixteen line items in millions USD; negatives are allowed (losses).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FundamentalVector(pub [f64; N_FUNDAMENTALS]);

impl FundamentalVector {
    pub fn new(values: [f64; N_FUNDAMENTALS]) -> Result<Self> {
        if let Some(f) = Fundamental::ALL
            .iter()
            .find(|f| !values[f.index()].is_finite())
        {
            return Err(Error::Domain(format!("{} is not finite", f.name())));
        }
        Ok(FundamentalVector(values))
    }

    pub fn as_array(&self) -> &[f64; N_FUNDAMENTALS] {
        &self.0
    }

    pub fn get(&self, item: Fundamental) -> f64 {
        self.0[item.index()]
    }
}

impl Index<Fundamental> for FundamentalVector {
    type Output = f64;

    fn index(&self, item: Fundamental) -> &f64 {
        &self.0[item.index()]
    }
}

impl IndexMut<Fundamental> for FundamentalVector {
    fn index_mut(&mut self, item: Fundamental) -> &mut f64 {
        &mut self.0[item.index()]
    }
}

/// Per-security, per-month market data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarketRow {
    /// USD/share, split- and dividend-adjusted.
    pub close_price: f64,
    /// USD/share execution benchmark (early-month volume-weighted close).
    pub exec_price: f64,
    pub shares_outstanding: f64,
    /// Millions USD.
    pub market_cap: f64,
    pub month_share_volume: f64,
    /// USD/share paid during the month.
    pub dividend_per_share: f64,
    pub is_us: bool,
    pub is_financial_sector: bool,
}

impl MarketRow {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("close_price", self.close_price),
            ("exec_price", self.exec_price),
            ("market_cap", self.market_cap),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Domain(format!("{name} must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("shares_outstanding", self.shares_outstanding),
            ("month_share_volume", self.month_share_volume),
            ("dividend_per_share", self.dividend_per_share),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Domain(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}
