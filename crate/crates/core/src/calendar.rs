//! Month arithmetic on a calendar anchored at January 1970.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub const EPOCH_YEAR: i32 = 1970;

/// Months elapsed since January 1970 (`1970-01` is 0).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MonthIndex(u32);

impl MonthIndex {
    pub const fn new(value: u32) -> Self {
        MonthIndex(value)
    }

    pub fn from_ymd(year: i32, month: u32) -> Result<Self> {
        if year < EPOCH_YEAR {
            return Err(Error::Domain(format!("year {year} precedes {EPOCH_YEAR}")));
        }
        if !(1..=12).contains(&month) {
            return Err(Error::Domain(format!("month {month} outside 1..=12")));
        }
        let years = u32::try_from(year - EPOCH_YEAR)
            .map_err(|_| Error::Domain(format!("year {year} out of range")))?;
        Ok(MonthIndex(years * 12 + (month - 1)))
    }

    pub const fn value(self) -> u32 {
        self.0
    }

    pub fn year(self) -> i32 {
        EPOCH_YEAR + (self.0 / 12) as i32
    }

    /// Calendar month, 1..=12.
    pub fn month(self) -> u32 {
        self.0 % 12 + 1
    }

    pub fn to_ymd(self) -> (i32, u32) {
        (self.year(), self.month())
    }

    /// Shift by a signed number of months; `None` if the result precedes the epoch.
    pub fn offset(self, months: i64) -> Option<Self> {
        let v = i64::from(self.0) + months;
        u32::try_from(v).ok().map(MonthIndex)
    }

    pub fn checked_sub(self, months: u32) -> Option<Self> {
        self.0.checked_sub(months).map(MonthIndex)
    }

    pub fn plus(self, months: u32) -> Self {
        MonthIndex(self.0 + months)
    }

    /// Whole months from `earlier` to `self` (negative if `earlier` is later).
    pub fn months_since(self, earlier: MonthIndex) -> i64 {
        i64::from(self.0) - i64::from(earlier.0)
    }

    /// Inclusive iterator over `[self, end]`.
    pub fn through(self, end: MonthIndex) -> impl Iterator<Item = MonthIndex> {
        (self.0..=end.0).map(MonthIndex)
    }
}

pub fn month_index_from_ymd(year: i32, month: u32) -> Result<MonthIndex> {
    MonthIndex::from_ymd(year, month)
}

impl fmt::Display for MonthIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year(), self.month())
    }
}

impl FromStr for MonthIndex {
    type Err = Error;

    /// Parses `YYYY-MM`.
    fn from_str(s: &str) -> Result<Self> {
        let (y, m) = s
            .trim()
            .split_once('-')
            .ok_or_else(|| Error::Domain(format!("expected YYYY-MM, got `{s}`")))?;
        let year: i32 = y
            .parse()
            .map_err(|_| Error::Domain(format!("bad year in `{s}`")))?;
        let month: u32 = m
            .parse()
            .map_err(|_| Error::Domain(format!("bad month in `{s}`")))?;
        MonthIndex::from_ymd(year, month)
    }
}

impl Serialize for MonthIndex {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MonthIndex {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn known_indices() {
        assert_eq!(month_index_from_ymd(1970, 1).unwrap().value(), 0);
        assert_eq!(month_index_from_ymd(2000, 1).unwrap().value(), 360);
        assert_eq!(month_index_from_ymd(2016, 12).unwrap().value(), 563);
    }

    #[test]
    fn rejects_out_of_domain() {
        assert!(matches!(
            month_index_from_ymd(1969, 12),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            month_index_from_ymd(1990, 0),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            month_index_from_ymd(1990, 13),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn display_and_parse() {
        let m = MonthIndex::from_ymd(1999, 12).unwrap();
        assert_eq!(m.to_string(), "1999-12");
        assert_eq!("1999-12".parse::<MonthIndex>().unwrap(), m);
        assert!("1999/12".parse::<MonthIndex>().is_err());
    }

    #[test]
    fn offsets() {
        let m = MonthIndex::new(48);
        assert_eq!(m.offset(-48), Some(MonthIndex::new(0)));
        assert_eq!(m.offset(-49), None);
        assert_eq!(m.plus(12).months_since(m), 12);
        assert_eq!(m.checked_sub(49), None);
    }

    proptest! {
        #[test]
        fn ymd_round_trip(year in 1970i32..=2100, month in 1u32..=12) {
            let m = MonthIndex::from_ymd(year, month).unwrap();
            prop_assert_eq!(m.to_ymd(), (year, month));
        }
    }
}
