use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::GridError;

/// Model calendars found in CMIP-style output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Calendar {
    #[serde(rename = "standard", alias = "gregorian", alias = "proleptic_gregorian")]
    Standard,
    #[serde(rename = "noleap", alias = "365_day")]
    NoLeap,
    #[serde(rename = "360_day")]
    Day360,
}

impl Calendar {
    pub fn days_in_month(self, year: i32, month: u8) -> u8 {
        match self {
            Calendar::Day360 => 30,
            Calendar::NoLeap => DAYS_NOLEAP[(month - 1) as usize],
            Calendar::Standard => {
                if month == 2 && is_gregorian_leap(year) {
                    29
                } else {
                    DAYS_NOLEAP[(month - 1) as usize]
                }
            }
        }
    }

    pub fn days_in_year(self, year: i32) -> u32 {
        (1..=12).map(|m| self.days_in_month(year, m) as u32).sum()
    }

    pub fn is_valid(self, date: Date) -> bool {
        (1..=12).contains(&date.month) && date.day >= 1 && date.day <= self.days_in_month(date.year, date.month)
    }

    /// The day after `date` under this calendar.
    pub fn next_day(self, date: Date) -> Date {
        if date.day < self.days_in_month(date.year, date.month) {
            Date { day: date.day + 1, ..date }
        } else if date.month < 12 {
            Date { month: date.month + 1, day: 1, ..date }
        } else {
            Date { year: date.year + 1, month: 1, day: 1 }
        }
    }

    /// `n` consecutive days starting at `start`.
    pub fn daily_series(self, start: Date, n: usize) -> Vec<Date> {
        let mut out = Vec::with_capacity(n);
        let mut d = start;
        for _ in 0..n {
            out.push(d);
            d = self.next_day(d);
        }
        out
    }

    pub fn name(self) -> &'static str {
        match self {
            Calendar::Standard => "standard",
            Calendar::NoLeap => "noleap",
            Calendar::Day360 => "360_day",
        }
    }
}

impl FromStr for Calendar {
    type Err = GridError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "standard" | "gregorian" | "proleptic_gregorian" => Ok(Calendar::Standard),
            "noleap" | "365_day" => Ok(Calendar::NoLeap),
            "360_day" => Ok(Calendar::Day360),
            other => Err(GridError::Header(format!("unknown calendar '{other}'"))),
        }
    }
}

impl fmt::Display for Calendar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

const DAYS_NOLEAP: [u8; 12] = [31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31];

fn is_gregorian_leap(year: i32) -> bool {
    (year % 4 == 0 && year % 100 != 0) || year % 400 == 0
}

/// Calendar-agnostic (year, month, day) triple. Validity is checked against a
/// [`Calendar`], never on its own.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Date {
    pub year: i32,
    pub month: u8,
    pub day: u8,
}

impl Date {
    pub const fn new(year: i32, month: u8, day: u8) -> Self {
        Self { year, month, day }
    }
}

impl fmt::Display for Date {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}-{:02}", self.year, self.month, self.day)
    }
}

impl FromStr for Date {
    type Err = GridError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || GridError::Header(format!("malformed ISO date '{s}'"));
        // Accept a trailing time component ("1985-01-01T00:00:00").
        let day_part = s.trim().split(['T', ' ']).next().ok_or_else(bad)?;
        let mut it = day_part.splitn(3, '-');
        let year: i32 = it.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let month: u8 = it.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let day: u8 = it.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        Ok(Date { year, month, day })
    }
}

impl Serialize for Date {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Date {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Meteorological seasons plus the full year.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Season {
    #[serde(rename = "DJF")]
    Djf,
    #[serde(rename = "MAM")]
    Mam,
    #[serde(rename = "JJA")]
    Jja,
    #[serde(rename = "SON")]
    Son,
    #[serde(rename = "ANNUAL")]
    Annual,
}

impl Season {
    pub const ALL: [Season; 5] = [Season::Djf, Season::Mam, Season::Jja, Season::Son, Season::Annual];
    pub const QUARTERS: [Season; 4] = [Season::Djf, Season::Mam, Season::Jja, Season::Son];

    pub fn months(self) -> &'static [u8] {
        match self {
            Season::Djf => &[12, 1, 2],
            Season::Mam => &[3, 4, 5],
            Season::Jja => &[6, 7, 8],
            Season::Son => &[9, 10, 11],
            Season::Annual => &[1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12],
        }
    }

    pub fn contains(self, month: u8) -> bool {
        self.months().contains(&month)
    }

    pub fn label(self) -> &'static str {
        match self {
            Season::Djf => "DJF",
            Season::Mam => "MAM",
            Season::Jja => "JJA",
            Season::Son => "SON",
            Season::Annual => "ANNUAL",
        }
    }
}

impl fmt::Display for Season {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Season {
    type Err = GridError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "DJF" | "WINTER" => Ok(Season::Djf),
            "MAM" | "SPRING" => Ok(Season::Mam),
            "JJA" | "SUMMER" => Ok(Season::Jja),
            "SON" | "AUTUMN" => Ok(Season::Son),
            "ANNUAL" | "FULLYEAR" | "FULL_YEAR" => Ok(Season::Annual),
            _ => Err(GridError::Header(format!("unknown season '{s}'"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leap_rules_per_calendar() {
        let feb29 = Date::new(1988, 2, 29);
        assert!(Calendar::Standard.is_valid(feb29));
        assert!(!Calendar::NoLeap.is_valid(feb29));
        assert!(Calendar::Day360.is_valid(Date::new(1987, 2, 30)));
        assert!(!Calendar::Standard.is_valid(Date::new(1900, 2, 29)));
        assert!(Calendar::Standard.is_valid(Date::new(2000, 2, 29)));
        assert_eq!(Calendar::Day360.days_in_year(1990), 360);
        assert_eq!(Calendar::NoLeap.days_in_year(1988), 365);
        assert_eq!(Calendar::Standard.days_in_year(1988), 366);
    }

    #[test]
    fn daily_series_rolls_over_year_end() {
        let s = Calendar::Day360.daily_series(Date::new(1990, 12, 29), 3);
        assert_eq!(s, vec![Date::new(1990, 12, 29), Date::new(1990, 12, 30), Date::new(1991, 1, 1)]);
    }

    #[test]
    fn date_parse_and_display() {
        let d: Date = "1985-03-07T12:00:00".parse().unwrap();
        assert_eq!(d, Date::new(1985, 3, 7));
        assert_eq!(d.to_string(), "1985-03-07");
        assert!("1985/03/07".parse::<Date>().is_err());
    }

    #[test]
    fn seasons_partition_the_year() {
        let mut months: Vec<u8> = Season::QUARTERS.iter().flat_map(|s| s.months().iter().copied()).collect();
        months.sort_unstable();
        assert_eq!(months, Season::Annual.months());
    }
}
