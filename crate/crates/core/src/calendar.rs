//! Dates are stored as days since 1970-01-01.

use chrono::{Datelike, Duration, NaiveDate};

use crate::error::{CoreError, Result};

fn epoch() -> NaiveDate {
    NaiveDate::from_ymd_opt(1970, 1, 1).expect("valid epoch")
}

pub fn to_date(day: i64) -> NaiveDate {
    epoch() + Duration::days(day)
}

pub fn from_date(date: NaiveDate) -> i64 {
    (date - epoch()).num_days()
}

pub fn ymd(year: i32, month: u32, day: u32) -> Result<i64> {
    NaiveDate::from_ymd_opt(year, month, day)
        .map(from_date)
        .ok_or_else(|| CoreError::InvalidArgument(format!("no such date {year}-{month:02}-{day:02}")))
}

pub fn parse(s: &str) -> Result<i64> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d")
        .map(from_date)
        .map_err(|e| CoreError::InvalidArgument(format!("bad date {s:?}: {e}")))
}

pub fn format(day: i64) -> String {
    to_date(day).format("%Y-%m-%d").to_string()
}

pub fn year(day: i64) -> i32 {
    to_date(day).year()
}

/// Calendar month, 1-based.
pub fn month(day: i64) -> u32 {
    to_date(day).month()
}

/// Extended boreal winter: 15 November to 31 March inclusive.
pub fn is_winter(day: i64) -> bool {
    let d = to_date(day);
    match d.month() {
        12 | 1 | 2 | 3 => true,
        11 => d.day() >= 15,
        _ => false,
    }
}

/// ISO week number with week 53 folded into 52, giving 1..=52.
pub fn week_of_year(day: i64) -> u32 {
    to_date(day).iso_week().week().min(52)
}

/// Index pairs `(i, j)` with `dates[j] == dates[i] + lead`. `dates` must be
/// strictly increasing.
pub fn lead_pairs(dates: &[i64], lead: i64) -> Vec<(usize, usize)> {
    dates
        .iter()
        .enumerate()
        .filter_map(|(i, &d)| dates.binary_search(&(d + lead)).ok().map(|j| (i, j)))
        .collect()
}
