//! Train/validation splitting stratified by ENSO, PDO and AMO phase.
//!
//! Non-test dates are cut into contiguous blocks spanning at least
//! `min_block` calendar days. Each block takes the majority joint phase of its
//! days, and blocks are drawn into validation stratum by stratum until every
//! stratum holds roughly `val_frac` of its samples there. The 2011-2018 test
//! period is never touched, and days without teleconnection data always train.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calendar;
use crate::error::{invalid, CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum IndexName {
    #[serde(rename = "ENSO")]
    Enso,
    #[serde(rename = "PDO")]
    Pdo,
    #[serde(rename = "AMO")]
    Amo,
}

impl fmt::Display for IndexName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IndexName::Enso => "ENSO",
            IndexName::Pdo => "PDO",
            IndexName::Amo => "AMO",
        })
    }
}

impl FromStr for IndexName {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "ENSO" => Ok(IndexName::Enso),
            "PDO" => Ok(IndexName::Pdo),
            "AMO" => Ok(IndexName::Amo),
            _ => invalid(format!("unknown index {s:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    ElNino,
    Neutral,
    LaNina,
    Positive,
    Negative,
}

/// Monthly index values, one per consecutive month.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseSeries {
    pub index: IndexName,
    pub months: Vec<(i32, u32)>,
    pub values: Vec<f64>,
}

fn month_number(year: i32, month: u32) -> i64 {
    year as i64 * 12 + month as i64 - 1
}

impl PhaseSeries {
    pub fn new(index: IndexName, months: Vec<(i32, u32)>, values: Vec<f64>) -> Result<Self> {
        let rows: Vec<usize> = (1..=months.len()).collect();
        Self::with_rows(index, months, values, &rows)
    }

    /// `rows[i]` is the source line reported when entry `i` is bad.
    fn with_rows(index: IndexName, months: Vec<(i32, u32)>, values: Vec<f64>, rows: &[usize]) -> Result<Self> {
        if months.len() != values.len() {
            return Err(CoreError::DimensionMismatch(format!("{} months but {} values", months.len(), values.len())));
        }
        for (i, w) in months.windows(2).enumerate() {
            let (a, b) = (month_number(w[0].0, w[0].1), month_number(w[1].0, w[1].1));
            let row = rows[i + 1];
            if b == a {
                return invalid(format!("row {row}: duplicated month {}-{:02}", w[1].0, w[1].1));
            }
            if b < a {
                return invalid(format!("row {row}: {}-{:02} is out of order", w[1].0, w[1].1));
            }
            if b > a + 1 {
                return invalid(format!("row {row}: gap before {}-{:02}", w[1].0, w[1].1));
            }
        }
        Ok(Self { index, months, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn first_year(&self) -> Option<i32> {
        self.months.first().map(|m| m.0)
    }

    pub fn value(&self, year: i32, month: u32) -> Option<f64> {
        let (y0, m0) = *self.months.first()?;
        let off = month_number(year, month) - month_number(y0, m0);
        if off < 0 {
            return None;
        }
        self.values.get(off as usize).copied()
    }
}

/// Reads `year,month,value` rows. A header line is optional.
pub fn load_phase_csv(path: &Path, index: IndexName) -> Result<PhaseSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut months = Vec::new();
    let mut values = Vec::new();
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        if i == 0 && rec.get(0).is_some_and(|f| f.eq_ignore_ascii_case("year")) {
            continue;
        }
        if rec.len() != 3 {
            return Err(CoreError::Format(format!("row {row}: expected 3 fields, found {}", rec.len())));
        }
        let bad = |what: &str| CoreError::Format(format!("row {row}: cannot parse {what}"));
        let y: i32 = rec[0].parse().map_err(|_| bad("year"))?;
        let m: u32 = rec[1].parse().map_err(|_| bad("month"))?;
        let v: f64 = rec[2].parse().map_err(|_| bad("value"))?;
        if !(1..=12).contains(&m) {
            return Err(CoreError::Format(format!("row {row}: month {m} out of range")));
        }
        months.push((y, m));
        values.push(v);
        rows.push(row);
    }
    PhaseSeries::with_rows(index, months, values, &rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    /// El Niño above `+enso`, La Niña below `-enso`.
    pub enso: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { enso: 0.5 }
    }
}

pub fn categorize_value(index: IndexName, value: f64, thr: &Thresholds) -> Phase {
    match index {
        IndexName::Enso if value > thr.enso => Phase::ElNino,
        IndexName::Enso if value < -thr.enso => Phase::LaNina,
        IndexName::Enso => Phase::Neutral,
        _ if value >= 0.0 => Phase::Positive,
        _ => Phase::Negative,
    }
}

pub fn categorize(series: &PhaseSeries, thr: &Thresholds) -> Vec<Phase> {
    series.values.iter().map(|&v| categorize_value(series.index, v, thr)).collect()
}

/// Joint phase, numbered `enso * 4 + pdo * 2 + amo` with El Niño/Neutral/La
/// Niña as 0/1/2 and positive/negative as 0/1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Stratum(pub u8);

pub const NUM_STRATA: usize = 12;

impl Stratum {
    pub fn from_phases(enso: Phase, pdo: Phase, amo: Phase) -> Result<Self> {
        let e = match enso {
            Phase::ElNino => 0,
            Phase::Neutral => 1,
            Phase::LaNina => 2,
            p => return invalid(format!("{p:?} is not an ENSO phase")),
        };
        let sign = |p: Phase| match p {
            Phase::Positive => Ok(0),
            Phase::Negative => Ok(1),
            p => invalid(format!("{p:?} is not a sign phase")),
        };
        Ok(Stratum(e * 4 + sign(pdo)? * 2 + sign(amo)?))
    }

    fn parts(self) -> [i32; 3] {
        [(self.0 / 4) as i32, ((self.0 / 2) % 2) as i32, (self.0 % 2) as i32]
    }

    fn distance(self, other: Stratum) -> i32 {
        self.parts().iter().zip(other.parts()).map(|(a, b)| (a - b).abs()).sum()
    }
}

/// The three index series used for stratification.
#[derive(Clone, Debug)]
pub struct Teleconnections {
    pub enso: PhaseSeries,
    pub pdo: PhaseSeries,
    pub amo: PhaseSeries,
    pub thresholds: Thresholds,
}

impl Teleconnections {
    /// Stratum of each date, `None` where any index is missing.
    pub fn strata(&self, dates: &[i64]) -> Vec<Option<Stratum>> {
        dates
            .iter()
            .map(|&d| {
                let (y, m) = (calendar::year(d), calendar::month(d));
                let e = self.enso.value(y, m)?;
                let p = self.pdo.value(y, m)?;
                let a = self.amo.value(y, m)?;
                let t = &self.thresholds;
                Stratum::from_phases(
                    categorize_value(IndexName::Enso, e, t),
                    categorize_value(IndexName::Pdo, p, t),
                    categorize_value(IndexName::Amo, a, t),
                )
                .ok()
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Validation,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub val_frac: f64,
    pub min_block: i64,
    pub test_start: String,
    pub test_end: String,
    /// Minimum number of `min_block` spans outside the test range.
    pub min_years: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            val_frac: 0.2,
            min_block: 365,
            test_start: "2011-01-01".into(),
            test_end: "2018-12-31".into(),
            min_years: 5,
        }
    }
}

impl SplitConfig {
    pub fn test_range(&self) -> Result<(i64, i64)> {
        let (a, b) = (calendar::parse(&self.test_start)?, calendar::parse(&self.test_end)?);
        if b < a {
            return invalid("test range ends before it starts");
        }
        Ok((a, b))
    }
}

/// Contiguous date range `[start, end]` assigned to one partition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub start: String,
    pub end: String,
    pub partition: Partition,
    /// `None` for days without teleconnection data.
    pub stratum: Option<Stratum>,
    /// Stratum after merging sparse strata.
    pub pool: Option<Stratum>,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub config: SplitConfig,
    pub blocks: Vec<Block>,
    #[serde(skip)]
    ranges: Vec<(i64, i64)>,
}

impl SplitPlan {
    fn index_ranges(&mut self) -> Result<()> {
        self.ranges = self
            .blocks
            .iter()
            .map(|b| Ok((calendar::parse(&b.start)?, calendar::parse(&b.end)?)))
            .collect::<Result<_>>()?;
        Ok(())
    }

    pub fn ranges(&self) -> &[(i64, i64)] {
        &self.ranges
    }

    /// Partition of a date; `None` if no block covers it.
    pub fn partition_of(&self, date: i64) -> Option<Partition> {
        let (t0, t1) = self.config.test_range().ok()?;
        if (t0..=t1).contains(&date) {
            return Some(Partition::Test);
        }
        let i = self.ranges.partition_point(|r| r.1 < date);
        self.ranges
            .get(i)
            .filter(|r| r.0 <= date)
            .map(|_| self.blocks[i].partition)
    }

    /// Indices of `dates` in train, validation and test.
    pub fn indices(&self, dates: &[i64]) -> [Vec<usize>; 3] {
        let mut out = [Vec::new(), Vec::new(), Vec::new()];
        for (i, &d) in dates.iter().enumerate() {
            match self.partition_of(d) {
                Some(Partition::Train) => out[0].push(i),
                Some(Partition::Validation) => out[1].push(i),
                Some(Partition::Test) => out[2].push(i),
                None => {}
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let mut plan: SplitPlan = serde_json::from_str(s)?;
        plan.index_ranges()?;
        Ok(plan)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

struct RawBlock {
    start: i64,
    end: i64,
    members: Vec<usize>,
    stratum: Option<Stratum>,
}

/// Cuts a sorted run of dates into pieces spanning at least `min_block`
/// days; a short tail joins the previous piece.
fn chunk(run: &[(i64, usize)], min_block: i64, run_end: i64) -> Vec<(i64, i64, Vec<usize>)> {
    let mut out: Vec<(i64, i64, Vec<usize>)> = Vec::new();
    for &(d, i) in run {
        match out.last_mut() {
            Some(last) if d - last.0 < min_block => last.2.push(i),
            _ => out.push((d, d, vec![i])),
        }
    }
    for k in 1..out.len() {
        out[k - 1].1 = out[k].0 - 1;
    }
    if let Some(last) = out.last_mut() {
        last.1 = run_end;
    }
    if out.len() > 1 && out[out.len() - 1].1 - out[out.len() - 1].0 + 1 < min_block {
        let tail = out.pop().expect("nonempty");
        let last = out.last_mut().expect("nonempty");
        last.1 = tail.1;
        last.2.extend(tail.2);
    }
    out
}

fn majority(strata: &[Option<Stratum>], members: &[usize]) -> Option<Stratum> {
    let mut counts: BTreeMap<Stratum, usize> = BTreeMap::new();
    for &i in members {
        *counts.entry(strata[i]?).or_default() += 1;
    }
    let best = counts.values().copied().max()?;
    counts.into_iter().find(|&(_, c)| c == best).map(|(s, _)| s)
}

/// Picks a subset of `sizes` (visited in `order`) whose sum is close to
/// `target`, accepting a block only if it brings the sum closer.
fn greedy_pick(sizes: &[usize], order: &[usize], target: f64) -> Vec<usize> {
    let mut total = 0.0;
    let mut picked = Vec::new();
    for &i in order {
        let next = total + sizes[i] as f64;
        if (next - target).abs() < (total - target).abs() {
            total = next;
            picked.push(i);
        }
    }
    picked
}

pub fn stratified_split(dates: &[i64], strata: &[Option<Stratum>], cfg: &SplitConfig, seed: u64) -> Result<SplitPlan> {
    if dates.len() != strata.len() {
        return Err(CoreError::DimensionMismatch(format!("{} dates but {} strata", dates.len(), strata.len())));
    }
    if !(cfg.val_frac > 0.0 && cfg.val_frac < 1.0) {
        return invalid(format!("val_frac must lie in (0, 1), got {}", cfg.val_frac));
    }
    if cfg.min_block < 1 {
        return invalid("min_block must be positive");
    }
    let (t0, t1) = cfg.test_range()?;
    let mut order: Vec<usize> = (0..dates.len()).filter(|&i| !(t0..=t1).contains(&dates[i])).collect();
    order.sort_by_key(|&i| dates[i]);
    if order.windows(2).any(|w| dates[w[0]] == dates[w[1]]) {
        return invalid("duplicate dates");
    }
    let before: Vec<(i64, usize)> = order.iter().filter(|&&i| dates[i] < t0).map(|&i| (dates[i], i)).collect();
    let after: Vec<(i64, usize)> = order.iter().filter(|&&i| dates[i] > t1).map(|&i| (dates[i], i)).collect();
    let spans: usize = [&before, &after]
        .iter()
        .filter(|r| !r.is_empty())
        .map(|r| chunk(r, cfg.min_block, r[r.len() - 1].0).len())
        .sum();
    if spans < cfg.min_years {
        return invalid(format!(
            "only {spans} block(s) of {} days outside the test range, need {}",
            cfg.min_block, cfg.min_years
        ));
    }

    // Runs are maximal stretches with or without teleconnection data.
    let mut raw: Vec<RawBlock> = Vec::new();
    for side in [&before, &after] {
        let mut s = 0;
        while s < side.len() {
            let known = strata[side[s].1].is_some();
            let mut e = s;
            while e + 1 < side.len() && strata[side[e + 1].1].is_some() == known {
                e += 1;
            }
            let run_end = if e + 1 < side.len() { side[e + 1].0 - 1 } else { side[e].0 };
            for (start, end, members) in chunk(&side[s..=e], cfg.min_block, run_end) {
                let stratum = if known { majority(strata, &members) } else { None };
                raw.push(RawBlock {
                    start,
                    end,
                    members,
                    stratum,
                });
            }
            s = e + 1;
        }
    }

    let eligible = |b: &RawBlock| b.stratum.is_some() && b.end - b.start + 1 >= cfg.min_block;
    let mut per: BTreeMap<Stratum, Vec<usize>> = BTreeMap::new();
    for (i, b) in raw.iter().enumerate() {
        if eligible(b) {
            per.entry(b.stratum.expect("eligible")).or_default().push(i);
        }
    }
    let rich: Vec<Stratum> = per.iter().filter(|(_, v)| v.len() >= 2).map(|(s, _)| *s).collect();
    let mut pool: BTreeMap<Stratum, Stratum> = per.keys().map(|&s| (s, s)).collect();
    for (&s, v) in &per {
        if v.len() >= 2 {
            continue;
        }
        let target = rich
            .iter()
            .copied()
            .min_by_key(|r| (r.distance(s), *r))
            .or_else(|| per.keys().copied().next());
        let target = target.expect("at least one stratum");
        if target != s {
            log::warn!("stratum {} has {} block(s); merged into stratum {}", s.0, v.len(), target.0);
        }
        pool.insert(s, target);
    }
    let mut pools: BTreeMap<Stratum, Vec<usize>> = BTreeMap::new();
    for (&s, v) in &per {
        pools.entry(pool[&s]).or_default().extend(v.iter().copied());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut validation = vec![false; raw.len()];
    for members in pools.values_mut() {
        members.sort_unstable();
        let sizes: Vec<usize> = members.iter().map(|&i| raw[i].members.len()).collect();
        let total: usize = sizes.iter().sum();
        let mut visit: Vec<usize> = (0..members.len()).collect();
        visit.shuffle(&mut rng);
        for k in greedy_pick(&sizes, &visit, cfg.val_frac * total as f64) {
            validation[members[k]] = true;
        }
    }

    let blocks = raw
        .iter()
        .enumerate()
        .map(|(i, b)| Block {
            start: calendar::format(b.start),
            end: calendar::format(b.end),
            partition: if validation[i] { Partition::Validation } else { Partition::Train },
            stratum: b.stratum,
            pool: b.stratum.map(|s| pool.get(&s).copied().unwrap_or(s)),
            samples: b.members.len(),
        })
        .collect();
    let mut plan = SplitPlan {
        seed,
        config: cfg.clone(),
        blocks,
        ranges: Vec::new(),
    };
    plan.index_ranges()?;
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn daily(y0: i32, y1: i32) -> Vec<i64> {
        (calendar::ymd(y0, 1, 1).unwrap()..=calendar::ymd(y1, 12, 31).unwrap()).collect()
    }

    #[test]
    fn categorize_examples() {
        let t = Thresholds::default();
        assert_eq!(categorize_value(IndexName::Enso, 1.2, &t), Phase::ElNino);
        assert_eq!(categorize_value(IndexName::Enso, 0.0, &t), Phase::Neutral);
        assert_eq!(categorize_value(IndexName::Enso, -0.6, &t), Phase::LaNina);
        assert_eq!(categorize_value(IndexName::Pdo, -0.3, &t), Phase::Negative);
        assert_eq!(categorize_value(IndexName::Amo, 0.3, &t), Phase::Positive);
    }

    #[test]
    fn strata_are_distinct() {
        let mut seen = std::collections::HashSet::new();
        for e in [Phase::ElNino, Phase::Neutral, Phase::LaNina] {
            for p in [Phase::Positive, Phase::Negative] {
                for a in [Phase::Positive, Phase::Negative] {
                    seen.insert(Stratum::from_phases(e, p, a).unwrap());
                }
            }
        }
        assert_eq!(seen.len(), NUM_STRATA);
    }

    #[test]
    fn series_validation() {
        assert!(PhaseSeries::new(IndexName::Pdo, vec![(1900, 12), (1901, 1)], vec![0.0, 1.0]).is_ok());
        let dup = PhaseSeries::new(IndexName::Pdo, vec![(1900, 1), (1900, 1)], vec![0.0, 1.0]);
        assert!(dup.unwrap_err().to_string().contains("duplicated"));
        let gap = PhaseSeries::new(IndexName::Pdo, vec![(1900, 1), (1900, 3)], vec![0.0, 1.0]);
        assert!(gap.unwrap_err().to_string().contains("gap"));
        let s = PhaseSeries::new(IndexName::Pdo, vec![(1900, 11), (1900, 12)], vec![0.5, 1.5]).unwrap();
        assert_eq!(s.value(1900, 12), Some(1.5));
        assert_eq!(s.value(1900, 10), None);
        assert_eq!(s.value(1901, 1), None);
    }

    #[test]
    fn single_stratum_ten_years() {
        let dates = daily(1990, 1999);
        let strata = vec![Some(Stratum(0)); dates.len()];
        let plan = stratified_split(&dates, &strata, &SplitConfig::default(), 3).unwrap();
        assert_eq!(plan.blocks.len(), 10);
        let val = plan.blocks.iter().filter(|b| b.partition == Partition::Validation).count();
        assert_eq!(val, 2);
    }

    #[test]
    fn too_short_is_rejected() {
        let dates = daily(2008, 2012);
        let strata = vec![Some(Stratum(0)); dates.len()];
        assert!(stratified_split(&dates, &strata, &SplitConfig::default(), 0).is_err());
    }

    #[test]
    fn plan_json_round_trip() {
        let dates = daily(1990, 2020);
        let strata: Vec<_> = dates.iter().map(|&d| Some(Stratum((calendar::year(d) % 3) as u8))).collect();
        let plan = stratified_split(&dates, &strata, &SplitConfig::default(), 9).unwrap();
        let back = SplitPlan::from_json(&plan.to_json().unwrap()).unwrap();
        assert_eq!(back, plan);
        assert_eq!(back.ranges(), plan.ranges());
        assert_eq!(plan.partition_of(calendar::ymd(2015, 6, 1).unwrap()), Some(Partition::Test));
    }
}
