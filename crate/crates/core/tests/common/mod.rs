#![allow(dead_code)]

use std::collections::BTreeMap;

use naer_core::calendar;
use naer_core::splitter::*;
use naer_core::synthlab::phase_series;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn series(index: IndexName, rows: Vec<(i32, u32, f64)>) -> PhaseSeries {
    let months = rows.iter().map(|r| (r.0, r.1)).collect();
    let values = rows.iter().map(|r| r.2).collect();
    PhaseSeries::new(index, months, values).unwrap()
}

/// Random winter (or all-year) date set with AR(1) teleconnection indices
/// that start some years after the first date.
pub fn random_split_case(seed: u64) -> (Vec<i64>, Vec<Option<Stratum>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y0 = rng.random_range(1850..1995);
    let y1 = rng.random_range(2019..2023);
    let winter_only = rng.random_bool(0.7);
    let dates: Vec<i64> = (calendar::ymd(y0, 1, 1).unwrap()..=calendar::ymd(y1, 12, 31).unwrap())
        .filter(|&d| !winter_only || calendar::is_winter(d))
        .collect();
    let first = y0 + rng.random_range(0..25);
    let phi = rng.random_range(0.6..0.99);
    let tele = Teleconnections {
        enso: series(IndexName::Enso, phase_series(first, y1, phi, &mut rng)),
        pdo: series(IndexName::Pdo, phase_series(first, y1, phi, &mut rng)),
        amo: series(IndexName::Amo, phase_series(first, y1, phi, &mut rng)),
        thresholds: Thresholds::default(),
    };
    let strata = tele.strata(&dates);
    (dates, strata)
}

/// Checks disjointness, coverage, validation block length, the untouched
/// test range and the per-pool validation share.
pub fn check_split(plan: &SplitPlan, dates: &[i64]) -> Result<(), String> {
    let cfg = &plan.config;
    let (t0, t1) = cfg.test_range().map_err(|e| e.to_string())?;
    let ranges = plan.ranges();
    for w in ranges.windows(2) {
        if w[0].1 >= w[1].0 {
            return Err(format!("blocks overlap: {:?} {:?}", w[0], w[1]));
        }
    }
    for (r, b) in ranges.iter().zip(&plan.blocks) {
        if r.0 <= t1 && r.1 >= t0 {
            return Err(format!("block {:?} touches the test range", r));
        }
        if b.partition == Partition::Validation && r.1 - r.0 + 1 < cfg.min_block {
            return Err(format!("validation block {:?} shorter than {} days", r, cfg.min_block));
        }
        if b.stratum.is_none() && b.partition != Partition::Train {
            return Err(format!("block {:?} without phase data left training", r));
        }
    }

    let mut samples = vec![0usize; plan.blocks.len()];
    for &d in dates {
        let k = ranges.partition_point(|r| r.1 < d);
        let held = ranges.get(k).is_some_and(|r| r.0 <= d);
        if held == (t0..=t1).contains(&d) {
            return Err(format!("date {} is in {} partitions", calendar::format(d), if held { 2 } else { 0 }));
        }
        if held {
            samples[k] += 1;
        }
    }
    let [train, val, test] = plan.indices(dates);
    if train.len() + val.len() + test.len() != dates.len() {
        return Err("partition indices do not cover every date".into());
    }
    let expect_test = dates.iter().filter(|d| (t0..=t1).contains(*d)).count();
    if test.len() != expect_test {
        return Err(format!("test partition has {} dates, expected {expect_test}", test.len()));
    }
    if samples.iter().zip(&plan.blocks).any(|(a, b)| *a != b.samples) {
        return Err("block sample counts disagree with the dates".into());
    }

    // Per pool: |validation − frac·total| ≤ largest block.
    let mut pools: BTreeMap<Stratum, (usize, usize, usize)> = BTreeMap::new();
    for (k, b) in plan.blocks.iter().enumerate() {
        let (Some(pool), true) = (b.pool, ranges[k].1 - ranges[k].0 + 1 >= cfg.min_block) else {
            continue;
        };
        let e = pools.entry(pool).or_default();
        e.0 += b.samples;
        if b.partition == Partition::Validation {
            e.1 += b.samples;
        }
        e.2 = e.2.max(b.samples);
    }
    for (s, (total, v, biggest)) in pools {
        let dev = (v as f64 - cfg.val_frac * total as f64).abs();
        if dev > biggest as f64 {
            return Err(format!("stratum {} validation {v} of {total} deviates by {dev:.0} > {biggest}", s.0));
        }
    }
    Ok(())
}
