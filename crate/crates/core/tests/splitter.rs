mod common;

use std::collections::BTreeMap;
use std::io::Write;

use naer_core::calendar::{self, ymd};
use naer_core::splitter::*;
use proptest::prelude::*;

fn daily(y0: i32, y1: i32) -> Vec<i64> {
    (ymd(y0, 1, 1).unwrap()..=ymd(y1, 12, 31).unwrap()).collect()
}

fn csv_file(body: &str) -> tempfile::NamedTempFile {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    f.write_all(body.as_bytes()).unwrap();
    f
}

#[test]
fn phase_csv_loading() {
    let ok = csv_file("year,month,value\n1950,1,0.4\n1950,2,-1.1\n");
    let s = load_phase_csv(ok.path(), IndexName::Enso).unwrap();
    assert_eq!(s.len(), 2);
    assert_eq!(s.value(1950, 2), Some(-1.1));
    assert_eq!(load_phase_csv(csv_file("1950,1,0.4\n").path(), IndexName::Pdo).unwrap().len(), 1);

    let dup = load_phase_csv(csv_file("1950,1,0.4\n1950,1,0.5\n").path(), IndexName::Pdo).unwrap_err();
    assert!(dup.to_string().contains("duplicated"), "{dup}");
    let order = load_phase_csv(csv_file("year,month,value\n1950,1,0.4\n1950,2,0.1\n1949,12,0.5\n").path(), IndexName::Amo).unwrap_err();
    assert!(order.to_string().contains("row 4"), "{order}");
    let gap = load_phase_csv(csv_file("1950,1,0.4\n1950,3,0.5\n").path(), IndexName::Amo).unwrap_err();
    assert!(gap.to_string().contains("row 2"), "{gap}");
    assert!(load_phase_csv(csv_file("1950,1,abc\n").path(), IndexName::Amo).is_err());
    assert!(load_phase_csv(csv_file("1950,13,0.1\n").path(), IndexName::Amo).is_err());
    assert!(load_phase_csv(csv_file("1950,1\n").path(), IndexName::Amo).is_err());
}

#[test]
fn categorize_series() {
    let s = PhaseSeries::new(IndexName::Enso, vec![(2000, 1), (2000, 2), (2000, 3)], vec![1.2, 0.0, -0.7]).unwrap();
    assert_eq!(categorize(&s, &Thresholds::default()), vec![Phase::ElNino, Phase::Neutral, Phase::LaNina]);
}

fn pool_stats(plan: &SplitPlan) -> BTreeMap<Stratum, (Vec<usize>, usize)> {
    let mut out: BTreeMap<Stratum, (Vec<usize>, usize)> = BTreeMap::new();
    for b in &plan.blocks {
        if let Some(p) = b.pool {
            let e = out.entry(p).or_default();
            e.0.push(b.samples);
            if b.partition == Partition::Validation {
                e.1 += b.samples;
            }
        }
    }
    out
}

#[test]
fn two_equal_strata_match_subset_oracle() {
    let dates = daily(1980, 1999);
    let strata: Vec<Option<Stratum>> = dates.iter().map(|&d| Some(Stratum((calendar::year(d) % 2) as u8))).collect();
    let plan = stratified_split(&dates, &strata, &SplitConfig::default(), 17).unwrap();
    common::check_split(&plan, &dates).unwrap();
    let stats = pool_stats(&plan);
    assert_eq!(stats.len(), 2);
    for (sizes, val) in stats.values() {
        let total: usize = sizes.iter().sum();
        let target = 0.2 * total as f64;
        let best = (0u32..1 << sizes.len())
            .map(|mask| {
                let s: usize = (0..sizes.len()).filter(|i| mask >> i & 1 == 1).map(|i| sizes[i]).sum();
                (s as f64 - target).abs()
            })
            .fold(f64::INFINITY, f64::min);
        let biggest = *sizes.iter().max().unwrap() as f64;
        let dev = (*val as f64 - target).abs();
        assert!(dev <= best + biggest, "{dev} vs oracle {best}");
        assert!((*val as f64 / total as f64 - 0.2).abs() < 0.11);
    }
}

#[test]
fn same_seed_same_plan() {
    let (dates, strata) = common::random_split_case(5);
    let a = stratified_split(&dates, &strata, &SplitConfig::default(), 99).unwrap();
    let b = stratified_split(&dates, &strata, &SplitConfig::default(), 99).unwrap();
    assert_eq!(a, b);
    let back = SplitPlan::from_json(&a.to_json().unwrap()).unwrap();
    assert_eq!(back.indices(&dates), a.indices(&dates));
}

#[test]
fn dates_without_phases_stay_in_training() {
    let dates = daily(1860, 1900);
    let strata: Vec<Option<Stratum>> = dates
        .iter()
        .map(|&d| (calendar::year(d) >= 1871).then(|| Stratum((calendar::year(d) / 3 % 4) as u8)))
        .collect();
    let plan = stratified_split(&dates, &strata, &SplitConfig::default(), 1).unwrap();
    common::check_split(&plan, &dates).unwrap();
    let [_, val, _] = plan.indices(&dates);
    assert!(!val.is_empty());
    assert!(val.iter().all(|&i| calendar::year(dates[i]) >= 1871));
}

#[test]
fn sparse_stratum_is_merged() {
    let dates = daily(1970, 1989);
    let strata: Vec<Option<Stratum>> = dates
        .iter()
        .map(|&d| Some(if calendar::year(d) == 1975 { Stratum(11) } else { Stratum(10) }))
        .collect();
    let plan = stratified_split(&dates, &strata, &SplitConfig::default(), 2).unwrap();
    let lone = plan.blocks.iter().find(|b| b.stratum == Some(Stratum(11))).unwrap();
    assert_eq!(lone.pool, Some(Stratum(10)));
    common::check_split(&plan, &dates).unwrap();
}

#[test]
fn per_pool_sizes_vary_by_at_most_one_block_across_seeds() {
    let (dates, strata) = common::random_split_case(12);
    let plans: Vec<SplitPlan> = (0..6).map(|s| stratified_split(&dates, &strata, &SplitConfig::default(), s).unwrap()).collect();
    let stats: Vec<_> = plans.iter().map(pool_stats).collect();
    for (pool, (sizes, _)) in &stats[0] {
        let biggest = *sizes.iter().max().unwrap();
        let vals: Vec<usize> = stats.iter().map(|s| s[pool].1).collect();
        let spread = vals.iter().max().unwrap() - vals.iter().min().unwrap();
        assert!(spread <= biggest, "pool {}: {vals:?}", pool.0);
    }
}

#[test]
fn bad_inputs() {
    let dates = daily(1990, 1999);
    let strata = vec![Some(Stratum(0)); dates.len()];
    assert!(stratified_split(&dates, &strata[1..], &SplitConfig::default(), 0).is_err());
    let cfg = SplitConfig {
        val_frac: 1.0,
        ..Default::default()
    };
    assert!(stratified_split(&dates, &strata, &cfg, 0).is_err());
    let short = daily(2009, 2012);
    assert!(stratified_split(&short, &vec![Some(Stratum(0)); short.len()], &SplitConfig::default(), 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn random_phase_series_split_integrity(case in any::<u64>(), seed in any::<u64>()) {
        let (dates, strata) = common::random_split_case(case);
        let plan = stratified_split(&dates, &strata, &SplitConfig::default(), seed).unwrap();
        if let Err(e) = common::check_split(&plan, &dates) {
            prop_assert!(false, "{}", e);
        }
    }
}
