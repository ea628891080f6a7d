use naer_core::gridio::LatLonGrid;
use naer_core::labeler::{adjusted_rand_index, Regime};
use naer_core::metrics::persistence_forecast;
use naer_core::synthlab::*;
use naer_tensor::nn::{class_weights, WeightMode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn freq_of(pi: &[f64], name: &str) -> f64 {
    let r = Regime::ALL.iter().position(|r| r.name() == name).unwrap();
    pi[r]
}

#[test]
fn paperlike_stationary_by_name() {
    let pi = stationary_distribution(&preset_paperlike().transition).unwrap();
    for (name, want) in [("NAO+", 0.32), ("SB", 0.28), ("NAO-", 0.19), ("AR", 0.21)] {
        assert!((freq_of(&pi, name) - want).abs() < 1e-6, "{name}");
    }
}

#[test]
fn transitions_match_over_fifty_thousand_days() {
    let p = preset_paperlike().transition;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let path = simulate_chain(&p, 50_000, &mut rng).unwrap();
    let mut counts = [[0usize; 4]; 4];
    for w in path.windows(2) {
        counts[w[0]][w[1]] += 1;
    }
    for i in 0..4 {
        let row: usize = counts[i].iter().sum();
        for j in 0..4 {
            let f = counts[i][j] as f64 / row as f64;
            assert!((f - p[i][j]).abs() <= 0.02, "{i}->{j}: {f} vs {}", p[i][j]);
        }
    }
}

#[test]
fn frequencies_match_over_hundred_thousand_days() {
    let p = preset_paperlike().transition;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let path = simulate_chain(&p, 100_000, &mut rng).unwrap();
    let mut counts = [0usize; 4];
    for &r in &path {
        counts[r] += 1;
    }
    let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / 1e5).collect();
    for (name, want) in [("NAO+", 0.32), ("SB", 0.28), ("NAO-", 0.19), ("AR", 0.21)] {
        assert!((freq_of(&freq, name) - want).abs() <= 0.01, "{name}");
    }
}

#[test]
fn literal_class_weights_by_name() {
    let counts: Vec<usize> = PAPER_FREQUENCIES.iter().map(|f| (f * 1e4).round() as usize).collect();
    let w = class_weights(&counts, WeightMode::Literal).unwrap();
    for (name, want) in [("NAO+", 1.0), ("SB", 0.875), ("NAO-", 0.594), ("AR", 0.656)] {
        assert!((freq_of(&w, name) - want).abs() < 5e-4, "{name}");
    }
}

#[test]
fn invalid_transition_rejected() {
    let mut spec = preset_paperlike();
    spec.transition[2] = [0.5, 0.5, 0.5, 0.0];
    assert!(simulate(&spec).is_err());
    spec.transition[2] = [1.2, -0.2, 0.0, 0.0];
    assert!(simulate(&spec).is_err());
}

fn small(seed: u64) -> SynthSpec {
    let mut spec = preset_paperlike();
    spec.grid = LatLonGrid::regular(22.5);
    spec.days = 300;
    spec.seed = seed;
    spec
}

#[test]
fn reproducible_per_seed() {
    let (a, la) = simulate(&small(4)).unwrap();
    let (b, lb) = simulate(&small(4)).unwrap();
    assert_eq!(a, b);
    assert_eq!(la.labels, lb.labels);
    let (c, _) = simulate(&small(5)).unwrap();
    assert_ne!(a.data, c.data);
}

#[test]
fn identity_chain_is_perfectly_persistent() {
    let mut spec = small(2);
    spec.transition = [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]];
    spec.noise_std = 0.0;
    let (_, labels) = simulate(&spec).unwrap();
    for lead in [1, 5, 15] {
        let d = persistence_forecast(&labels, lead);
        let hits = d.predicted.iter().zip(&d.truth).filter(|(a, b)| a == b).count();
        assert_eq!(hits, d.truth.len());
    }
}

#[test]
fn winter_calendar_and_shape() {
    let spec = small(1);
    let (stack, labels) = simulate(&spec).unwrap();
    assert_eq!(stack.len(), 300);
    assert_eq!(stack.variables.len(), 6);
    assert!(stack.dates.iter().all(|&d| naer_core::calendar::is_winter(d)));
    assert!(stack.dates.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(labels.dates, stack.dates);
}

#[test]
fn prototypes_are_distinguishable() {
    let spec = preset_paperlike();
    let protos = spec.prototypes();
    for i in 0..4 {
        for j in i + 1..4 {
            let d: f64 = protos[i].iter().zip(&protos[j]).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>().sqrt();
            assert!(d > 5.0 * spec.noise_std, "{i},{j}: {d}");
        }
    }
}

#[test]
fn ari_helper_sanity() {
    assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]), 1.0);
}
