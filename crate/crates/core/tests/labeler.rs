use nalgebra::DMatrix;
use naer_core::gridio::{GridStack, LatLonGrid};
use naer_core::labeler::*;
use naer_core::synthlab::{preset_paperlike, simulate};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian(rng: &mut ChaCha8Rng, n: usize, p: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, p, |_, _| rng.sample(StandardNormal))
}

fn assert_orthonormal(b: &EofBasis) {
    let g = &b.components * b.components.transpose();
    for i in 0..b.k() {
        for j in 0..b.k() {
            let target = if i == j { 1.0 } else { 0.0 };
            assert!((g[(i, j)] - target).abs() < 1e-8, "gram[{i},{j}] = {}", g[(i, j)]);
        }
    }
    assert!(b.explained_variance.windows(2).all(|w| w[1] <= w[0] + 1e-15));
    assert!(b.explained_variance.iter().sum::<f64>() <= 1.0 + 1e-9);
}

#[test]
fn single_point_box_returns_that_cell() {
    let grid = LatLonGrid::canonical();
    let mut data = vec![0.0f32; 3 * 2048];
    for t in 0..3 {
        data[t * 2048 + 5 * 64 + 10] = t as f32 + 0.5;
    }
    let stack = GridStack::new(grid.clone(), vec!["Z500".into()], vec![0, 1, 2], data).unwrap();
    let b = BBox {
        lat_min: grid.lats[5],
        lat_max: grid.lats[5],
        lon_west: grid.lons[10],
        lon_east: grid.lons[10],
    };
    let x = extract_domain(&stack, &b, "Z500").unwrap();
    assert_eq!(x.shape(), (3, 1));
    assert_eq!(x.column(0).iter().copied().collect::<Vec<_>>(), vec![0.5, 1.5, 2.5]);
    let bad = BBox {
        lat_min: 95.0,
        ..b
    };
    assert!(extract_domain(&stack, &bad, "Z500").is_err());
}

#[test]
fn rank_one_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let u: Vec<f64> = (0..30).map(|_| rng.random_range(-2.0..2.0)).collect();
    let v: Vec<f64> = {
        let raw: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        raw.iter().map(|x| x / n).collect()
    };
    let x = DMatrix::from_fn(30, 8, |i, j| 3.0 * u[i] * v[j]);
    let b = fit_eof(&x, 1, None).unwrap();
    assert!((b.explained_variance[0] - 1.0).abs() < 1e-12);
    let dot: f64 = (0..8).map(|j| b.components[(0, j)] * v[j]).sum();
    assert!((dot.abs() - 1.0).abs() < 1e-10);
}

#[test]
fn isotropic_cloud_is_complete() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let b = fit_eof(&gaussian(&mut rng, 400, 5), 5, None).unwrap();
    assert!((b.explained_variance.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert_orthonormal(&b);
}

#[test]
fn truncation_error_matches_eigen_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = gaussian(&mut rng, 50, 20);
    let mean: Vec<f64> = (0..20).map(|j| x.column(j).mean()).collect();
    let centered = DMatrix::from_fn(50, 20, |i, j| x[(i, j)] - mean[j]);
    let mut eig: Vec<f64> = (centered.transpose() * &centered).symmetric_eigen().eigenvalues.iter().copied().collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    for k in [1, 5, 12] {
        let b = fit_eof(&x, k, None).unwrap();
        assert_orthonormal(&b);
        let scores = project(&x, &b).unwrap();
        let recon = &scores * &b.components;
        let err: f64 = (&centered - recon).iter().map(|v| v * v).sum();
        let discarded: f64 = eig[k..].iter().sum();
        assert!((err - discarded).abs() < 1e-8 * discarded, "k={k}: {err} vs {discarded}");
        let total: f64 = eig.iter().sum();
        for (ev, lam) in b.explained_variance.iter().zip(&eig) {
            assert!((ev - lam / total).abs() < 1e-10);
        }
    }
}

#[test]
fn largest_entry_is_positive() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let b = fit_eof(&gaussian(&mut rng, 60, 10), 6, None).unwrap();
    for r in 0..6 {
        let row: Vec<f64> = b.components.row(r).iter().copied().collect();
        let big = row.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        assert!(big > 0.0);
    }
}

#[test]
fn k_beyond_dimensions_is_an_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    assert!(fit_eof(&gaussian(&mut rng, 4, 10), 5, None).is_err());
    assert!(fit_eof(&gaussian(&mut rng, 40, 3), 4, None).is_err());
}

#[test]
fn projection_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = gaussian(&mut rng, 40, 7);
    let b = fit_eof(&x, 4, None).unwrap();
    let mean_rows = DMatrix::from_fn(3, 7, |_, j| b.mean[j]);
    assert!(project(&mean_rows, &b).unwrap().iter().all(|v| v.abs() < 1e-12));
    for i in 0..4 {
        let row = DMatrix::from_fn(1, 7, |_, j| b.mean[j] + b.components[(i, j)]);
        let s = project(&row, &b).unwrap();
        for k in 0..4 {
            let target = if k == i { 1.0 } else { 0.0 };
            assert!((s[(0, k)] - target).abs() < 1e-10);
        }
    }
    let s = project(&x, &b).unwrap();
    for r in 0..40 {
        let dense: f64 = (0..7).map(|j| (x[(r, j)] - b.mean[j]).powi(2)).sum();
        let mut oracle = 0.0;
        for k in 0..4 {
            let dot: f64 = (0..7).map(|j| (x[(r, j)] - b.mean[j]) * b.components[(k, j)]).sum();
            assert!((dot - s[(r, k)]).abs() < 1e-10);
            oracle += dot * dot;
        }
        assert!(oracle <= dense + 1e-12);
    }
    assert!(project(&gaussian(&mut rng, 2, 6), &b).is_err());
}

fn blobs(rng: &mut ChaCha8Rng, per: usize) -> (DMatrix<f64>, Vec<usize>) {
    let centers = [[0.0, 0.0, 0.0], [20.0, 0.0, 0.0], [0.0, 20.0, 0.0], [0.0, 0.0, 20.0]];
    let mut data = Vec::new();
    let mut truth = Vec::new();
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per {
            for v in center {
                let e: f64 = rng.sample(StandardNormal);
                data.push(v + e);
            }
            truth.push(c);
        }
    }
    (DMatrix::from_row_slice(4 * per, 3, &data), truth)
}

#[test]
fn separated_blobs_are_recovered() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (x, truth) = blobs(&mut rng, 50);
    let fit = fit_kmeans(&x, &KMeansConfig::default(), 11).unwrap();
    assert_eq!(adjusted_rand_index(&fit.labels, &truth), 1.0);
    assert!(fit.trace.windows(2).all(|w| w[1] <= w[0]));
    // Same seed, same answer.
    assert_eq!(fit_kmeans(&x, &KMeansConfig::default(), 11).unwrap(), fit);
}

#[test]
fn one_point_per_cluster_has_zero_wcss() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = gaussian(&mut rng, 4, 3);
    let fit = fit_kmeans(&x, &KMeansConfig::default(), 0).unwrap();
    assert_eq!(fit.wcss, 0.0);
}

#[test]
fn duplicated_data_gives_same_centroids() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (x, _) = blobs(&mut rng, 30);
    let doubled = DMatrix::from_fn(2 * x.nrows(), 3, |i, j| x[(i % x.nrows(), j)]);
    let mut a = fit_kmeans(&x, &KMeansConfig::default(), 1).unwrap().centers;
    let mut b = fit_kmeans(&doubled, &KMeansConfig::default(), 2).unwrap().centers;
    a.sort_by(|p, q| p.partial_cmp(q).unwrap());
    b.sort_by(|p, q| p.partial_cmp(q).unwrap());
    for (p, q) in a.iter().flatten().zip(b.iter().flatten()) {
        assert!((p - q).abs() < 1e-10);
    }
}

#[test]
fn assignment_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = gaussian(&mut rng, 1000, 5);
    let centers: Vec<Vec<f64>> = (0..4).map(|_| (0..5).map(|_| rng.sample(StandardNormal)).collect()).collect();
    let labels = assign(&x, &centers).unwrap();
    for (i, &l) in labels.iter().enumerate() {
        let d: Vec<f64> = centers
            .iter()
            .map(|c| (0..5).map(|j| (x[(i, j)] - c[j]).powi(2)).sum())
            .collect();
        let best = d.iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(l, d.iter().position(|&v| v == best).unwrap());
    }
    let on_center = DMatrix::from_row_slice(1, 5, &centers[2]);
    assert_eq!(assign(&on_center, &centers).unwrap(), vec![2]);
}

#[test]
fn equidistant_point_goes_to_center_zero() {
    let centers = vec![vec![1.0, 0.0], vec![9.0, 9.0], vec![8.0, 8.0], vec![-1.0, 0.0]];
    assert_eq!(assign(&DMatrix::zeros(1, 2), &centers).unwrap(), vec![0]);
}

proptest! {
    #[test]
    fn assignment_is_scale_equivariant(seed in any::<u64>(), lambda in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = gaussian(&mut rng, 30, 3);
        let centers: Vec<Vec<f64>> = (0..4).map(|_| (0..3).map(|_| rng.sample(StandardNormal)).collect()).collect();
        let scaled: Vec<Vec<f64>> = centers.iter().map(|c| c.iter().map(|v| v * lambda).collect()).collect();
        prop_assert_eq!(assign(&x, &centers).unwrap(), assign(&(x * lambda), &scaled).unwrap());
    }
}

fn naming_setup() -> (EofBasis, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = gaussian(&mut rng, 100, 12);
    let basis = fit_eof(&x, 6, None).unwrap();
    let centers: Vec<Vec<f64>> = (0..4).map(|_| (0..6).map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal)).collect()).collect();
    (basis, centers)
}

#[test]
fn naming_identity_and_permutation() {
    let (basis, centers) = naming_setup();
    let fields: Vec<Vec<f64>> = centers.iter().map(|c| basis.reconstruct(c)).collect();
    let (names, total) = name_clusters(&centers, &basis, &fields).unwrap();
    assert_eq!(names, Regime::ALL.to_vec());
    assert!((total - 4.0).abs() < 1e-12);
    let perm = [2, 0, 3, 1];
    let templates: Vec<Vec<f64>> = (0..4).map(|t| fields[perm.iter().position(|&p| p == t).unwrap()].clone()).collect();
    let (names, _) = name_clusters(&centers, &basis, &templates).unwrap();
    for i in 0..4 {
        assert_eq!(names[i], Regime::ALL[perm[i]]);
    }
}

#[test]
fn naming_survives_template_noise() {
    let (basis, centers) = naming_setup();
    let fields: Vec<Vec<f64>> = centers.iter().map(|c| basis.reconstruct(c)).collect();
    let (clean, _) = name_clusters(&centers, &basis, &fields).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut agree = 0;
    for _ in 0..100 {
        let noisy: Vec<Vec<f64>> = fields
            .iter()
            .map(|f| {
                let sd = (f.iter().map(|v| v * v).sum::<f64>() / f.len() as f64).sqrt() / 10.0;
                f.iter().map(|v| v + sd * rng.sample::<f64, _>(StandardNormal)).collect()
            })
            .collect();
        if name_clusters(&centers, &basis, &noisy).unwrap().0 == clean {
            agree += 1;
        }
    }
    assert!(agree >= 99, "{agree}");
}

fn synth_ari(noise: f64, days: usize, seed: u64) -> f64 {
    let mut spec = preset_paperlike();
    spec.noise_std = noise * spec.amplitude;
    spec.days = days;
    spec.seed = seed;
    let (stack, truth) = simulate(&spec).unwrap();
    let templates = spec.templates(&BBox::NAE).unwrap();
    let cfg = LabelConfig::default();
    let out = label_regimes(&stack, &templates, &cfg, seed).unwrap();
    assert_orthonormal(&out.basis);
    adjusted_rand_index(&out.series.labels, &truth.labels)
}

#[test]
fn zero_noise_synthetic_labels_are_exact() {
    assert_eq!(synth_ari(0.0, 600, 1), 1.0);
}

#[test]
fn labeling_improves_as_noise_falls() {
    let aris: Vec<f64> = [2.0, 1.0, 0.5, 0.1].iter().map(|&n| synth_ari(n, 800, 2)).collect();
    assert!(aris.windows(2).all(|w| w[1] >= w[0] - 1e-12), "{aris:?}");
    assert!(aris[3] >= 0.95, "{aris:?}");
}

#[test]
fn names_match_true_regimes() {
    let spec = {
        let mut s = preset_paperlike();
        s.days = 700;
        s
    };
    let (stack, truth) = simulate(&spec).unwrap();
    let out = label_regimes(&stack, &spec.templates(&BBox::NAE).unwrap(), &LabelConfig::default(), 3).unwrap();
    let agree = out.series.labels.iter().zip(&truth.labels).filter(|(a, b)| a == b).count();
    assert!(agree as f64 / truth.len() as f64 > 0.99);
}

#[test]
fn containers_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = {
        let mut s = preset_paperlike();
        s.days = 300;
        s
    };
    let (stack, _) = simulate(&spec).unwrap();
    let out = label_regimes(&stack, &spec.templates(&BBox::NAE).unwrap(), &LabelConfig::default(), 4).unwrap();
    let p = dir.path().join("eof.gsk");
    naer_core::gridio::write_gsk1(&p, &out.basis.to_gsk1()).unwrap();
    let back = EofBasis::from_gsk1(&naer_core::gridio::read_gsk1(&p).unwrap()).unwrap();
    assert_eq!(back, out.basis);
    let c = RegimeCentroids::from_gsk1(&out.centroids.to_gsk1()).unwrap();
    assert_eq!(c, out.centroids);
    let csv = dir.path().join("labels.csv");
    out.series.write_csv(&csv).unwrap();
    let s = RegimeSeries::read_csv(&csv).unwrap();
    assert_eq!(s.labels, out.series.labels);
    assert_eq!(s.dates, out.series.dates);
    for (a, b) in s.scores.iter().flatten().zip(out.series.scores.iter().flatten()) {
        assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0));
    }
}
