//! Regime labeling: Z500 anomalies over the NAE box are projected onto
//! their leading EOFs, clustered into four regimes with k-means, and every
//! day is assigned to the nearest centroid.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use naer_tensor::nn::NamedArray;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calendar;
use crate::error::{invalid, CoreError, Result};
use crate::gridio::{GridStack, Gsk1, LatLonGrid};
use crate::seeds::split_mix64;

/// The four NAE winter regimes, in class-index order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Regime {
    #[serde(rename = "NAO+")]
    NaoPlus,
    #[serde(rename = "NAO-")]
    NaoMinus,
    #[serde(rename = "SB")]
    ScandinavianBlocking,
    #[serde(rename = "AR")]
    AtlanticRidge,
}

impl Regime {
    pub const ALL: [Regime; 4] = [
        Regime::NaoPlus,
        Regime::NaoMinus,
        Regime::ScandinavianBlocking,
        Regime::AtlanticRidge,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Regime::NaoPlus => "NAO+",
            Regime::NaoMinus => "NAO-",
            Regime::ScandinavianBlocking => "SB",
            Regime::AtlanticRidge => "AR",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| CoreError::InvalidArgument(format!("unknown regime {s:?}")))
    }
}

/// Latitude/longitude box in degrees. `lon_west > lon_east` wraps through
/// the prime meridian.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_west: f64,
    pub lon_east: f64,
}

impl BBox {
    /// 90°W–30°E, 20°–80°N.
    pub const NAE: BBox = BBox {
        lat_min: 20.0,
        lat_max: 80.0,
        lon_west: 270.0,
        lon_east: 30.0,
    };

    pub const GLOBE: BBox = BBox {
        lat_min: -90.0,
        lat_max: 90.0,
        lon_west: 0.0,
        lon_east: 360.0,
    };

    fn contains_lon(&self, lon: f64) -> bool {
        if self.lon_west <= self.lon_east {
            lon >= self.lon_west && lon <= self.lon_east
        } else {
            lon >= self.lon_west || lon <= self.lon_east
        }
    }
}

/// Flattened grid indices inside `bbox`. Rows follow the grid's latitude
/// order; within a row, longitudes run eastward from `lon_west`, wrapping
/// through 0°.
pub fn domain_columns(grid: &LatLonGrid, bbox: &BBox) -> Result<Vec<usize>> {
    if bbox.lat_min > bbox.lat_max || bbox.lat_min < -90.0 || bbox.lat_max > 90.0 {
        return Err(CoreError::Grid(format!("invalid latitude range {bbox:?}")));
    }
    let rows: Vec<usize> = (0..grid.ny())
        .filter(|&i| grid.lats[i] >= bbox.lat_min - 1e-9 && grid.lats[i] <= bbox.lat_max + 1e-9)
        .collect();
    let mut cols: Vec<usize> = (0..grid.nx()).filter(|&j| bbox.contains_lon(grid.lons[j])).collect();
    cols.sort_by(|&a, &b| {
        let ka = (grid.lons[a] - bbox.lon_west).rem_euclid(360.0);
        let kb = (grid.lons[b] - bbox.lon_west).rem_euclid(360.0);
        ka.total_cmp(&kb)
    });
    if rows.is_empty() || cols.is_empty() {
        return Err(CoreError::Grid(format!("box {bbox:?} selects no gridpoints")));
    }
    Ok(rows
        .iter()
        .flat_map(|&i| cols.iter().map(move |&j| i * grid.nx() + j))
        .collect())
}

/// Days × gridpoints matrix of `variable` restricted to `bbox`.
pub fn extract_domain(anoms: &GridStack, bbox: &BBox, variable: &str) -> Result<DMatrix<f64>> {
    let v = anoms.variable_index(variable)?;
    let cols = domain_columns(&anoms.grid, bbox)?;
    Ok(DMatrix::from_fn(anoms.len(), cols.len(), |t, c| {
        anoms.field(t, v)[cols[c]] as f64
    }))
}

/// `√cos(lat)` per domain column, for optional area weighting.
pub fn sqrt_cos_weights(grid: &LatLonGrid, bbox: &BBox) -> Result<Vec<f64>> {
    Ok(domain_columns(grid, bbox)?
        .into_iter()
        .map(|idx| grid.lats[idx / grid.nx()].to_radians().cos().max(0.0).sqrt())
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EofBasis {
    pub mean: Vec<f64>,
    /// `k × p`, one orthonormal component per row.
    pub components: DMatrix<f64>,
    pub explained_variance: Vec<f64>,
    /// Column weights applied after centering, if any.
    pub weights: Option<Vec<f64>>,
}

impl EofBasis {
    pub fn k(&self) -> usize {
        self.components.nrows()
    }

    pub fn dim(&self) -> usize {
        self.components.ncols()
    }

    /// Field in data space for the given EOF coordinates.
    pub fn reconstruct(&self, score: &[f64]) -> Vec<f64> {
        (0..self.dim())
            .map(|j| {
                let s: f64 = score.iter().enumerate().map(|(i, a)| a * self.components[(i, j)]).sum();
                let w = self.weights.as_ref().map_or(1.0, |w| w[j]);
                self.mean[j] + if w > 0.0 { s / w } else { 0.0 }
            })
            .collect()
    }

    pub fn to_gsk1(&self) -> Gsk1 {
        let mut arrays = vec![
            NamedArray {
                name: "mean".into(),
                shape: vec![self.dim()],
                values: self.mean.clone(),
            },
            NamedArray {
                name: "components".into(),
                shape: vec![self.k(), self.dim()],
                values: self.components.transpose().as_slice().to_vec(),
            },
            NamedArray {
                name: "explained_variance".into(),
                shape: vec![self.k()],
                values: self.explained_variance.clone(),
            },
        ];
        if let Some(w) = &self.weights {
            arrays.push(NamedArray {
                name: "weights".into(),
                shape: vec![w.len()],
                values: w.clone(),
            });
        }
        Gsk1::arrays_only(serde_json::json!({"kind": "eof_basis", "k": self.k(), "dim": self.dim()}), arrays)
    }

    pub fn from_gsk1(file: &Gsk1) -> Result<Self> {
        let comps = file.array("components")?;
        let [k, p] = comps.shape[..] else {
            return Err(CoreError::Format("components must be 2-D".into()));
        };
        Ok(Self {
            mean: file.array("mean")?.values.clone(),
            components: DMatrix::from_row_slice(k, p, &comps.values),
            explained_variance: file.array("explained_variance")?.values.clone(),
            weights: file.array("weights").ok().map(|a| a.values.clone()),
        })
    }
}

/// Leading `k` EOFs of `x` (rows are samples). Components are the top right
/// singular vectors of the column-centered (and optionally weighted) matrix,
/// signed so their largest-magnitude entry is positive. Components beyond
/// the data's rank carry zero explained variance.
pub fn fit_eof(x: &DMatrix<f64>, k: usize, weights: Option<&[f64]>) -> Result<EofBasis> {
    let (n, p) = x.shape();
    if k == 0 || k > n.min(p) {
        return invalid(format!("fit_eof needs 1 ≤ k ≤ min(rows, columns), got k = {k} for {n}×{p}"));
    }
    if let Some(w) = weights {
        if w.len() != p {
            return Err(CoreError::DimensionMismatch(format!("{} weights for {p} columns", w.len())));
        }
    }
    let mean: Vec<f64> = (0..p).map(|j| x.column(j).mean()).collect();
    let mut centered = x.clone();
    for j in 0..p {
        let w = weights.map_or(1.0, |w| w[j]);
        for v in centered.column_mut(j).iter_mut() {
            *v = (*v - mean[j]) * w;
        }
    }
    let svd = centered.svd(false, true);
    let vt = svd.v_t.ok_or_else(|| CoreError::Numerical("SVD did not return V".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let sigma: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let total: f64 = sigma.iter().map(|s| s * s).sum();
    if k > sigma.len() {
        return invalid(format!("k = {k} exceeds the {} available components", sigma.len()));
    }
    let mut components = DMatrix::zeros(k, p);
    for (r, &i) in order.iter().take(k).enumerate() {
        let row = vt.row(i);
        let big = row.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        let sign = if big < 0.0 { -1.0 } else { 1.0 };
        for j in 0..p {
            components[(r, j)] = sign * row[j];
        }
    }
    Ok(EofBasis {
        mean,
        components,
        explained_variance: sigma.iter().take(k).map(|s| s * s / total).collect(),
        weights: weights.map(<[f64]>::to_vec),
    })
}

/// EOF coordinates `((x − mean) ⊙ w)·Cᵀ` for every row.
pub fn project(x: &DMatrix<f64>, basis: &EofBasis) -> Result<DMatrix<f64>> {
    if x.ncols() != basis.dim() {
        return Err(CoreError::DimensionMismatch(format!(
            "{} columns, basis dimension {}",
            x.ncols(),
            basis.dim()
        )));
    }
    let mut c = x.clone();
    for j in 0..x.ncols() {
        let w = basis.weights.as_ref().map_or(1.0, |w| w[j]);
        for v in c.column_mut(j).iter_mut() {
            *v = (*v - basis.mean[j]) * w;
        }
    }
    Ok(c * basis.components.transpose())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KMeansConfig {
    pub k: usize,
    pub restarts: usize,
    /// Convergence when the relative WCSS change drops below this.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: 4,
            restarts: 25,
            tol: 1e-8,
            max_iter: 300,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansFit {
    pub centers: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub wcss: f64,
    /// WCSS after every assignment step of the winning restart.
    pub trace: Vec<f64>,
}

fn rows(x: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..x.nrows()).map(|i| x.row(i).iter().copied().collect()).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn plus_plus_seed(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            d2.iter()
                .position(|&d| {
                    r -= d;
                    r < 0.0
                })
                .unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).expect("positive total"))
        } else {
            rng.random_range(0..points.len())
        };
        centers.push(points[pick].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &centers[centers.len() - 1]));
        }
    }
    centers
}

fn lloyd(points: &[Vec<f64>], mut centers: Vec<Vec<f64>>, cfg: &KMeansConfig) -> Result<KMeansFit> {
    let dim = points[0].len();
    let mut trace: Vec<f64> = Vec::new();
    let mut labels = vec![0usize; points.len()];
    for _ in 0..cfg.max_iter {
        let mut dists = vec![0.0; points.len()];
        for (i, p) in points.iter().enumerate() {
            (labels[i], dists[i]) = nearest(p, &centers);
        }
        // Refill empty clusters with the point farthest from its center.
        let mut counts = vec![0usize; centers.len()];
        labels.iter().for_each(|&l| counts[l] += 1);
        for c in 0..centers.len() {
            if counts[c] == 0 {
                let far = (0..points.len())
                    .filter(|&i| counts[labels[i]] > 1)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]))
                    .ok_or_else(|| CoreError::Numerical("cannot refill an empty cluster".into()))?;
                counts[labels[far]] -= 1;
                counts[c] = 1;
                labels[far] = c;
                dists[far] = 0.0;
                centers[c] = points[far].clone();
            }
        }
        let wcss: f64 = dists.iter().sum();
        if let Some(&prev) = trace.last() {
            if wcss > prev * (1.0 + 1e-12) + 1e-12 {
                return Err(CoreError::Numerical(format!("k-means WCSS rose from {prev} to {wcss}")));
            }
        }
        trace.push(wcss);
        let mut sums = vec![vec![0.0; dim]; centers.len()];
        for (p, &l) in points.iter().zip(&labels) {
            sums[l].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        for (i, (c, s)) in centers.iter_mut().zip(sums).enumerate() {
            *c = s.into_iter().map(|v| v / counts[i] as f64).collect();
        }
        let n = trace.len();
        if n >= 2 {
            let (a, b) = (trace[n - 2], trace[n - 1]);
            if (a - b).abs() <= cfg.tol * a.max(f64::MIN_POSITIVE) {
                break;
            }
        }
    }
    // Final assignment against the updated centers.
    let mut wcss = 0.0;
    for (i, p) in points.iter().enumerate() {
        let (l, d) = nearest(p, &centers);
        labels[i] = l;
        wcss += d;
    }
    if let Some(&prev) = trace.last() {
        if wcss > prev * (1.0 + 1e-12) + 1e-12 {
            return Err(CoreError::Numerical(format!("k-means WCSS rose from {prev} to {wcss}")));
        }
    }
    trace.push(wcss);
    Ok(KMeansFit {
        centers,
        labels,
        wcss,
        trace,
    })
}

/// Lloyd's algorithm with k-means++ seeding, best of `restarts` runs. Each
/// restart draws from its own generator derived from `seed`.
pub fn fit_kmeans(scores: &DMatrix<f64>, cfg: &KMeansConfig, seed: u64) -> Result<KMeansFit> {
    if cfg.k == 0 || scores.nrows() < cfg.k {
        return invalid(format!("k-means needs at least k = {} rows, got {}", cfg.k, scores.nrows()));
    }
    if cfg.restarts == 0 {
        return invalid("k-means needs at least one restart");
    }
    let points = rows(scores);
    let mut best: Option<KMeansFit> = None;
    for r in 0..cfg.restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(split_mix64(seed ^ split_mix64(r as u64 + 1)));
        let fit = lloyd(&points, plus_plus_seed(&points, cfg.k, &mut rng), cfg)?;
        if best.as_ref().is_none_or(|b| fit.wcss < b.wcss) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Nearest center by Euclidean distance; ties go to the lowest index.
pub fn assign(scores: &DMatrix<f64>, centers: &[Vec<f64>]) -> Result<Vec<usize>> {
    if centers.is_empty() || centers.iter().any(|c| c.len() != scores.ncols()) {
        return Err(CoreError::DimensionMismatch(format!(
            "scores have {} columns; centers {:?}",
            scores.ncols(),
            centers.iter().map(Vec::len).collect::<Vec<_>>()
        )));
    }
    Ok(rows(scores).iter().map(|p| nearest(p, centers).0).collect())
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Matches each centroid, reconstructed into data space, to one of the four
/// template fields (given in [`Regime::ALL`] order), maximizing the total
/// spatial correlation over all bijections. Returns the regime of every
/// centroid and the total correlation.
pub fn name_clusters(centers: &[Vec<f64>], basis: &EofBasis, templates: &[Vec<f64>]) -> Result<(Vec<Regime>, f64)> {
    if centers.len() != 4 || templates.len() != 4 {
        return invalid("naming needs exactly four centroids and four templates");
    }
    if templates.iter().any(|t| t.len() != basis.dim()) {
        return Err(CoreError::DimensionMismatch(format!(
            "templates must have {} values",
            basis.dim()
        )));
    }
    let fields: Vec<Vec<f64>> = centers.iter().map(|c| basis.reconstruct(c)).collect();
    let corr: Vec<Vec<f64>> = fields
        .iter()
        .map(|f| templates.iter().map(|t| correlation(f, t)).collect())
        .collect();
    let (best, total) = permutations(4)
        .into_iter()
        .map(|p| {
            let s: f64 = (0..4).map(|i| corr[i][p[i]]).sum();
            (p, s)
        })
        .fold((vec![], f64::NEG_INFINITY), |acc, (p, s)| if s > acc.1 { (p, s) } else { acc });
    Ok((best.into_iter().map(|t| Regime::ALL[t]).collect(), total))
}

/// Four named centroids in EOF space.
#[derive(Clone, Debug, PartialEq)]
pub struct RegimeCentroids {
    pub centers: Vec<Vec<f64>>,
    pub names: Vec<Regime>,
}

impl RegimeCentroids {
    pub fn new(centers: Vec<Vec<f64>>, names: Vec<Regime>) -> Result<Self> {
        let mut sorted = names.clone();
        sorted.sort();
        if centers.len() != 4 || sorted != Regime::ALL || centers.iter().flatten().any(|v| !v.is_finite()) {
            return invalid("centroids need four finite centers named bijectively");
        }
        Ok(Self { centers, names })
    }

    /// Centers reordered so that index `i` holds regime `Regime::ALL[i]`.
    pub fn by_regime(&self) -> Vec<Vec<f64>> {
        Regime::ALL
            .iter()
            .map(|r| {
                let i = self.names.iter().position(|n| n == r).expect("bijective names");
                self.centers[i].clone()
            })
            .collect()
    }

    /// Regime class index of every row.
    pub fn label(&self, scores: &DMatrix<f64>) -> Result<Vec<usize>> {
        assign(scores, &self.by_regime())
    }

    pub fn to_gsk1(&self) -> Gsk1 {
        let k = self.centers[0].len();
        Gsk1::arrays_only(
            serde_json::json!({
                "kind": "regime_centroids",
                "names": self.names.iter().map(|r| r.name()).collect::<Vec<_>>(),
            }),
            vec![NamedArray {
                name: "centers".into(),
                shape: vec![4, k],
                values: self.centers.concat(),
            }],
        )
    }

    pub fn from_gsk1(file: &Gsk1) -> Result<Self> {
        let a = file.array("centers")?;
        let [4, k] = a.shape[..] else {
            return Err(CoreError::Format("centers must be 4 × k".into()));
        };
        let names = file
            .meta
            .as_ref()
            .and_then(|m| m.get("names"))
            .and_then(|n| n.as_array())
            .ok_or_else(|| CoreError::Format("centroid metadata lacks names".into()))?
            .iter()
            .map(|n| n.as_str().unwrap_or("").parse())
            .collect::<Result<Vec<Regime>>>()?;
        Self::new(a.values.chunks(k).map(<[f64]>::to_vec).collect(), names)
    }
}

/// Per-day regime labels and the EOF scores that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct RegimeSeries {
    pub dates: Vec<i64>,
    pub labels: Vec<usize>,
    pub scores: Vec<Vec<f64>>,
}

impl RegimeSeries {
    pub fn new(dates: Vec<i64>, labels: Vec<usize>, scores: Vec<Vec<f64>>) -> Result<Self> {
        if dates.len() != labels.len() || (!scores.is_empty() && scores.len() != dates.len()) {
            return Err(CoreError::DimensionMismatch("dates, labels and scores differ in length".into()));
        }
        if labels.iter().any(|&l| l > 3) {
            return invalid("labels must lie in 0..=3");
        }
        if dates.windows(2).any(|w| w[1] <= w[0]) {
            return invalid("regime dates must be strictly increasing");
        }
        Ok(Self { dates, labels, scores })
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn label_on(&self, date: i64) -> Option<usize> {
        self.dates.binary_search(&date).ok().map(|i| self.labels[i])
    }

    /// CSV `date,label,score_1..score_k`, labels as regime names.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let k = self.scores.first().map_or(0, Vec::len);
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["date".to_string(), "label".to_string()];
        header.extend((1..=k).map(|i| format!("score_{i}")));
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec = vec![calendar::format(self.dates[i]), Regime::ALL[self.labels[i]].name().to_string()];
            if let Some(s) = self.scores.get(i) {
                rec.extend(s.iter().map(|v| format!("{v:e}")));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let (mut dates, mut labels, mut scores) = (Vec::new(), Vec::new(), Vec::new());
        for (row, rec) in r.records().enumerate() {
            let rec = rec?;
            let field = |i: usize| rec.get(i).ok_or_else(|| CoreError::Csv(format!("row {}: missing column {i}", row + 2)));
            dates.push(calendar::parse(field(0)?)?);
            labels.push(field(1)?.parse::<Regime>()?.index());
            let s = (2..rec.len())
                .map(|i| {
                    field(i)?
                        .parse::<f64>()
                        .map_err(|e| CoreError::Csv(format!("row {}: {e}", row + 2)))
                })
                .collect::<Result<Vec<f64>>>()?;
            if !s.is_empty() {
                scores.push(s);
            }
        }
        Self::new(dates, labels, scores)
    }
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings differ in length");
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let c2 = |n: u64| (n * n.saturating_sub(1)) as f64 / 2.0;
    let sum_cells: f64 = table.iter().flatten().map(|&n| c2(n)).sum();
    let sum_rows: f64 = table.iter().map(|r| c2(r.iter().sum())).sum();
    let sum_cols: f64 = (0..kb).map(|j| c2(table.iter().map(|r| r[j]).sum())).sum();
    let total = c2(a.len() as u64);
    let expected = sum_rows * sum_cols / total;
    let max = (sum_rows + sum_cols) / 2.0;
    if max == expected {
        return 1.0;
    }
    (sum_cells - expected) / (max - expected)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelConfig {
    pub bbox: BBox,
    pub variable: String,
    pub n_eofs: usize,
    pub lat_weighting: bool,
    pub kmeans: KMeansConfig,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            bbox: BBox::NAE,
            variable: "Z500".into(),
            n_eofs: 14,
            lat_weighting: false,
            kmeans: KMeansConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Labeling {
    pub basis: EofBasis,
    pub centroids: RegimeCentroids,
    pub series: RegimeSeries,
    pub naming_correlation: f64,
}

/// Full labeling pipeline on winter anomalies. `templates` are the four
/// canonical regime fields over the domain, in [`Regime::ALL`] order.
pub fn label_regimes(anoms: &GridStack, templates: &[Vec<f64>], cfg: &LabelConfig, seed: u64) -> Result<Labeling> {
    let x = extract_domain(anoms, &cfg.bbox, &cfg.variable)?;
    let weights = if cfg.lat_weighting {
        Some(sqrt_cos_weights(&anoms.grid, &cfg.bbox)?)
    } else {
        None
    };
    let basis = fit_eof(&x, cfg.n_eofs, weights.as_deref())?;
    let total: f64 = basis.explained_variance.iter().sum();
    log::info!("{} EOFs explain {:.1}% of the variance", basis.k(), 100.0 * total);
    let scores = project(&x, &basis)?;
    let fit = fit_kmeans(&scores, &cfg.kmeans, seed)?;
    let (names, corr) = name_clusters(&fit.centers, &basis, templates)?;
    let centroids = RegimeCentroids::new(fit.centers, names)?;
    let labels = centroids.label(&scores)?;
    let series = RegimeSeries::new(anoms.dates.clone(), labels, rows(&scores))?;
    Ok(Labeling {
        basis,
        centroids,
        series,
        naming_correlation: corr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nae_box_on_canonical_grid() {
        let g = LatLonGrid::canonical();
        let cols = domain_columns(&g, &BBox::NAE).unwrap();
        assert_eq!(cols.len(), 11 * 22);
        // First column of every row is the westernmost point, 270°E.
        assert_eq!(g.lons[cols[0] % 64], 270.0);
        assert_eq!(g.lons[cols[21] % 64], 28.125);
        assert_eq!(domain_columns(&g, &BBox::GLOBE).unwrap().len(), 2048);
    }

    #[test]
    fn tie_goes_to_lowest_index() {
        let centers = vec![vec![1.0, 0.0], vec![5.0, 5.0], vec![3.0, 3.0], vec![-1.0, 0.0]];
        let x = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 3.0, 3.0]);
        assert_eq!(assign(&x, &centers).unwrap(), vec![0, 2]);
    }

    #[test]
    fn ari_extremes() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1, 2], &[2, 2, 0, 0, 1]), 1.0);
        let ari = adjusted_rand_index(&[0, 1, 0, 1], &[0, 0, 1, 1]);
        assert!(ari < 0.0);
    }

    #[test]
    fn regime_names_round_trip() {
        for r in Regime::ALL {
            assert_eq!(r.name().parse::<Regime>().unwrap(), r);
        }
        assert_eq!(permutations(4).len(), 24);
    }
}
