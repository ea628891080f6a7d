//! Forecast verification scores and the reference baselines.
//!
//! Class-aggregated scores (CSI, Brier, AUC-ROC) are support-weighted means
//! of the one-vs-rest per-class values. Deterministic labels come from
//! probabilities by argmax with ties going to the lowest class index.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::calendar;
use crate::error::{invalid, CoreError, Result};
use crate::labeler::{Regime, RegimeSeries};

pub const SCHEMA_VERSION: u32 = 1;
const K: usize = 4;

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn argmax_rows(probs: &[Vec<f64>]) -> Vec<usize> {
    probs.iter().map(|r| argmax(r)).collect()
}

pub fn one_hot(labels: &[usize]) -> Vec<Vec<f64>> {
    labels
        .iter()
        .map(|&l| (0..K).map(|c| if c == l { 1.0 } else { 0.0 }).collect())
        .collect()
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(CoreError::DimensionMismatch(format!("{a} predictions for {b} labels")));
    }
    if a == 0 {
        return invalid("empty forecast set");
    }
    Ok(())
}

fn check_labels(labels: &[usize]) -> Result<()> {
    match labels.iter().find(|&&l| l >= K) {
        Some(l) => invalid(format!("class index {l} out of range")),
        None => Ok(()),
    }
}

fn check_probs(probs: &[Vec<f64>]) -> Result<()> {
    for (i, r) in probs.iter().enumerate() {
        let s: f64 = r.iter().sum();
        if r.len() != K || r.iter().any(|p| !(0.0..=1.0 + 1e-9).contains(p)) || (s - 1.0).abs() > 1e-6 {
            return invalid(format!("row {i} is not a probability vector over {K} classes"));
        }
    }
    Ok(())
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths(pred.len(), truth.len())?;
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / truth.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contingency {
    pub tp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub fp: usize,
    pub tn: usize,
}

impl Contingency {
    pub fn support(&self) -> usize {
        self.tp + self.fn_
    }

    /// `None` when TP+FN+FP is zero.
    pub fn csi(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_ + self.fp)
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// One-vs-rest tables, one per class.
pub fn contingency(pred: &[usize], truth: &[usize]) -> Result<Vec<Contingency>> {
    check_lengths(pred.len(), truth.len())?;
    check_labels(pred)?;
    check_labels(truth)?;
    let mut out = vec![Contingency::default(); K];
    for (&p, &t) in pred.iter().zip(truth) {
        for (c, table) in out.iter_mut().enumerate() {
            match (p == c, t == c) {
                (true, true) => table.tp += 1,
                (false, true) => table.fn_ += 1,
                (true, false) => table.fp += 1,
                (false, false) => table.tn += 1,
            }
        }
    }
    Ok(out)
}

pub fn supports(truth: &[usize]) -> Vec<usize> {
    let mut s = vec![0; K];
    for &t in truth {
        s[t] += 1;
    }
    s
}

/// Weighted mean of `values` with `weights`, skipping `None` entries.
fn weighted_mean(values: &[Option<f64>], weights: &[usize]) -> Result<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for (v, &w) in values.iter().zip(weights) {
        if let Some(v) = v {
            num += v * w as f64;
            den += w as f64;
        }
    }
    if den == 0.0 {
        return Err(CoreError::Numerical("no class contributes to the weighted score".into()));
    }
    Ok(num / den)
}

/// Support-weighted CSI; classes with TP+FN+FP = 0 are skipped.
pub fn csi(tables: &[Contingency], supports: &[usize]) -> Result<f64> {
    if tables.len() != supports.len() {
        return Err(CoreError::DimensionMismatch("one support per table required".into()));
    }
    let per: Vec<Option<f64>> = tables.iter().map(|t| t.csi()).collect();
    weighted_mean(&per, supports)
}

pub fn brier_per_class(probs: &[Vec<f64>], truth: &[usize]) -> Result<Vec<f64>> {
    check_lengths(probs.len(), truth.len())?;
    check_probs(probs)?;
    check_labels(truth)?;
    let n = truth.len() as f64;
    Ok((0..K)
        .map(|c| {
            probs
                .iter()
                .zip(truth)
                .map(|(r, &t)| {
                    let y = if t == c { 1.0 } else { 0.0 };
                    (r[c] - y) * (r[c] - y)
                })
                .sum::<f64>()
                / n
        })
        .collect())
}

/// Support-weighted Brier score.
pub fn brier(probs: &[Vec<f64>], truth: &[usize]) -> Result<f64> {
    let per: Vec<Option<f64>> = brier_per_class(probs, truth)?.into_iter().map(Some).collect();
    weighted_mean(&per, &supports(truth))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// Score threshold of each point; the first point uses `+inf`.
    pub thresholds: Vec<f64>,
    pub pofd: Vec<f64>,
    pub pod: Vec<f64>,
    pub auc: f64,
}

/// ROC points at every distinct score, predicting positive when
/// `score >= threshold`. Equal scores enter together, so ties contribute a
/// diagonal segment.
pub fn roc_curve(scores: &[f64], truth: &[bool]) -> Result<RocCurve> {
    check_lengths(scores.len(), truth.len())?;
    if scores.iter().any(|s| s.is_nan()) {
        return invalid("NaN score");
    }
    let pos = truth.iter().filter(|&&t| t).count();
    let neg = truth.len() - pos;
    if pos == 0 || neg == 0 {
        return invalid("ROC needs both positive and negative cases");
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut curve = RocCurve {
        thresholds: vec![f64::INFINITY],
        pofd: vec![0.0],
        pod: vec![0.0],
        auc: 0.0,
    };
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            if truth[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let (x, y) = (fp as f64 / neg as f64, tp as f64 / pos as f64);
        let (px, py) = (curve.pofd[curve.pofd.len() - 1], curve.pod[curve.pod.len() - 1]);
        curve.auc += (x - px) * (y + py) / 2.0;
        curve.thresholds.push(s);
        curve.pofd.push(x);
        curve.pod.push(y);
    }
    Ok(curve)
}

/// Per-class one-vs-rest AUC; `None` for classes absent from (or making up
/// all of) `truth`.
pub fn class_aucs(probs: &[Vec<f64>], truth: &[usize]) -> Result<Vec<Option<f64>>> {
    check_lengths(probs.len(), truth.len())?;
    check_probs(probs)?;
    check_labels(truth)?;
    (0..K)
        .map(|c| {
            let scores: Vec<f64> = probs.iter().map(|r| r[c]).collect();
            let binary: Vec<bool> = truth.iter().map(|&t| t == c).collect();
            let pos = binary.iter().filter(|&&b| b).count();
            if pos == 0 || pos == binary.len() {
                log::warn!("class {} is {} in the truth; excluded from weighted AUC", Regime::ALL[c], if pos == 0 { "absent" } else { "the only class" });
                return Ok(None);
            }
            Ok(Some(roc_curve(&scores, &binary)?.auc))
        })
        .collect()
}

pub fn weighted_auc(probs: &[Vec<f64>], truth: &[usize]) -> Result<f64> {
    weighted_mean(&class_aucs(probs, truth)?, &supports(truth))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagramPoint {
    pub class: Regime,
    pub pod: Option<f64>,
    pub pofd: Option<f64>,
    pub success_ratio: Option<f64>,
    pub bias: Option<f64>,
    pub csi: Option<f64>,
    pub peirce: Option<f64>,
    /// Why any of the above is missing.
    pub omitted: Vec<String>,
}

pub fn performance_diagram(pred: &[usize], truth: &[usize]) -> Result<Vec<DiagramPoint>> {
    let tables = contingency(pred, truth)?;
    Ok(tables
        .iter()
        .enumerate()
        .map(|(c, t)| {
            let mut omitted = Vec::new();
            let mut note = |v: Option<f64>, what: &str| {
                if v.is_none() {
                    omitted.push(format!("{what}: zero denominator"));
                }
                v
            };
            let pod = note(ratio(t.tp, t.tp + t.fn_), "pod");
            let pofd = note(ratio(t.fp, t.fp + t.tn), "pofd");
            let sr = note(ratio(t.tp, t.tp + t.fp), "success_ratio");
            let bias = note(ratio(t.tp + t.fp, t.tp + t.fn_), "bias");
            let csi = note(t.csi(), "csi");
            DiagramPoint {
                class: Regime::ALL[c],
                pod,
                pofd,
                success_ratio: sr,
                bias,
                csi,
                peirce: pod.zip(pofd).map(|(a, b)| a - b),
                omitted,
            }
        })
        .collect())
}

/// Verification pairs: forecast for `target` issued at `init`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Deterministic {
    pub init: Vec<i64>,
    pub target: Vec<i64>,
    pub predicted: Vec<usize>,
    pub truth: Vec<usize>,
}

/// Persistence: the regime at `t0` is the forecast for `t0 + lead`.
pub fn persistence_forecast(series: &RegimeSeries, lead: i64) -> Deterministic {
    let mut out = Deterministic::default();
    for (i, j) in calendar::lead_pairs(&series.dates, lead) {
        out.init.push(series.dates[i]);
        out.target.push(series.dates[j]);
        out.predicted.push(series.labels[i]);
        out.truth.push(series.labels[j]);
    }
    out
}

fn mode(counts: &[usize]) -> usize {
    let best = counts.iter().copied().max().unwrap_or(0);
    counts.iter().position(|&c| c == best).unwrap_or(0)
}

/// Modal regime per calendar week of the valid date, weeks 1..=52.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeeklyClimatology {
    pub table: Vec<usize>,
    /// Weeks without training data.
    pub filled: Vec<u32>,
}

impl WeeklyClimatology {
    pub fn fit(dates: &[i64], labels: &[usize]) -> Result<Self> {
        check_lengths(dates.len(), labels.len())?;
        check_labels(labels)?;
        let mut counts = vec![[0usize; K]; 52];
        let mut global = [0usize; K];
        for (&d, &l) in dates.iter().zip(labels) {
            counts[calendar::week_of_year(d) as usize - 1][l] += 1;
            global[l] += 1;
        }
        let fallback = mode(&global);
        let mut filled = Vec::new();
        let table = counts
            .iter()
            .enumerate()
            .map(|(w, c)| {
                if c.iter().sum::<usize>() == 0 {
                    filled.push(w as u32 + 1);
                    fallback
                } else {
                    mode(c)
                }
            })
            .collect();
        Ok(Self { table, filled })
    }

    pub fn forecast(&self, date: i64) -> usize {
        self.table[calendar::week_of_year(date) as usize - 1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LogRegConfig {
    pub l2: f64,
    pub lr: f64,
    pub max_epochs: usize,
    /// Stop when the loss changes by less than this.
    pub tol: f64,
}

impl Default for LogRegConfig {
    fn default() -> Self {
        Self {
            l2: 1e-3,
            lr: 0.5,
            max_epochs: 5000,
            tol: 1e-8,
        }
    }
}

/// Multinomial logistic regression on standardized features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogReg {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// `features × classes`.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub epochs: usize,
    pub loss: f64,
}

fn softmax_row(z: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in z.iter_mut() {
        *v /= s;
    }
}

/// Mean cross-entropy plus `l2/2 · ‖W‖²` and its gradient with respect to
/// `W` (`f × K`) and `b`.
pub fn logreg_loss_grad(x: &DMatrix<f64>, y: &[usize], w: &DMatrix<f64>, b: &[f64], l2: f64) -> (f64, DMatrix<f64>, Vec<f64>) {
    let n = x.nrows();
    let mut z = x * w;
    let mut loss = 0.0;
    for i in 0..n {
        let mut row: Vec<f64> = (0..K).map(|c| z[(i, c)] + b[c]).collect();
        softmax_row(&mut row);
        loss -= row[y[i]].max(f64::MIN_POSITIVE).ln();
        for c in 0..K {
            z[(i, c)] = (row[c] - if c == y[i] { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    loss /= n as f64;
    loss += 0.5 * l2 * w.iter().map(|v| v * v).sum::<f64>();
    let gw = x.transpose() * &z + w * l2;
    let gb = (0..K).map(|c| z.column(c).sum()).collect();
    (loss, gw, gb)
}

impl LogReg {
    pub fn fit(x: &DMatrix<f64>, y: &[usize], cfg: &LogRegConfig) -> Result<Self> {
        check_lengths(x.nrows(), y.len())?;
        check_labels(y)?;
        let f = x.ncols();
        let mean: Vec<f64> = (0..f).map(|j| x.column(j).mean()).collect();
        let scale: Vec<f64> = (0..f)
            .map(|j| {
                let sd = x.column(j).iter().map(|v| (v - mean[j]).powi(2)).sum::<f64>() / x.nrows() as f64;
                if sd > 0.0 {
                    sd.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let xs = DMatrix::from_fn(x.nrows(), f, |i, j| (x[(i, j)] - mean[j]) / scale[j]);
        let mut w = DMatrix::zeros(f, K);
        let mut b = vec![0.0; K];
        let mut prev = f64::INFINITY;
        let mut epochs = 0;
        let mut loss = f64::NAN;
        for e in 0..cfg.max_epochs {
            let (l, gw, gb) = logreg_loss_grad(&xs, y, &w, &b, cfg.l2);
            if !l.is_finite() || l > 10.0 * prev.min(1e300) {
                return Err(CoreError::Numerical(format!("logistic regression diverged at epoch {e} (lr {})", cfg.lr)));
            }
            loss = l;
            epochs = e + 1;
            if (prev - l).abs() < cfg.tol {
                break;
            }
            prev = l;
            w -= gw * cfg.lr;
            for (bc, g) in b.iter_mut().zip(gb) {
                *bc -= cfg.lr * g;
            }
        }
        Ok(Self {
            mean,
            scale,
            weights: (0..f).map(|j| w.row(j).iter().copied().collect()).collect(),
            bias: b,
            epochs,
            loss,
        })
    }

    pub fn predict_proba(&self, x: &DMatrix<f64>) -> Result<Vec<Vec<f64>>> {
        if x.ncols() != self.mean.len() {
            return Err(CoreError::DimensionMismatch(format!("model has {} features, input {}", self.mean.len(), x.ncols())));
        }
        Ok((0..x.nrows())
            .map(|i| {
                let mut z = self.bias.clone();
                for (j, wj) in self.weights.iter().enumerate() {
                    let v = (x[(i, j)] - self.mean[j]) / self.scale[j];
                    for c in 0..K {
                        z[c] += v * wj[c];
                    }
                }
                softmax_row(&mut z);
                z
            })
            .collect())
    }
}

/// Headline scores of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub n: usize,
    pub accuracy: f64,
    pub weighted_auc: f64,
    pub csi: f64,
    pub brier: f64,
}

/// Scores a probabilistic forecast. Deterministic forecasts are scored
/// through [`one_hot`].
pub fn score(probs: &[Vec<f64>], truth: &[usize]) -> Result<Scores> {
    let pred = argmax_rows(probs);
    let tables = contingency(&pred, truth)?;
    Ok(Scores {
        n: truth.len(),
        accuracy: accuracy(&pred, truth)?,
        weighted_auc: weighted_auc(probs, truth)?,
        csi: csi(&tables, &supports(truth))?,
        brier: brier(probs, truth)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub lead: i64,
    pub models: BTreeMap<String, Scores>,
    /// Everything needed to rerun the evaluation.
    pub config: serde_json::Value,
}

impl Report {
    pub fn new(lead: i64, config: serde_json::Value) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            lead,
            models: BTreeMap::new(),
            config,
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// `model,class,threshold,pofd,pod` rows.
pub fn write_roc_csv(path: &Path, curves: &[(String, Regime, RocCurve)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["model", "class", "threshold", "pofd", "pod"])?;
    for (model, class, c) in curves {
        for k in 0..c.pod.len() {
            w.write_record([
                model.clone(),
                class.to_string(),
                c.thresholds[k].to_string(),
                c.pofd[k].to_string(),
                c.pod[k].to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `model,class,pod,success_ratio,bias,csi,peirce` rows; omitted values are
/// left empty.
pub fn write_diagram_csv(path: &Path, diagrams: &[(String, Vec<DiagramPoint>)]) -> Result<()> {
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["model", "class", "pod", "success_ratio", "bias", "csi", "peirce"])?;
    for (model, points) in diagrams {
        for p in points {
            w.write_record([
                model.clone(),
                p.class.to_string(),
                cell(p.pod),
                cell(p.success_ratio),
                cell(p.bias),
                cell(p.csi),
                cell(p.peirce),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
