//! Bayesian optimization with a Gaussian-process surrogate and expected
//! improvement, minimizing an objective over the unit cube.
//!
//! The surrogate uses an ARD squared-exponential kernel on inputs in
//! `[0, 1]^d` and standardized targets. Kernel hyperparameters maximize the
//! log marginal likelihood by multi-start gradient ascent in log space.
//! Candidates come from a randomly shifted Halton sequence followed by a
//! local pattern search; integer dimensions are rounded afterwards.

use std::io::{BufRead, Write as _};
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{invalid, CoreError, Result};
use crate::seeds::split_mix64;

const PRIMES: [u32; 10] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29];

fn radical_inverse(mut i: u64, base: u32) -> f64 {
    let b = base as f64;
    let mut inv = 1.0 / b;
    let mut out = 0.0;
    while i > 0 {
        out += (i % base as u64) as f64 * inv;
        i /= base as u64;
        inv /= b;
    }
    out
}

/// `n` Halton points in `[0,1)^dim` under a Cranley-Patterson rotation drawn
/// from `seed`.
pub fn halton(n: usize, dim: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if dim == 0 || dim > PRIMES.len() {
        return invalid(format!("halton supports 1..={} dimensions", PRIMES.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shift: Vec<f64> = (0..dim).map(|_| rng.random()).collect();
    Ok((1..=n as u64)
        .map(|i| (0..dim).map(|k| (radical_inverse(i, PRIMES[k]) + shift[k]).fract()).collect())
        .collect())
}

const LOG_LS: (f64, f64) = (-4.6, 2.3);
const LOG_SF: (f64, f64) = (-2.3, 2.3);
const LOG_SN: (f64, f64) = (-13.8, 0.0);

/// Fitted GP posterior.
#[derive(Clone, Debug)]
pub struct Gp {
    x: Vec<Vec<f64>>,
    y_mean: f64,
    y_scale: f64,
    pub length_scales: Vec<f64>,
    pub signal_std: f64,
    pub noise_std: f64,
    pub log_marginal_likelihood: f64,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

fn kern(a: &[f64], b: &[f64], ls: &[f64], sf2: f64) -> f64 {
    let r2: f64 = a.iter().zip(b).zip(ls).map(|((p, q), l)| ((p - q) / l).powi(2)).sum();
    sf2 * (-0.5 * r2).exp()
}

fn cholesky_jitter(mut k: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let n = k.nrows();
    let mut jitter = 0.0;
    for _ in 0..8 {
        if let Some(c) = Cholesky::new(k.clone()) {
            return Ok(c);
        }
        let add = if jitter == 0.0 { 1e-10 } else { jitter * 9.0 };
        jitter += add;
        for i in 0..n {
            k[(i, i)] += add;
        }
    }
    Err(CoreError::Numerical("kernel matrix is not positive definite".into()))
}

struct Fit {
    lml: f64,
    grad: Vec<f64>,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

/// Log marginal likelihood and its gradient in
/// `θ = (log ℓ₁..log ℓ_d, log σ_f, log σ_n)`.
fn marginal(x: &[Vec<f64>], y: &DVector<f64>, theta: &[f64]) -> Result<Fit> {
    let d = x[0].len();
    let n = x.len();
    let ls: Vec<f64> = theta[..d].iter().map(|v| v.exp()).collect();
    let sf2 = (2.0 * theta[d]).exp();
    let sn2 = (2.0 * theta[d + 1]).exp();
    let kf = DMatrix::from_fn(n, n, |i, j| kern(&x[i], &x[j], &ls, sf2));
    let mut k = kf.clone();
    for i in 0..n {
        k[(i, i)] += sn2;
    }
    let chol = cholesky_jitter(k)?;
    let alpha = chol.solve(y);
    let logdet: f64 = chol.l_dirty().diagonal().iter().take(n).map(|v| v.ln()).sum::<f64>() * 2.0;
    let lml = -0.5 * y.dot(&alpha) - 0.5 * logdet - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    let kinv = chol.inverse();
    let w = &alpha * alpha.transpose() - kinv;
    let mut grad = vec![0.0; d + 2];
    for i in 0..n {
        for j in 0..n {
            let wij = w[(i, j)];
            for (k2, l) in ls.iter().enumerate() {
                let diff = x[i][k2] - x[j][k2];
                grad[k2] += 0.5 * wij * kf[(i, j)] * diff * diff / (l * l);
            }
            grad[d] += wij * kf[(i, j)];
        }
        grad[d + 1] += w[(i, i)] * sn2;
    }
    Ok(Fit { lml, grad, chol, alpha })
}

fn clamp_theta(theta: &mut [f64], d: usize) {
    for (i, t) in theta.iter_mut().enumerate() {
        let (lo, hi) = match i {
            i if i < d => LOG_LS,
            i if i == d => LOG_SF,
            _ => LOG_SN,
        };
        *t = t.clamp(lo, hi);
    }
}

fn ascend(x: &[Vec<f64>], y: &DVector<f64>, mut theta: Vec<f64>) -> Result<(Vec<f64>, Fit)> {
    let d = x[0].len();
    clamp_theta(&mut theta, d);
    let mut fit = marginal(x, y, &theta)?;
    let mut step = 0.1;
    for _ in 0..200 {
        let norm = fit.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm < 1e-8 {
            break;
        }
        let mut accepted = false;
        while step > 1e-8 {
            let mut cand: Vec<f64> = theta.iter().zip(&fit.grad).map(|(t, g)| t + step * g / norm).collect();
            clamp_theta(&mut cand, d);
            match marginal(x, y, &cand) {
                Ok(f) if f.lml > fit.lml => {
                    let gain = f.lml - fit.lml;
                    theta = cand;
                    fit = f;
                    step *= 1.5;
                    accepted = gain > 1e-10;
                    break;
                }
                _ => step *= 0.5,
            }
        }
        if !accepted {
            break;
        }
    }
    Ok((theta, fit))
}

impl Gp {
    /// Fits the surrogate to `(x, y)` with `x` in the unit cube.
    pub fn fit(x: &[Vec<f64>], y: &[f64], seed: u64) -> Result<Self> {
        if x.len() != y.len() {
            return Err(CoreError::DimensionMismatch(format!("{} inputs, {} targets", x.len(), y.len())));
        }
        if x.len() < 2 {
            return invalid("the surrogate needs at least two completed trials");
        }
        let d = x[0].len();
        if d == 0 || x.iter().any(|r| r.len() != d) {
            return Err(CoreError::DimensionMismatch("inputs must share one positive dimension".into()));
        }
        if x.iter().all(|r| r == &x[0]) {
            return Err(CoreError::Numerical("degenerate kernel: all trial points coincide".into()));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return invalid("non-finite objective value");
        }
        let n = y.len() as f64;
        let y_mean = y.iter().sum::<f64>() / n;
        let sd = (y.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / n).sqrt();
        let y_scale = if sd > 0.0 { sd } else { 1.0 };
        let ys = DVector::from_iterator(y.len(), y.iter().map(|v| (v - y_mean) / y_scale));

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut starts = vec![
            [vec![(0.3f64).ln(); d], vec![0.0, (1e-3f64).ln()]].concat(),
            [vec![(0.3f64).ln(); d], vec![0.0, LOG_SN.0]].concat(),
        ];
        for _ in 0..4 {
            let mut t: Vec<f64> = (0..d).map(|_| rng.random_range(-2.5..0.5)).collect();
            t.push(rng.random_range(-0.7..0.7));
            t.push(rng.random_range(LOG_SN.0..-2.0));
            starts.push(t);
        }
        let mut best: Option<(Vec<f64>, Fit)> = None;
        for s in starts {
            let Ok((theta, fit)) = ascend(x, &ys, s) else { continue };
            if best.as_ref().is_none_or(|b| fit.lml > b.1.lml) {
                best = Some((theta, fit));
            }
        }
        let (theta, fit) = best.ok_or_else(|| CoreError::Numerical("no kernel fit succeeded".into()))?;
        Ok(Self {
            x: x.to_vec(),
            y_mean,
            y_scale,
            length_scales: theta[..d].iter().map(|v| v.exp()).collect(),
            signal_std: theta[d].exp(),
            noise_std: theta[d + 1].exp(),
            log_marginal_likelihood: fit.lml,
            chol: fit.chol,
            alpha: fit.alpha,
        })
    }

    pub fn dim(&self) -> usize {
        self.length_scales.len()
    }

    /// Posterior mean and variance of the latent function at `u`, in
    /// objective units.
    pub fn predict(&self, u: &[f64]) -> Result<(f64, f64)> {
        if u.len() != self.dim() {
            return Err(CoreError::DimensionMismatch(format!("expected {} coordinates, got {}", self.dim(), u.len())));
        }
        let sf2 = self.signal_std * self.signal_std;
        let ks = DVector::from_iterator(self.x.len(), self.x.iter().map(|xi| kern(xi, u, &self.length_scales, sf2)));
        let mean = ks.dot(&self.alpha);
        let v = self.chol.solve(&ks);
        let mut var = sf2 - ks.dot(&v);
        if var < -1e-10 {
            return Err(CoreError::Numerical(format!("negative posterior variance {var}")));
        }
        var = var.max(0.0);
        Ok((self.y_mean + self.y_scale * mean, var * self.y_scale * self.y_scale))
    }
}

/// Expected improvement below `best` for a Gaussian posterior.
pub fn expected_improvement(mean: f64, var: f64, best: f64) -> f64 {
    let sd = var.max(0.0).sqrt();
    if sd == 0.0 {
        return (best - mean).max(0.0);
    }
    let z = (best - mean) / sd;
    let n = Normal::standard();
    ((best - mean) * n.cdf(z) + sd * n.pdf(z)).max(0.0)
}

/// Maps a unit-cube point to the nearest admissible one (e.g. rounding
/// integer dimensions).
pub type Snap<'a> = &'a dyn Fn(&[f64]) -> Vec<f64>;

pub const CANDIDATES: usize = 2048;

/// Next point to evaluate: the admissible candidate of highest expected
/// improvement, skipping points already in `taken`.
pub fn suggest(gp: &Gp, best: f64, snap: Snap<'_>, taken: &[Vec<f64>], seed: u64) -> Result<Vec<f64>> {
    let d = gp.dim();
    let ei = |u: &[f64]| gp.predict(u).map(|(m, v)| expected_improvement(m, v, best));
    let mut scored: Vec<(f64, Vec<f64>)> = Vec::with_capacity(CANDIDATES + 8);
    for c in halton(CANDIDATES, d, seed)? {
        scored.push((ei(&c)?, c));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut refined = Vec::new();
    for (score, start) in scored.iter().take(5) {
        let (mut u, mut s) = (start.clone(), *score);
        let mut step = 0.05;
        while step > 1e-4 {
            let mut moved = false;
            for k in 0..d {
                for dir in [-1.0, 1.0] {
                    let mut c = u.clone();
                    c[k] = (c[k] + dir * step).clamp(0.0, 1.0);
                    let e = ei(&c)?;
                    if e > s {
                        u = c;
                        s = e;
                        moved = true;
                    }
                }
            }
            if !moved {
                step *= 0.5;
            }
        }
        refined.push((s, u));
    }
    scored.extend(refined);
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let snapped = |u: &[f64]| -> Vec<f64> { snap(u).into_iter().map(|v| v.clamp(0.0, 1.0)).collect() };
    for (_, u) in &scored {
        let s = snapped(u);
        if !taken.iter().any(|t| t == &s) {
            return Ok(s);
        }
    }
    Ok(snapped(&scored[0].1))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "status", content = "reason")]
pub enum Status {
    Done,
    Failed(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    /// Point in the unit cube.
    pub u: Vec<f64>,
    /// Decoded configuration, for humans.
    pub config: serde_json::Value,
    pub objective: Option<f64>,
    #[serde(flatten)]
    pub status: Status,
}

impl Trial {
    pub fn is_done(&self) -> bool {
        self.status == Status::Done
    }
}

pub const INITIAL_POINTS: usize = 3;

/// Minimizes `objective` over `[0,1]^dim` in `budget` evaluations. `prior`
/// trials (e.g. from a ledger) count toward the budget. Each finished trial
/// is appended to `ledger` as one JSON line.
pub fn optimize(
    objective: &mut dyn FnMut(&[f64]) -> Result<f64>,
    describe: &dyn Fn(&[f64]) -> serde_json::Value,
    dim: usize,
    snap: Snap<'_>,
    budget: usize,
    seed: u64,
    prior: Vec<Trial>,
    ledger: Option<&Path>,
) -> Result<Vec<Trial>> {
    if budget < INITIAL_POINTS {
        return invalid(format!("budget must be at least {INITIAL_POINTS}"));
    }
    let mut trials = prior;
    let mut sink = match ledger {
        Some(p) => Some(std::fs::OpenOptions::new().create(true).append(true).open(p)?),
        None => None,
    };
    let warm: Vec<Vec<f64>> = halton(INITIAL_POINTS, dim, split_mix64(seed))?.iter().map(|u| snap(u)).collect();
    while trials.len() < budget {
        let i = trials.len();
        let done: Vec<&Trial> = trials.iter().filter(|t| t.is_done()).collect();
        let taken: Vec<Vec<f64>> = trials.iter().map(|t| t.u.clone()).collect();
        let distinct = done.iter().any(|t| t.u != done[0].u);
        let u = if i < INITIAL_POINTS {
            warm[i].clone()
        } else if done.len() < 2 || !distinct {
            snap(&halton(1, dim, split_mix64(seed ^ (i as u64 + 1)))?[0])
        } else {
            let x: Vec<Vec<f64>> = done.iter().map(|t| t.u.clone()).collect();
            let y: Vec<f64> = done.iter().map(|t| t.objective.expect("done")).collect();
            let best = y.iter().copied().fold(f64::INFINITY, f64::min);
            let gp = Gp::fit(&x, &y, split_mix64(seed ^ (i as u64 + 101)))?;
            suggest(&gp, best, snap, &taken, split_mix64(seed ^ (i as u64 + 1)))?
        };
        let (objective_value, status) = match objective(&u) {
            Ok(v) if v.is_finite() => (Some(v), Status::Done),
            Ok(v) => (None, Status::Failed(format!("objective returned {v}"))),
            Err(e) => (None, Status::Failed(e.to_string())),
        };
        if let Status::Failed(why) = &status {
            log::warn!("trial {i} failed: {why}");
        }
        let trial = Trial {
            index: i,
            config: describe(&u),
            u,
            objective: objective_value,
            status,
        };
        if let Some(f) = sink.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&trial)?)?;
        }
        trials.push(trial);
    }
    Ok(trials)
}

/// Best completed trial.
pub fn incumbent(trials: &[Trial]) -> Option<&Trial> {
    trials
        .iter()
        .filter(|t| t.is_done())
        .min_by(|a, b| a.objective.partial_cmp(&b.objective).expect("finite"))
}

/// Best objective after each trial.
pub fn incumbent_trace(trials: &[Trial]) -> Vec<f64> {
    let mut best = f64::INFINITY;
    trials
        .iter()
        .map(|t| {
            if let Some(v) = t.objective {
                best = best.min(v);
            }
            best
        })
        .collect()
}

pub fn read_ledger(path: &Path) -> Result<Vec<Trial>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: Trial = serde_json::from_str(&line).map_err(|e| CoreError::Format(format!("ledger line {}: {e}", i + 1)))?;
        out.push(t);
    }
    Ok(out)
}

/// Search space over the network hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperBox {
    pub filters: (usize, usize),
    pub dropout: (f64, f64),
    pub fc_width: (usize, usize),
    pub batch_sizes: Vec<usize>,
}

impl Default for HyperBox {
    fn default() -> Self {
        Self {
            filters: (4, 32),
            dropout: (0.0, 0.5),
            fc_width: (16, 128),
            batch_sizes: vec![16, 32, 64, 128],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperPoint {
    pub filters: usize,
    pub dropout: f64,
    pub fc_width: usize,
    pub batch_size: usize,
}

fn to_unit(v: f64, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        (v - lo) / (hi - lo)
    } else {
        0.5
    }
}

impl HyperBox {
    pub const DIM: usize = 4;

    pub fn validate(&self) -> Result<()> {
        if self.filters.0 == 0 || self.filters.0 > self.filters.1 {
            return invalid("filters range must be nonempty and positive");
        }
        if self.fc_width.0 == 0 || self.fc_width.0 > self.fc_width.1 {
            return invalid("fc_width range must be nonempty and positive");
        }
        if !(0.0 <= self.dropout.0 && self.dropout.0 <= self.dropout.1 && self.dropout.1 < 1.0) {
            return invalid("dropout range must lie in [0, 1)");
        }
        if self.batch_sizes.is_empty() || self.batch_sizes.contains(&0) {
            return invalid("batch size set must be nonempty and positive");
        }
        Ok(())
    }

    pub fn decode(&self, u: &[f64]) -> HyperPoint {
        let lerp = |t: f64, (lo, hi): (f64, f64)| lo + t.clamp(0.0, 1.0) * (hi - lo);
        let int = |t: f64, (lo, hi): (usize, usize)| lerp(t, (lo as f64, hi as f64)).round() as usize;
        let nb = self.batch_sizes.len();
        let b = (u[3].clamp(0.0, 1.0) * (nb - 1) as f64).round() as usize;
        HyperPoint {
            filters: int(u[0], self.filters),
            dropout: lerp(u[1], self.dropout),
            fc_width: int(u[2], self.fc_width),
            batch_size: self.batch_sizes[b],
        }
    }

    pub fn encode(&self, p: &HyperPoint) -> Vec<f64> {
        let nb = self.batch_sizes.len();
        let b = self.batch_sizes.iter().position(|&s| s == p.batch_size).unwrap_or(0);
        vec![
            to_unit(p.filters as f64, self.filters.0 as f64, self.filters.1 as f64),
            to_unit(p.dropout, self.dropout.0, self.dropout.1),
            to_unit(p.fc_width as f64, self.fc_width.0 as f64, self.fc_width.1 as f64),
            if nb > 1 { b as f64 / (nb - 1) as f64 } else { 0.5 },
        ]
    }

    /// Rounds the integer dimensions of `u`.
    pub fn snap(&self, u: &[f64]) -> Vec<f64> {
        self.encode(&self.decode(u))
    }

    /// Minimizes `objective` over the box; see [`optimize`].
    pub fn optimize(
        &self,
        objective: &mut dyn FnMut(&HyperPoint) -> Result<f64>,
        budget: usize,
        seed: u64,
        prior: Vec<Trial>,
        ledger: Option<&Path>,
    ) -> Result<Vec<Trial>> {
        self.validate()?;
        let snap = |u: &[f64]| self.snap(u);
        let describe = |u: &[f64]| serde_json::to_value(self.decode(u)).unwrap_or_default();
        let mut f = |u: &[f64]| objective(&self.decode(u));
        optimize(&mut f, &describe, Self::DIM, &snap, budget, seed, prior, ledger)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ei_edge_cases() {
        assert_eq!(expected_improvement(1.0, 0.0, 1.0), 0.0);
        assert_eq!(expected_improvement(0.5, 0.0, 1.0), 0.5);
        assert!(expected_improvement(1.0, 0.04, 1.0) < expected_improvement(1.0, 0.09, 1.0));
    }

    #[test]
    fn halton_is_in_cube_and_seeded() {
        let a = halton(100, 4, 7).unwrap();
        assert!(a.iter().flatten().all(|v| (0.0..1.0).contains(v)));
        assert_eq!(a, halton(100, 4, 7).unwrap());
        assert_ne!(a, halton(100, 4, 8).unwrap());
        assert_eq!(radical_inverse(1, 2), 0.5);
        assert_eq!(radical_inverse(3, 2), 0.75);
    }

    #[test]
    fn box_round_trip() {
        let b = HyperBox::default();
        let p = HyperPoint {
            filters: 20,
            dropout: 0.3,
            fc_width: 96,
            batch_size: 64,
        };
        assert_eq!(b.decode(&b.encode(&p)), p);
        let s = b.snap(&[0.123, 0.5, 0.77, 0.4]);
        assert_eq!(b.snap(&s), s);
    }

    #[test]
    fn coincident_points_are_degenerate() {
        assert!(Gp::fit(&[vec![0.5], vec![0.5]], &[1.0, 2.0], 0).is_err());
        assert!(Gp::fit(&[vec![0.5]], &[1.0], 0).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let x: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64 / 5.0, ((i * 7) % 6) as f64 / 5.0]).collect();
        let y = DVector::from_iterator(6, x.iter().map(|r| (3.0 * r[0]).sin() + r[1]));
        let theta = vec![-0.7, -0.2, 0.1, -2.0];
        let f = marginal(&x, &y, &theta).unwrap();
        for k in 0..4 {
            let h = 1e-6;
            let mut p = theta.clone();
            p[k] += h;
            let mut m = theta.clone();
            m[k] -= h;
            let fd = (marginal(&x, &y, &p).unwrap().lml - marginal(&x, &y, &m).unwrap().lml) / (2.0 * h);
            assert!((fd - f.grad[k]).abs() < 1e-5 * (1.0 + fd.abs()), "{k}: {fd} vs {}", f.grad[k]);
        }
    }
}
