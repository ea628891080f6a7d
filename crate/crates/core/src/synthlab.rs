//! Synthetic regime data with known ground truth.
//!
//! Each regime has a prototype built from smooth Gaussian bumps at
//! characteristic NAE locations (an Iceland/Azores dipole for NAO±, a
//! Scandinavian high for SB, a mid-Atlantic ridge for AR), present with
//! channel-dependent amplitude in Z200, Z500, Z700 and MSLP. Regimes follow
//! a four-state Markov chain over consecutive winter days.
//!
//! The Z50 and SST channels carry a precursor: the pattern of the regime
//! `precursor_lead` days ahead. This plants genuinely predictive signal in
//! the inputs so forecast skill beyond persistence is learnable, while the
//! Z500 channel used for labeling reflects only the current regime.

use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::calendar;
use crate::error::{invalid, CoreError, Result};
use crate::gridio::{GridStack, LatLonGrid, VARIABLES};
use crate::labeler::{domain_columns, BBox, RegimeSeries};

/// Regime frequencies in class order (NAO+, NAO-, SB, AR).
pub const PAPER_FREQUENCIES: [f64; 4] = [0.32, 0.19, 0.28, 0.21];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub lat: f64,
    pub lon: f64,
    /// e-folding radius in degrees of arc.
    pub radius: f64,
    pub weight: f64,
}

/// Bump layout per regime in class order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeLayout {
    pub regimes: [Vec<Bump>; 4],
}

impl Default for RegimeLayout {
    fn default() -> Self {
        let b = |lat, lon, weight| Bump {
            lat,
            lon,
            radius: 14.0,
            weight,
        };
        Self {
            regimes: [
                vec![b(65.0, 340.0, -1.0), b(40.0, 330.0, 1.0)],
                vec![b(65.0, 325.0, 1.0), b(42.0, 335.0, -1.0)],
                vec![b(62.0, 18.0, 1.0), b(45.0, 300.0, -0.4)],
                vec![b(52.0, 330.0, 1.0), b(65.0, 5.0, -0.6)],
            ],
        }
    }
}

impl RegimeLayout {
    /// Every bump moved by `dlat`/`dlon` degrees and scaled by `scale`.
    pub fn shifted(&self, dlat: f64, dlon: f64, scale: f64) -> Self {
        let mut out = self.clone();
        for bump in out.regimes.iter_mut().flatten() {
            bump.lat += dlat;
            bump.lon = (bump.lon + dlon).rem_euclid(360.0);
            bump.weight *= scale;
        }
        out
    }

    /// Unit-amplitude pattern of regime `r` on `grid`.
    pub fn pattern(&self, r: usize, grid: &LatLonGrid) -> Vec<f64> {
        let mut out = vec![0.0; grid.points()];
        for (i, &lat) in grid.lats.iter().enumerate() {
            for (j, &lon) in grid.lons.iter().enumerate() {
                out[i * grid.nx() + j] = self.regimes[r]
                    .iter()
                    .map(|b| {
                        let dlon = ((lon - b.lon + 180.0).rem_euclid(360.0) - 180.0) * b.lat.to_radians().cos();
                        let d2 = (lat - b.lat).powi(2) + dlon.powi(2);
                        b.weight * (-d2 / (b.radius * b.radius)).exp()
                    })
                    .sum();
            }
        }
        out
    }
}

/// Relative amplitude of the current-regime pattern in each variable.
pub const CHANNEL_GAIN: [f64; 6] = [0.0, 1.2, 1.0, 0.8, 0.0, 0.7];
/// Relative amplitude of the lead-regime precursor in each variable.
pub const PRECURSOR_GAIN: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 0.6, 0.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub grid: LatLonGrid,
    pub layout: RegimeLayout,
    /// Pattern amplitude in field units.
    pub amplitude: f64,
    /// Precursor amplitude as a fraction of `amplitude`.
    pub precursor_strength: f64,
    pub precursor_lead: usize,
    pub transition: [[f64; 4]; 4],
    /// Standard deviation of the white noise added to every value.
    pub noise_std: f64,
    /// Number of winter days to generate.
    pub days: usize,
    pub start_year: i32,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        for (i, row) in self.transition.iter().enumerate() {
            if row.iter().any(|p| !(0.0..=1.0).contains(p) || !p.is_finite()) {
                return invalid(format!("transition row {i} has entries outside [0, 1]"));
            }
            if (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return invalid(format!("transition row {i} sums to {}", row.iter().sum::<f64>()));
            }
        }
        if !(self.noise_std >= 0.0 && self.amplitude.is_finite()) {
            return invalid("noise std must be nonnegative");
        }
        if self.grid.points() == 0 {
            return invalid("empty grid");
        }
        Ok(())
    }

    /// `[4][V·ny·nx]` current-regime prototypes.
    pub fn prototypes(&self) -> Vec<Vec<f32>> {
        self.channel_fields(&CHANNEL_GAIN, self.amplitude)
    }

    fn precursors(&self) -> Vec<Vec<f32>> {
        self.channel_fields(&PRECURSOR_GAIN, self.amplitude * self.precursor_strength)
    }

    fn channel_fields(&self, gains: &[f64; 6], amp: f64) -> Vec<Vec<f32>> {
        (0..4)
            .map(|r| {
                let p = self.layout.pattern(r, &self.grid);
                gains
                    .iter()
                    .flat_map(|g| p.iter().map(move |v| (amp * g * v) as f32))
                    .collect()
            })
            .collect()
    }

    /// Z500 prototypes restricted to `bbox`, the naming templates for the
    /// labeler.
    pub fn templates(&self, bbox: &BBox) -> Result<Vec<Vec<f64>>> {
        let cols = domain_columns(&self.grid, bbox)?;
        let p = self.grid.points();
        Ok(self
            .prototypes()
            .iter()
            .map(|f| cols.iter().map(|&c| f[2 * p + c] as f64).collect())
            .collect())
    }
}

/// The transition matrix `P_ij = c·S_ij·π_j` (i ≠ j) with `P_ii` closing each
/// row. Symmetric `S` makes the chain reversible with stationary
/// distribution exactly `π`.
pub fn reversible_chain(pi: &[f64; 4], s: &[[f64; 4]; 4], c: f64) -> Result<[[f64; 4]; 4]> {
    let mut p = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            if s[i][j] != s[j][i] {
                return invalid("S must be symmetric");
            }
            if i != j {
                p[i][j] = c * s[i][j] * pi[j];
            }
        }
        let off: f64 = p[i].iter().sum();
        if off > 1.0 {
            return invalid(format!("row {i} leaves no room for self-transitions"));
        }
        p[i][i] = 1.0 - off;
    }
    Ok(p)
}

/// Switching rate giving the `paperlike` preset a lead-5 persistence of
/// about 0.47.
pub const PAPERLIKE_RATE: f64 = 0.2235;

/// Canonical grid, NAE regime frequencies, noise at 0.1× amplitude.
pub fn preset_paperlike() -> SynthSpec {
    let transition = reversible_chain(&PAPER_FREQUENCIES, &[[1.0; 4]; 4], PAPERLIKE_RATE).expect("valid preset");
    SynthSpec {
        grid: LatLonGrid::canonical(),
        layout: RegimeLayout::default(),
        amplitude: 100.0,
        precursor_strength: 0.6,
        precursor_lead: 5,
        transition,
        noise_std: 10.0,
        days: 8000,
        start_year: 1960,
        seed: 0,
    }
}

/// Stationary distribution by solving `πᵀ(P − I) = 0`, `Σπ = 1`.
pub fn stationary_distribution(p: &[[f64; 4]; 4]) -> Result<[f64; 4]> {
    let mut a = DMatrix::zeros(5, 4);
    for i in 0..4 {
        for j in 0..4 {
            a[(j, i)] = p[i][j] - if i == j { 1.0 } else { 0.0 };
        }
        a[(4, i)] = 1.0;
    }
    let mut b = nalgebra::DVector::zeros(5);
    b[4] = 1.0;
    let ata = a.transpose() * &a;
    let atb = a.transpose() * b;
    let x = ata
        .lu()
        .solve(&atb)
        .ok_or_else(|| CoreError::Numerical("singular stationary system".into()))?;
    Ok([x[0], x[1], x[2], x[3]])
}

/// `days` consecutive winter dates starting on 15 November of `start_year`.
pub fn winter_dates(start_year: i32, days: usize) -> Vec<i64> {
    let mut out = Vec::with_capacity(days);
    let mut d = calendar::ymd(start_year, 11, 15).expect("valid date");
    while out.len() < days {
        if calendar::is_winter(d) {
            out.push(d);
        }
        d += 1;
    }
    out
}

fn draw(row: &[f64; 4], rng: &mut ChaCha8Rng) -> usize {
    let mut u: f64 = rng.random();
    for (j, p) in row.iter().enumerate() {
        u -= p;
        if u < 0.0 {
            return j;
        }
    }
    3
}

/// Markov regime path of length `n`, starting from the stationary
/// distribution (uniform when the chain has no unique one).
pub fn simulate_chain(p: &[[f64; 4]; 4], n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let pi = stationary_distribution(p).unwrap_or([0.25; 4]);
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return Ok(out);
    }
    out.push(draw(&pi, rng));
    for t in 1..n {
        out.push(draw(&p[out[t - 1]], rng));
    }
    Ok(out)
}

/// Fields and the true regime of every day.
pub fn simulate(spec: &SynthSpec) -> Result<(GridStack, RegimeSeries)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let path = simulate_chain(&spec.transition, spec.days + spec.precursor_lead, &mut rng)?;
    let dates = winter_dates(spec.start_year, spec.days);
    let protos = spec.prototypes();
    let precs = spec.precursors();
    let size = protos[0].len();
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| CoreError::InvalidArgument(e.to_string()))?;
    let mut data = Vec::with_capacity(spec.days * size);
    for t in 0..spec.days {
        let (cur, ahead) = (&protos[path[t]], &precs[path[t + spec.precursor_lead]]);
        data.extend((0..size).map(|i| {
            let e: f64 = if spec.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            cur[i] + ahead[i] + e as f32
        }));
    }
    let stack = GridStack::new(
        spec.grid.clone(),
        VARIABLES.iter().map(|s| s.to_string()).collect(),
        dates.clone(),
        data,
    )?;
    let series = RegimeSeries::new(dates, path[..spec.days].to_vec(), Vec::new())?;
    Ok((stack, series))
}

/// Monthly teleconnection index series (AR(1), unit stationary variance).
pub fn phase_series(first_year: i32, last_year: i32, phi: f64, rng: &mut ChaCha8Rng) -> Vec<(i32, u32, f64)> {
    let scale = (1.0 - phi * phi).sqrt();
    let mut v: f64 = rng.sample(StandardNormal);
    let mut out = Vec::new();
    for y in first_year..=last_year {
        for m in 1..=12 {
            let e: f64 = rng.sample(StandardNormal);
            v = phi * v + scale * e;
            out.push((y, m, v));
        }
    }
    out
}

pub fn write_phase_csv(path: &Path, rows: &[(i32, u32, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["year", "month", "value"])?;
    for (y, m, v) in rows {
        w.write_record([y.to_string(), m.to_string(), format!("{v:.6}")])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paperlike_chain_is_stationary_at_target() {
        let spec = preset_paperlike();
        let pi = stationary_distribution(&spec.transition).unwrap();
        for (a, b) in pi.iter().zip(PAPER_FREQUENCIES) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_rows_rejected() {
        let mut spec = preset_paperlike();
        spec.transition[1][1] += 0.1;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn winter_calendar() {
        // 2011/12 is a leap winter: 47 + 91 days.
        let d = winter_dates(2011, 139);
        assert_eq!(calendar::format(d[0]), "2011-11-15");
        assert_eq!(calendar::format(d[137]), "2012-03-31");
        assert_eq!(calendar::format(d[138]), "2012-11-15");
    }

    #[test]
    fn prototypes_are_distinguishable() {
        let spec = preset_paperlike();
        let p = spec.prototypes();
        for i in 0..4 {
            for j in i + 1..4 {
                let d: f64 = p[i].iter().zip(&p[j]).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>().sqrt();
                assert!(d > 5.0 * spec.noise_std, "{i} {j} {d}");
            }
        }
    }
}
