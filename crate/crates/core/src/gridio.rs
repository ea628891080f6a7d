//! Gridded fields: the GSK1 on-disk format, bilinear regridding, moving
//! monthly climatologies, anomalies, winter filtering and corrupt-day removal.
//!
//! # GSK1 layout
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! "GSK1"                       4-byte magic
//! T, V, ny, nx                 u32 each
//! lats[ny], lons[nx]           f64
//! dates[T]                     i64, days since 1970-01-01, strictly increasing
//! V × (len: u32, utf-8 bytes)  variable ids
//! data[T][V][ny][nx]           f32, row-major
//! blocks*                      optional trailing blocks
//! ```
//!
//! Each trailing block is a 4-byte tag, a u64 payload length and the payload.
//! `META` carries a UTF-8 JSON document. `ARR8` carries one named array:
//! name (u32 length + UTF-8), rank (u32), dims (u64 each) and f64 values.
//! Readers skip unknown tags.

use std::fs;
use std::io::Write;
use std::path::Path;

use naer_tensor::nn::NamedArray;
use serde::{Deserialize, Serialize};

use crate::calendar;
use crate::error::{invalid, CoreError, Result};

pub const MAGIC: &[u8; 4] = b"GSK1";
pub const VARIABLES: [&str; 6] = ["Z50", "Z200", "Z500", "Z700", "SST", "MSLP"];
pub const SPACING: f64 = 5.625;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatLonGrid {
    pub lats: Vec<f64>,
    pub lons: Vec<f64>,
}

fn strictly_monotone(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] > w[0]) || v.windows(2).all(|w| w[1] < w[0])
}

impl LatLonGrid {
    pub fn new(lats: Vec<f64>, lons: Vec<f64>) -> Result<Self> {
        if lats.iter().chain(&lons).any(|v| !v.is_finite()) {
            return Err(CoreError::Grid("non-finite coordinate".into()));
        }
        if !strictly_monotone(&lats) {
            return Err(CoreError::Grid("latitudes not strictly monotone".into()));
        }
        if lats.iter().any(|l| l.abs() > 90.0) {
            return Err(CoreError::Grid("latitude outside [-90, 90]".into()));
        }
        if lons.iter().any(|l| !(0.0..360.0).contains(l)) {
            return Err(CoreError::Grid("longitude outside [0, 360)".into()));
        }
        if !lons.windows(2).all(|w| w[1] > w[0]) {
            return Err(CoreError::Grid("longitudes not strictly increasing".into()));
        }
        if lons.len() > 2 {
            let d = lons[1] - lons[0];
            if lons.windows(2).any(|w| ((w[1] - w[0]) - d).abs() > 1e-9 * 360.0) {
                return Err(CoreError::Grid("longitude spacing not uniform".into()));
            }
        }
        Ok(Self { lats, lons })
    }

    /// The 32×64 model grid at 5.625°: latitudes `90 − 5.625·i` (north to
    /// south), longitudes `5.625·j` east.
    pub fn canonical() -> Self {
        Self::regular(SPACING)
    }

    /// Global grid with the given spacing, latitudes from 90 southward.
    pub fn regular(spacing: f64) -> Self {
        let ny = (180.0 / spacing).round() as usize;
        let nx = (360.0 / spacing).round() as usize;
        Self {
            lats: (0..ny).map(|i| 90.0 - spacing * i as f64).collect(),
            lons: (0..nx).map(|j| spacing * j as f64).collect(),
        }
    }

    pub fn empty() -> Self {
        Self {
            lats: Vec::new(),
            lons: Vec::new(),
        }
    }

    pub fn ny(&self) -> usize {
        self.lats.len()
    }

    pub fn nx(&self) -> usize {
        self.lons.len()
    }

    pub fn points(&self) -> usize {
        self.ny() * self.nx()
    }

    fn lon_step(&self) -> Option<f64> {
        (self.nx() >= 2).then(|| self.lons[1] - self.lons[0])
    }

    /// True when the longitudes close the circle, so the east neighbour of
    /// the last column is the first column.
    pub fn is_periodic(&self) -> bool {
        self.lon_step()
            .is_some_and(|d| (d * self.nx() as f64 - 360.0).abs() < 1e-6)
    }
}

/// Time × variable × lat × lon stack of `f32` fields.
#[derive(Clone, Debug, PartialEq)]
pub struct GridStack {
    pub grid: LatLonGrid,
    pub variables: Vec<String>,
    pub dates: Vec<i64>,
    pub data: Vec<f32>,
}

fn check_dates(dates: &[i64]) -> Result<()> {
    for (i, w) in dates.windows(2).enumerate() {
        if w[1] <= w[0] {
            return Err(CoreError::NonMonotoneDates {
                index: i + 1,
                prev: w[0],
                next: w[1],
            });
        }
    }
    Ok(())
}

impl GridStack {
    pub fn new(grid: LatLonGrid, variables: Vec<String>, dates: Vec<i64>, data: Vec<f32>) -> Result<Self> {
        let expected = dates.len() * variables.len() * grid.points();
        if data.len() != expected {
            return Err(CoreError::DimensionMismatch(format!(
                "{} values for {} dates × {} variables × {}×{} grid = {expected}",
                data.len(),
                dates.len(),
                variables.len(),
                grid.ny(),
                grid.nx()
            )));
        }
        check_dates(&dates)?;
        Ok(Self {
            grid,
            variables,
            dates,
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    /// Values per day: variables × gridpoints.
    pub fn day_size(&self) -> usize {
        self.variables.len() * self.grid.points()
    }

    pub fn day(&self, t: usize) -> &[f32] {
        let n = self.day_size();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn field(&self, t: usize, v: usize) -> &[f32] {
        let p = self.grid.points();
        &self.day(t)[v * p..(v + 1) * p]
    }

    pub fn variable_index(&self, name: &str) -> Result<usize> {
        self.variables
            .iter()
            .position(|v| v == name)
            .ok_or_else(|| CoreError::InvalidArgument(format!("variable {name} not in stack {:?}", self.variables)))
    }

    pub fn date_index(&self, date: i64) -> Option<usize> {
        self.dates.binary_search(&date).ok()
    }

    /// The days at `indices`, which must be increasing.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.day_size());
        for &t in indices {
            data.extend_from_slice(self.day(t));
        }
        Self {
            grid: self.grid.clone(),
            variables: self.variables.clone(),
            dates: indices.iter().map(|&t| self.dates[t]).collect(),
            data,
        }
    }

    /// Keeps only the named variables, in the given order.
    pub fn select_variables(&self, names: &[&str]) -> Result<Self> {
        let idx: Vec<usize> = names.iter().map(|n| self.variable_index(n)).collect::<Result<_>>()?;
        let mut data = Vec::with_capacity(self.len() * idx.len() * self.grid.points());
        for t in 0..self.len() {
            for &v in &idx {
                data.extend_from_slice(self.field(t, v));
            }
        }
        Ok(Self {
            grid: self.grid.clone(),
            variables: names.iter().map(|s| s.to_string()).collect(),
            dates: self.dates.clone(),
            data,
        })
    }
}

/// A GSK1 file: a grid stack plus optional metadata and named arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct Gsk1 {
    pub stack: GridStack,
    pub meta: Option<serde_json::Value>,
    pub arrays: Vec<NamedArray>,
}

impl Gsk1 {
    /// A container with no gridded data.
    pub fn arrays_only(meta: serde_json::Value, arrays: Vec<NamedArray>) -> Self {
        Self {
            stack: GridStack {
                grid: LatLonGrid::empty(),
                variables: Vec::new(),
                dates: Vec::new(),
                data: Vec::new(),
            },
            meta: Some(meta),
            arrays,
        }
    }

    pub fn array(&self, name: &str) -> Result<&NamedArray> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| CoreError::Format(format!("missing array block {name:?}")))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

pub fn encode(file: &Gsk1) -> Vec<u8> {
    let s = &file.stack;
    let mut out = Vec::with_capacity(64 + s.data.len() * 4);
    out.extend_from_slice(MAGIC);
    for n in [s.dates.len(), s.variables.len(), s.grid.ny(), s.grid.nx()] {
        out.extend_from_slice(&(n as u32).to_le_bytes());
    }
    for v in s.grid.lats.iter().chain(&s.grid.lons) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for d in &s.dates {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in &s.variables {
        put_str(&mut out, v);
    }
    for v in &s.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(meta) = &file.meta {
        let json = meta.to_string();
        out.extend_from_slice(b"META");
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(json.as_bytes());
    }
    for a in &file.arrays {
        let mut payload = Vec::new();
        put_str(&mut payload, &a.name);
        payload.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
        for d in &a.shape {
            payload.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in &a.values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(b"ARR8");
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CoreError::Format(format!("truncated while reading {what}")))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let b = self.take(n.checked_mul(8).ok_or_else(|| CoreError::Format(format!("{what} too large")))?, what)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| CoreError::Format(format!("{what} is not UTF-8")))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub fn decode(bytes: &[u8]) -> Result<Gsk1> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic = c.take(4, "magic")?;
    if magic != MAGIC {
        return Err(CoreError::Format(format!("bad magic {:?}, expected \"GSK1\"", String::from_utf8_lossy(magic))));
    }
    let t = c.u32("header")? as usize;
    let v = c.u32("header")? as usize;
    let ny = c.u32("header")? as usize;
    let nx = c.u32("header")? as usize;
    let lats = c.f64s(ny, "latitudes")?;
    let lons = c.f64s(nx, "longitudes")?;
    let dates: Vec<i64> = c
        .take(t.checked_mul(8).ok_or_else(|| CoreError::Format("date count too large".into()))?, "dates")?
        .chunks_exact(8)
        .map(|b| i64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    let variables = (0..v).map(|_| c.string("variable table")).collect::<Result<Vec<_>>>()?;
    let grid = LatLonGrid::new(lats, lons)?;
    check_dates(&dates)?;
    let n = [t, v, ny, nx]
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| CoreError::DimensionMismatch("header dimensions overflow".into()))?;
    if c.remaining() < n {
        return Err(CoreError::DimensionMismatch(format!(
            "header declares {t}×{v}×{ny}×{nx} values ({n} bytes) but only {} bytes follow",
            c.remaining()
        )));
    }
    let data = c
        .take(n, "data")?
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    let stack = GridStack::new(grid, variables, dates, data)?;

    let mut meta = None;
    let mut arrays = Vec::new();
    while c.remaining() > 0 {
        let tag: [u8; 4] = c.take(4, "block tag")?.try_into().expect("4 bytes");
        let len = usize::try_from(c.u64("block length")?).map_err(|_| CoreError::Format("block too large".into()))?;
        let payload = c.take(len, "block payload")?;
        match &tag {
            b"META" => meta = Some(serde_json::from_slice(payload)?),
            b"ARR8" => arrays.push(decode_array(payload)?),
            _ => log::warn!("skipping unknown GSK1 block {:?}", String::from_utf8_lossy(&tag)),
        }
    }
    Ok(Gsk1 { stack, meta, arrays })
}

fn decode_array(payload: &[u8]) -> Result<NamedArray> {
    let mut c = Cursor { bytes: payload, pos: 0 };
    let name = c.string("array name")?;
    let rank = c.u32("array rank")? as usize;
    let shape = (0..rank)
        .map(|_| c.u64("array dims").map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    let n = n.ok_or_else(|| CoreError::DimensionMismatch(format!("array {name} dims overflow")))?;
    if c.remaining() != n * 8 {
        return Err(CoreError::DimensionMismatch(format!(
            "array {name} declares {shape:?} but carries {} bytes",
            c.remaining()
        )));
    }
    let values = c.f64s(n, "array values")?;
    Ok(NamedArray { name, shape, values })
}

pub fn write_gsk1(path: &Path, file: &Gsk1) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(file))?;
    Ok(())
}

pub fn read_gsk1(path: &Path) -> Result<Gsk1> {
    decode(&fs::read(path)?)
}

pub fn write_gridstack(path: &Path, stack: &GridStack) -> Result<()> {
    write_gsk1(
        path,
        &Gsk1 {
            stack: stack.clone(),
            meta: None,
            arrays: Vec::new(),
        },
    )
}

pub fn read_gridstack(path: &Path) -> Result<GridStack> {
    Ok(read_gsk1(path)?.stack)
}

/// Position of `lat` between two rows of `lats`: `(i, fraction)`.
fn bracket_lat(lats: &[f64], lat: f64) -> Result<(usize, f64)> {
    let n = lats.len();
    let (lo, hi) = if lats[0] <= lats[n - 1] {
        (lats[0], lats[n - 1])
    } else {
        (lats[n - 1], lats[0])
    };
    if lat < lo - 1e-9 || lat > hi + 1e-9 {
        return Err(CoreError::Extrapolation(format!(
            "latitude {lat} outside source range [{lo}, {hi}]"
        )));
    }
    if n == 1 {
        return Ok((0, 0.0));
    }
    let ascending = lats[1] > lats[0];
    let i = (0..n - 1)
        .find(|&i| {
            let (a, b) = (lats[i], lats[i + 1]);
            if ascending {
                lat <= b + 1e-9 && lat >= a - 1e-9
            } else {
                lat >= b - 1e-9 && lat <= a + 1e-9
            }
        })
        .expect("latitude is in range");
    let frac = ((lat - lats[i]) / (lats[i + 1] - lats[i])).clamp(0.0, 1.0);
    Ok(snap(i, frac, n - 1))
}

/// Moves fractions within rounding of a node onto that node so identity
/// regrids are exact.
fn snap(i: usize, frac: f64, last: usize) -> (usize, f64) {
    if frac < 1e-9 {
        (i, 0.0)
    } else if frac > 1.0 - 1e-9 && i < last {
        (i + 1, 0.0)
    } else {
        (i, frac)
    }
}

fn bracket_lon(src: &LatLonGrid, lon: f64) -> Result<(usize, usize, f64)> {
    let nx = src.nx();
    let Some(step) = src.lon_step() else {
        if (lon - src.lons[0]).abs() < 1e-9 {
            return Ok((0, 0, 0.0));
        }
        return Err(CoreError::Extrapolation(format!("longitude {lon} outside single-column source")));
    };
    let pos = (lon - src.lons[0]).rem_euclid(360.0) / step;
    let (i, frac) = snap(pos.floor() as usize, pos - pos.floor(), usize::MAX);
    if src.is_periodic() {
        let i = i % nx;
        return Ok((i, (i + 1) % nx, frac));
    }
    if i >= nx || (i == nx - 1 && frac > 0.0) {
        return Err(CoreError::Extrapolation(format!(
            "longitude {lon} outside non-periodic source [{}, {}]",
            src.lons[0],
            src.lons[nx - 1]
        )));
    }
    Ok((i, (i + 1).min(nx - 1), frac))
}

/// Bilinear interpolation of one field from `src` onto `dst`. Longitude is
/// periodic when `src` spans the full circle.
pub fn regrid_bilinear(field: &[f32], src: &LatLonGrid, dst: &LatLonGrid) -> Result<Vec<f32>> {
    Regridder::new(src, dst)?.apply(field)
}

/// Precomputed bilinear stencils from one grid to another.
pub struct Regridder {
    src_points: usize,
    stencils: Vec<[(usize, f64); 4]>,
}

impl Regridder {
    pub fn new(src: &LatLonGrid, dst: &LatLonGrid) -> Result<Self> {
        if src.points() == 0 {
            return Err(CoreError::Grid("empty source grid".into()));
        }
        let nx = src.nx();
        let rows = dst.lats.iter().map(|&l| bracket_lat(&src.lats, l)).collect::<Result<Vec<_>>>()?;
        let cols = dst.lons.iter().map(|&l| bracket_lon(src, l)).collect::<Result<Vec<_>>>()?;
        let last_row = src.ny() - 1;
        let mut stencils = Vec::with_capacity(dst.points());
        for &(i, fy) in &rows {
            let i1 = (i + 1).min(last_row);
            for &(j0, j1, fx) in &cols {
                stencils.push([
                    (i * nx + j0, (1.0 - fy) * (1.0 - fx)),
                    (i * nx + j1, (1.0 - fy) * fx),
                    (i1 * nx + j0, fy * (1.0 - fx)),
                    (i1 * nx + j1, fy * fx),
                ]);
            }
        }
        Ok(Self {
            src_points: src.points(),
            stencils,
        })
    }

    pub fn apply(&self, field: &[f32]) -> Result<Vec<f32>> {
        if field.len() != self.src_points {
            return Err(CoreError::DimensionMismatch(format!(
                "field has {} values, source grid {}",
                field.len(),
                self.src_points
            )));
        }
        Ok(self
            .stencils
            .iter()
            .map(|s| {
                let mut acc = 0.0f64;
                for &(idx, w) in s {
                    if w != 0.0 {
                        acc += w * field[idx] as f64;
                    }
                }
                acc as f32
            })
            .collect())
    }

    /// Regrids every field of a stack.
    pub fn apply_stack(&self, stack: &GridStack, dst: &LatLonGrid) -> Result<GridStack> {
        let mut data = Vec::with_capacity(stack.len() * stack.variables.len() * dst.points());
        for t in 0..stack.len() {
            for v in 0..stack.variables.len() {
                data.extend(self.apply(stack.field(t, v))?);
            }
        }
        GridStack::new(dst.clone(), stack.variables.clone(), stack.dates.clone(), data)
    }
}

/// One moving-climatology epoch: a window of calendar years and the years
/// whose anomalies it defines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClimEpoch {
    pub start_year: i32,
    pub end_year: i32,
    pub apply_from: i32,
    pub apply_to: i32,
    /// `[12][V·ny·nx]` monthly means; NaN for months without data.
    pub means: Vec<f64>,
    pub counts: [usize; 12],
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClimatologyTable {
    pub grid: LatLonGrid,
    pub variables: Vec<String>,
    pub window: i32,
    pub step: i32,
    pub epochs: Vec<ClimEpoch>,
}

impl ClimatologyTable {
    /// Index of the epoch whose means apply to `year`. Years after the last
    /// applicability range reuse the final epoch.
    pub fn epoch_for(&self, year: i32) -> Option<usize> {
        let first = self.epochs.first()?;
        if year < first.apply_from {
            return None;
        }
        Some(
            self.epochs
                .iter()
                .position(|e| year <= e.apply_to)
                .unwrap_or(self.epochs.len() - 1),
        )
    }

    /// Monthly mean field (`V·ny·nx` values) used for `date`.
    pub fn mean_for(&self, date: i64) -> Result<&[f64]> {
        let year = calendar::year(date);
        let k = self.epoch_for(year).ok_or_else(|| CoreError::Coverage {
            date: calendar::format(date),
            reason: "before the first climatology epoch".into(),
        })?;
        let e = &self.epochs[k];
        let m = calendar::month(date) as usize - 1;
        if e.counts[m] == 0 {
            return Err(CoreError::Coverage {
                date: calendar::format(date),
                reason: format!("epoch {}-{} has no data for month {}", e.start_year, e.end_year, m + 1),
            });
        }
        let n = self.variables.len() * self.grid.points();
        Ok(&e.means[m * n..(m + 1) * n])
    }
}

/// Moving monthly climatology. Epoch windows cover the calendar years
/// `start..=start + window`, starting at the stack's first year and moving by
/// `step`. The first epoch defines anomalies for its own window; each later
/// epoch defines them for the `step` years ending at its window's last year.
pub fn build_climatology(stack: &GridStack, window: i32, step: i32) -> Result<ClimatologyTable> {
    if window <= 0 || step <= 0 {
        return invalid("window and step must be positive");
    }
    let (Some(&first), Some(&last)) = (stack.dates.first(), stack.dates.last()) else {
        return invalid("empty stack");
    };
    let (y0, y1) = (calendar::year(first), calendar::year(last));
    if y1 - y0 < window {
        return invalid(format!("stack spans {y0}-{y1}, shorter than the {window}-year window"));
    }
    let n = stack.day_size();
    let years: Vec<i32> = stack.dates.iter().map(|&d| calendar::year(d)).collect();
    let months: Vec<usize> = stack.dates.iter().map(|&d| calendar::month(d) as usize - 1).collect();
    let mut epochs = Vec::new();
    let mut start = y0;
    while start + window <= y1 {
        let end = start + window;
        let mut sums = vec![0.0f64; 12 * n];
        let mut counts = [0usize; 12];
        for t in 0..stack.len() {
            if years[t] < start || years[t] > end {
                continue;
            }
            let m = months[t];
            counts[m] += 1;
            for (s, v) in sums[m * n..(m + 1) * n].iter_mut().zip(stack.day(t)) {
                *s += *v as f64;
            }
        }
        for m in 0..12 {
            let row = &mut sums[m * n..(m + 1) * n];
            if counts[m] == 0 {
                row.fill(f64::NAN);
            } else {
                row.iter_mut().for_each(|s| *s /= counts[m] as f64);
            }
        }
        let apply_from = match epochs.last() {
            None => start,
            Some(ClimEpoch { apply_to, .. }) => apply_to + 1,
        };
        epochs.push(ClimEpoch {
            start_year: start,
            end_year: end,
            apply_from,
            apply_to: end,
            means: sums,
            counts,
        });
        start += step;
    }
    Ok(ClimatologyTable {
        grid: stack.grid.clone(),
        variables: stack.variables.clone(),
        window,
        step,
        epochs,
    })
}

fn check_compatible(stack: &GridStack, clim: &ClimatologyTable) -> Result<()> {
    if stack.grid != clim.grid || stack.variables != clim.variables {
        return Err(CoreError::DimensionMismatch(
            "stack grid or variables differ from the climatology's".into(),
        ));
    }
    Ok(())
}

/// `raw − climatology(month, epoch)` for every day.
pub fn anomalies(stack: &GridStack, clim: &ClimatologyTable) -> Result<GridStack> {
    check_compatible(stack, clim)?;
    let mut data = Vec::with_capacity(stack.data.len());
    for t in 0..stack.len() {
        let mean = clim.mean_for(stack.dates[t])?;
        data.extend(stack.day(t).iter().zip(mean).map(|(r, m)| (*r as f64 - m) as f32));
    }
    GridStack::new(stack.grid.clone(), stack.variables.clone(), stack.dates.clone(), data)
}

/// Inverse of [`anomalies`].
pub fn add_climatology(anoms: &GridStack, clim: &ClimatologyTable) -> Result<GridStack> {
    check_compatible(anoms, clim)?;
    let mut data = Vec::with_capacity(anoms.data.len());
    for t in 0..anoms.len() {
        let mean = clim.mean_for(anoms.dates[t])?;
        data.extend(anoms.day(t).iter().zip(mean).map(|(a, m)| (*a as f64 + m) as f32));
    }
    GridStack::new(anoms.grid.clone(), anoms.variables.clone(), anoms.dates.clone(), data)
}

/// Keeps the days from 15 November to 31 March inclusive.
pub fn winter_filter(stack: &GridStack) -> GridStack {
    let keep: Vec<usize> = (0..stack.len()).filter(|&t| calendar::is_winter(stack.dates[t])).collect();
    stack.select(&keep)
}

/// One variable of one removed day.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Removal {
    pub date: String,
    pub variable: String,
    pub count_invalid: usize,
}

/// Removes every day with a NaN or infinite value in any variable.
pub fn drop_corrupt(stack: &GridStack) -> (GridStack, Vec<Removal>) {
    let mut keep = Vec::with_capacity(stack.len());
    let mut report = Vec::new();
    for t in 0..stack.len() {
        let mut clean = true;
        for (v, name) in stack.variables.iter().enumerate() {
            let bad = stack.field(t, v).iter().filter(|x| !x.is_finite()).count();
            if bad > 0 {
                clean = false;
                report.push(Removal {
                    date: calendar::format(stack.dates[t]),
                    variable: name.clone(),
                    count_invalid: bad,
                });
            }
        }
        if clean {
            keep.push(t);
        }
    }
    (stack.select(&keep), report)
}

pub fn write_removals_csv(path: &Path, report: &[Removal]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if report.is_empty() {
        w.write_record(["date", "variable", "count_invalid"])?;
    }
    for r in report {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
