//! Integrated Gradients, SmoothGrad and SmoothGrad-Squared attributions of
//! a class logit with respect to the input field.

use std::path::Path;

use naer_tensor::nn::Network;
use naer_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, CoreError, Result};
use crate::gridio::{GridStack, Gsk1, LatLonGrid};
use crate::metrics::argmax;
use crate::seeds;
use crate::trainer::{ModelCheckpoint, Normalization};

/// A differentiable scorer over flat inputs.
pub trait Attributable {
    fn input_len(&self) -> usize;
    fn classes(&self) -> usize;
    /// Logits `[n][classes]` for `n` stacked inputs.
    fn logits(&self, inputs: &[f64]) -> Result<Vec<Vec<f64>>>;
    /// Gradient of logit `class` for each of the stacked inputs.
    fn logit_grads(&self, inputs: &[f64], class: usize) -> Result<Vec<Vec<f64>>>;
}

/// Affine scorer `z_c = w_c · x + b_c`.
#[derive(Clone, Debug)]
pub struct LinearModel {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl Attributable for LinearModel {
    fn input_len(&self) -> usize {
        self.weights[0].len()
    }

    fn classes(&self) -> usize {
        self.weights.len()
    }

    fn logits(&self, inputs: &[f64]) -> Result<Vec<Vec<f64>>> {
        Ok(inputs
            .chunks(self.input_len())
            .map(|x| {
                self.weights
                    .iter()
                    .zip(&self.bias)
                    .map(|(w, b)| w.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + b)
                    .collect()
            })
            .collect())
    }

    fn logit_grads(&self, inputs: &[f64], class: usize) -> Result<Vec<Vec<f64>>> {
        Ok(vec![self.weights[class].clone(); inputs.len() / self.input_len()])
    }
}

/// A checkpointed network in double precision taking raw anomaly fields.
pub struct NetworkModel {
    net: Network<f64>,
    norm: Normalization,
    shape: [usize; 3],
    /// Inputs per forward pass.
    pub chunk: usize,
}

impl NetworkModel {
    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Result<Self> {
        let s = &ckpt.spec;
        Ok(Self {
            net: ckpt.network::<f64>()?,
            norm: ckpt.norm.clone(),
            shape: [s.in_channels, s.height, s.width],
            chunk: 32,
        })
    }

    fn normalized(&self, inputs: &[f64]) -> Result<Tensor<f64>> {
        let p = self.shape[1] * self.shape[2];
        let data = inputs
            .chunks(p)
            .enumerate()
            .flat_map(|(i, f)| {
                let c = i % self.shape[0];
                let (m, s) = (self.norm.mean[c], self.norm.std[c]);
                f.iter().map(move |v| (v - m) / s)
            })
            .collect();
        let n = inputs.len() / self.input_len();
        Ok(Tensor::param(data, &[n, self.shape[0], self.shape[1], self.shape[2]])?)
    }
}

impl Attributable for NetworkModel {
    fn input_len(&self) -> usize {
        self.shape.iter().product()
    }

    fn classes(&self) -> usize {
        self.net.spec().classes
    }

    fn logits(&self, inputs: &[f64]) -> Result<Vec<Vec<f64>>> {
        let k = self.classes();
        let mut out = Vec::new();
        for part in inputs.chunks(self.chunk * self.input_len()) {
            let x = self.normalized(part)?;
            let z = naer_tensor::no_grad(|| self.net.forward_eval(&x))?;
            out.extend(z.to_vec().chunks(k).map(|r| r.to_vec()));
        }
        Ok(out)
    }

    fn logit_grads(&self, inputs: &[f64], class: usize) -> Result<Vec<Vec<f64>>> {
        let len = self.input_len();
        let p = self.shape[1] * self.shape[2];
        let mut out = Vec::new();
        for part in inputs.chunks(self.chunk * len) {
            let x = self.normalized(part)?;
            let z = self.net.forward_eval(&x)?;
            z.slice(1, class, class + 1)?.sum_all().backward()?;
            let g = x.grad().ok_or_else(|| CoreError::Numerical("input received no gradient".into()))?;
            for sample in g.chunks(len) {
                let raw = sample
                    .chunks(p)
                    .enumerate()
                    .flat_map(|(c, f)| f.iter().map(move |v| v / self.norm.std[c]))
                    .collect();
                out.push(raw);
            }
        }
        Ok(out)
    }
}

fn check_input(model: &dyn Attributable, x: &[f64], class: usize) -> Result<()> {
    if x.len() != model.input_len() {
        return Err(CoreError::DimensionMismatch(format!("input has {} values, model expects {}", x.len(), model.input_len())));
    }
    if class >= model.classes() {
        return invalid(format!("class {class} out of range"));
    }
    Ok(())
}

/// `(x − x′) ⊙ (1/m) Σᵢ ∇F(x′ + (i − ½)/m · (x − x′))`, the midpoint rule for
/// the path integral of the gradient of logit `class`.
pub fn integrated_gradients(model: &dyn Attributable, x: &[f64], baseline: &[f64], class: usize, steps: usize) -> Result<Vec<f64>> {
    check_input(model, x, class)?;
    if baseline.len() != x.len() {
        return Err(CoreError::DimensionMismatch("input and baseline differ in shape".into()));
    }
    if steps == 0 {
        return invalid("steps must be at least 1");
    }
    let diff: Vec<f64> = x.iter().zip(baseline).map(|(a, b)| a - b).collect();
    let mut path = Vec::with_capacity(steps * x.len());
    for i in 0..steps {
        let a = (i as f64 + 0.5) / steps as f64;
        path.extend(baseline.iter().zip(&diff).map(|(b, d)| b + a * d));
    }
    let grads = model.logit_grads(&path, class)?;
    let mut total = vec![0.0; x.len()];
    for g in &grads {
        for (t, v) in total.iter_mut().zip(g) {
            *t += v;
        }
    }
    Ok(total.iter().zip(&diff).map(|(t, d)| d * t / steps as f64).collect())
}

fn noisy_mean(attr: &dyn Fn(&[f64]) -> Result<Vec<f64>>, x: &[f64], sigma: f64, n: usize, seed: u64, square: bool) -> Result<Vec<f64>> {
    if !(sigma >= 0.0) || n == 0 {
        return invalid("smoothgrad needs sigma >= 0 and at least one sample");
    }
    if sigma == 0.0 {
        return Ok(attr(x)?.into_iter().map(|v| if square { v * v } else { v }).collect());
    }
    let noise = Normal::new(0.0, sigma).map_err(|e| CoreError::InvalidArgument(e.to_string()))?;
    let mut acc = vec![0.0; x.len()];
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::split_mix64(seed ^ seeds::split_mix64(i as u64)));
        let xn: Vec<f64> = x.iter().map(|v| v + noise.sample(&mut rng)).collect();
        let a = attr(&xn)?;
        for (s, v) in acc.iter_mut().zip(a) {
            *s += if square { v * v } else { v };
        }
    }
    Ok(acc.into_iter().map(|v| v / n as f64).collect())
}

/// Mean attribution over `n` copies of `x` with N(0, σ²) noise.
pub fn smoothgrad(attr: &dyn Fn(&[f64]) -> Result<Vec<f64>>, x: &[f64], sigma: f64, n: usize, seed: u64) -> Result<Vec<f64>> {
    noisy_mean(attr, x, sigma, n, seed, false)
}

/// Mean of squared attributions over `n` noisy copies of `x`.
pub fn smoothgrad_squared(attr: &dyn Fn(&[f64]) -> Result<Vec<f64>>, x: &[f64], sigma: f64, n: usize, seed: u64) -> Result<Vec<f64>> {
    noisy_mean(attr, x, sigma, n, seed, true)
}

/// `(v − min) / (max − min)`; a constant map becomes all zeros.
pub fn normalize01(map: &[f64]) -> Vec<f64> {
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; map.len()];
    }
    map.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ig,
    Sg,
    Sgsq,
}

impl std::str::FromStr for Method {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "").as_str() {
            "ig" => Ok(Method::Ig),
            "sg" => Ok(Method::Sg),
            "sgsq" => Ok(Method::Sgsq),
            _ => invalid(format!("unknown attribution method {s:?} (ig, sg, sgsq)")),
        }
    }
}

/// Which logit to explain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Predicted,
    True,
    Class(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainConfig {
    pub method: Method,
    pub steps: usize,
    /// SmoothGrad noise as a fraction of the input's standard deviation.
    pub noise_frac: f64,
    pub samples: usize,
    pub target: Target,
    pub seed: u64,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            method: Method::Sgsq,
            steps: 64,
            noise_frac: 0.1,
            samples: 50,
            target: Target::Predicted,
            seed: 0,
        }
    }
}

/// Importance per variable and grid point.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributionMap {
    pub grid: LatLonGrid,
    pub variables: Vec<String>,
    pub date: Option<i64>,
    pub class: usize,
    pub method: Method,
    pub normalized: bool,
    pub values: Vec<f64>,
}

impl AttributionMap {
    /// Map and raw field as named arrays `attribution` and `input`.
    pub fn to_gsk1(&self, input: &[f64]) -> Gsk1 {
        let shape = vec![self.variables.len(), self.grid.ny(), self.grid.nx()];
        let meta = serde_json::json!({
            "kind": "attribution",
            "variables": self.variables,
            "lats": self.grid.lats,
            "lons": self.grid.lons,
            "date": self.date.map(crate::calendar::format),
            "class": crate::labeler::Regime::ALL[self.class].name(),
            "method": self.method,
            "normalized": self.normalized,
        });
        Gsk1::arrays_only(
            meta,
            vec![
                naer_tensor::nn::NamedArray {
                    name: "attribution".into(),
                    shape: shape.clone(),
                    values: self.values.clone(),
                },
                naer_tensor::nn::NamedArray {
                    name: "input".into(),
                    shape,
                    values: input.to_vec(),
                },
            ],
        )
    }

    /// `variable,lat,lon,input,attribution` rows.
    pub fn write_csv(&self, path: &Path, input: &[f64]) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["variable", "lat", "lon", "input", "attribution"])?;
        let (ny, nx) = (self.grid.ny(), self.grid.nx());
        for (v, name) in self.variables.iter().enumerate() {
            for i in 0..ny {
                for j in 0..nx {
                    let k = (v * ny + i) * nx + j;
                    w.write_record([
                        name.clone(),
                        self.grid.lats[i].to_string(),
                        self.grid.lons[j].to_string(),
                        input[k].to_string(),
                        self.values[k].to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub fn resolve_target(model: &dyn Attributable, x: &[f64], target: Target, truth: Option<usize>) -> Result<usize> {
    match target {
        Target::Predicted => Ok(argmax(&model.logits(x)?[0])),
        Target::True => truth.ok_or_else(|| CoreError::InvalidArgument("no true label for this date".into())),
        Target::Class(c) if c < model.classes() => Ok(c),
        Target::Class(c) => invalid(format!("class {c} out of range")),
    }
}

/// Explains row `t` of `anoms` against the all-zero anomaly baseline and
/// returns the normalized map together with the raw input.
pub fn explain(ckpt: &ModelCheckpoint, anoms: &GridStack, t: usize, truth: Option<usize>, cfg: &ExplainConfig) -> Result<(AttributionMap, Vec<f64>)> {
    if t >= anoms.len() {
        return invalid(format!("row {t} outside the stack"));
    }
    let model = NetworkModel::from_checkpoint(ckpt)?;
    let x: Vec<f64> = anoms.day(t).iter().map(|&v| v as f64).collect();
    check_input(&model, &x, 0)?;
    let class = resolve_target(&model, &x, cfg.target, truth)?;
    let baseline = vec![0.0; x.len()];
    let ig = |inp: &[f64]| integrated_gradients(&model, inp, &baseline, class, cfg.steps);
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let sigma = cfg.noise_frac * (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let raw = match cfg.method {
        Method::Ig => ig(&x)?,
        Method::Sg => smoothgrad(&ig, &x, sigma, cfg.samples, cfg.seed)?,
        Method::Sgsq => smoothgrad_squared(&ig, &x, sigma, cfg.samples, cfg.seed)?,
    };
    let map = AttributionMap {
        grid: anoms.grid.clone(),
        variables: anoms.variables.clone(),
        date: Some(anoms.dates[t]),
        class,
        method: cfg.method,
        normalized: true,
        values: normalize01(&raw),
    };
    Ok((map, x))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize01(&[0.0, 5.0, 10.0]), vec![0.0, 0.5, 1.0]);
        assert_eq!(normalize01(&[3.0; 4]), vec![0.0; 4]);
        let once = normalize01(&[0.2, -1.0, 4.0]);
        assert_eq!(normalize01(&once), once);
    }

    #[test]
    fn zero_path_gives_zero() {
        let m = LinearModel {
            weights: vec![vec![1.0, -2.0, 3.0]; 4],
            bias: vec![0.0; 4],
        };
        let x = [0.3, 0.1, -0.7];
        assert_eq!(integrated_gradients(&m, &x, &x, 2, 8).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn method_names() {
        assert_eq!("SG-SQ".parse::<Method>().unwrap(), Method::Sgsq);
        assert!("occlusion".parse::<Method>().is_err());
    }
}
