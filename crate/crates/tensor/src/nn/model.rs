//! Block-structured (deformable) convolutional classifier.
//!
//! Each block is `conv → batch norm → leaky ReLU → dropout → 2×2 max-pool`,
//! where `conv` is deformable or regular per block. The head flattens,
//! applies a dense layer, dropout and leaky ReLU, then a dense layer onto the
//! class logits.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use super::conv::{conv2d, deform_conv2d};
use super::functional::{batch_norm, dropout, leaky_relu, linear, max_pool2d, softmax, RunningStats};
use crate::{no_grad, Element, Result, Tensor, TensorError};

pub const NUM_CLASSES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub deformable: bool,
    pub filters: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub blocks: Vec<BlockSpec>,
    pub kernel: usize,
    pub dropout: f64,
    pub fc_width: usize,
    pub classes: usize,
    /// Max-pool stride; the pool window is always 2×2.
    pub pool_stride: usize,
    pub leaky_slope: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self::deformable(8, 0.2, 64)
    }
}

impl ModelSpec {
    /// Three deformable blocks of `filters` each on the 6×32×64 input.
    pub fn deformable(filters: usize, dropout: f64, fc_width: usize) -> Self {
        Self {
            in_channels: 6,
            height: 32,
            width: 64,
            blocks: vec![
                BlockSpec {
                    deformable: true,
                    filters
                };
                3
            ],
            kernel: 3,
            dropout,
            fc_width,
            classes: NUM_CLASSES,
            pool_stride: 2,
            leaky_slope: 0.01,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TensorError::InvalidArgument(msg));
        if self.classes != NUM_CLASSES {
            return bad(format!("classes must be {NUM_CLASSES}, got {}", self.classes));
        }
        if self.blocks.iter().any(|b| b.filters == 0) {
            return bad("every block needs at least one filter".into());
        }
        if self.in_channels == 0 || self.fc_width == 0 || self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return bad("channels and fc width must be positive, kernel positive and odd".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.pool_stride == 0 {
            return bad("pool stride must be positive".into());
        }
        self.flat_features().map(|_| ())
    }

    /// Spatial size after each block, ending with the flattened width.
    pub fn flat_features(&self) -> Result<usize> {
        let (mut h, mut w) = (self.height, self.width);
        let mut c = self.in_channels;
        for (i, b) in self.blocks.iter().enumerate() {
            if h < 2 || w < 2 {
                return Err(TensorError::InvalidArgument(format!(
                    "block {i} receives {h}x{w}, too small to pool"
                )));
            }
            h = (h - 2) / self.pool_stride + 1;
            w = (w - 2) / self.pool_stride + 1;
            c = b.filters;
        }
        Ok(c * h * w)
    }
}

/// A named parameter or buffer exported for checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug)]
struct ConvBlock<T: Element> {
    weight: Tensor<T>,
    bias: Tensor<T>,
    offset: Option<(Tensor<T>, Tensor<T>)>,
    gamma: Tensor<T>,
    beta: Tensor<T>,
    running: RunningStats<T>,
}

#[derive(Debug)]
pub struct Network<T: Element> {
    spec: ModelSpec,
    blocks: Vec<ConvBlock<T>>,
    fc1: (Tensor<T>, Tensor<T>),
    fc2: (Tensor<T>, Tensor<T>),
}

fn kaiming_uniform<T: Element, R: Rng + ?Sized>(
    rng: &mut R,
    shape: &[usize],
    fan_in: usize,
    slope: f64,
) -> Result<Tensor<T>> {
    let bound = (6.0 / ((1.0 + slope * slope) * fan_in as f64)).sqrt();
    let n: usize = shape.iter().product();
    let values = (0..n)
        .map(|_| T::cast(rng.random_range(-bound..bound)))
        .collect();
    Tensor::param(values, shape)
}

fn zeros_param<T: Element>(shape: &[usize]) -> Result<Tensor<T>> {
    Tensor::param(vec![T::zero(); shape.iter().product()], shape)
}

impl<T: Element> Network<T> {
    /// Fresh network: Kaiming-uniform weights, zero biases, unit batch-norm
    /// scale, and zero offset kernels so deformable blocks start out as
    /// regular convolutions.
    pub fn new<R: Rng + ?Sized>(spec: ModelSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let k = spec.kernel;
        let taps = k * k;
        let mut c = spec.in_channels;
        let mut blocks = Vec::with_capacity(spec.blocks.len());
        for b in &spec.blocks {
            let f = b.filters;
            let offset = if b.deformable {
                Some((zeros_param(&[2 * taps, c, k, k])?, zeros_param(&[2 * taps])?))
            } else {
                None
            };
            blocks.push(ConvBlock {
                weight: kaiming_uniform(rng, &[f, c, k, k], c * taps, spec.leaky_slope)?,
                bias: zeros_param(&[f])?,
                offset,
                gamma: Tensor::param(vec![T::one(); f], &[f])?,
                beta: zeros_param(&[f])?,
                running: RunningStats::new(f),
            });
            c = f;
        }
        let flat = spec.flat_features()?;
        let fc1 = (
            kaiming_uniform(rng, &[flat, spec.fc_width], flat, spec.leaky_slope)?,
            zeros_param(&[spec.fc_width])?,
        );
        let fc2 = (
            kaiming_uniform(rng, &[spec.fc_width, spec.classes], spec.fc_width, 1.0)?,
            zeros_param(&[spec.classes])?,
        );
        Ok(Self {
            spec,
            blocks,
            fc1,
            fc2,
        })
    }

    /// Network with all parameters and buffers taken from `arrays`.
    pub fn from_arrays(spec: ModelSpec, arrays: &[NamedArray]) -> Result<Self> {
        let mut rng = StdRng::seed_from_u64(0);
        let mut net = Self::new(spec, &mut rng)?;
        net.load_arrays(arrays)?;
        Ok(net)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// Trainable tensors with stable names.
    pub fn named_parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.weight"), b.weight.clone()));
            out.push((format!("block{i}.bias"), b.bias.clone()));
            if let Some((ow, ob)) = &b.offset {
                out.push((format!("block{i}.offset_weight"), ow.clone()));
                out.push((format!("block{i}.offset_bias"), ob.clone()));
            }
            out.push((format!("block{i}.gamma"), b.gamma.clone()));
            out.push((format!("block{i}.beta"), b.beta.clone()));
        }
        out.push(("fc1.weight".into(), self.fc1.0.clone()));
        out.push(("fc1.bias".into(), self.fc1.1.clone()));
        out.push(("fc2.weight".into(), self.fc2.0.clone()));
        out.push(("fc2.bias".into(), self.fc2.1.clone()));
        out
    }

    pub fn parameters(&self) -> Vec<Tensor<T>> {
        self.named_parameters().into_iter().map(|(_, t)| t).collect()
    }

    /// Parameters followed by batch-norm running statistics, as `f64`.
    pub fn to_arrays(&self) -> Vec<NamedArray> {
        let mut out: Vec<NamedArray> = self
            .named_parameters()
            .into_iter()
            .map(|(name, t)| NamedArray {
                name,
                shape: t.shape().to_vec(),
                values: t.data().iter().map(|v| v.as_f64()).collect(),
            })
            .collect();
        for (i, b) in self.blocks.iter().enumerate() {
            let n = b.running.mean.len();
            out.push(NamedArray {
                name: format!("block{i}.running_mean"),
                shape: vec![n],
                values: b.running.mean.iter().map(|v| v.as_f64()).collect(),
            });
            out.push(NamedArray {
                name: format!("block{i}.running_var"),
                shape: vec![n],
                values: b.running.var.iter().map(|v| v.as_f64()).collect(),
            });
        }
        out
    }

    pub fn load_arrays(&mut self, arrays: &[NamedArray]) -> Result<()> {
        let find = |name: &str, shape: &[usize]| -> Result<Vec<T>> {
            let a = arrays
                .iter()
                .find(|a| a.name == name)
                .ok_or_else(|| TensorError::InvalidArgument(format!("missing array {name}")))?;
            if a.shape != shape || a.values.len() != shape.iter().product::<usize>() {
                return Err(TensorError::ShapeMismatch {
                    op: "load_arrays",
                    lhs: shape.to_vec(),
                    rhs: a.shape.clone(),
                });
            }
            Ok(a.values.iter().map(|v| T::cast(*v)).collect())
        };
        for (name, t) in self.named_parameters() {
            t.set_data(&find(&name, t.shape())?)?;
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let n = b.running.mean.len();
            b.running.mean = find(&format!("block{i}.running_mean"), &[n])?;
            b.running.var = find(&format!("block{i}.running_var"), &[n])?;
        }
        Ok(())
    }

    fn run<R: Rng + ?Sized>(
        &self,
        x: &Tensor<T>,
        mut rng: Option<&mut R>,
        mut stats: Option<&mut Vec<RunningStats<T>>>,
    ) -> Result<Tensor<T>> {
        let s = &self.spec;
        let expected = [s.in_channels, s.height, s.width];
        if x.rank() != 4 || x.shape()[1..] != expected {
            return Err(TensorError::BadShape {
                op: "network",
                expected: format!("[B, {}, {}, {}]", s.in_channels, s.height, s.width),
                got: x.shape().to_vec(),
            });
        }
        let pad = s.kernel / 2;
        let train = rng.is_some();
        let mut h = x.clone();
        for (i, b) in self.blocks.iter().enumerate() {
            h = match &b.offset {
                Some((ow, ob)) => {
                    let off = conv2d(&h, ow, Some(ob), 1, pad)?;
                    deform_conv2d(&h, &off, &b.weight, Some(&b.bias), 1, pad)?
                }
                None => conv2d(&h, &b.weight, Some(&b.bias), 1, pad)?,
            };
            h = match stats.as_deref_mut() {
                Some(st) => batch_norm(
                    &h,
                    &b.gamma,
                    &b.beta,
                    &mut st[i],
                    train,
                    s.bn_momentum,
                    s.bn_eps,
                )?,
                None => {
                    let mut frozen = b.running.clone();
                    batch_norm(&h, &b.gamma, &b.beta, &mut frozen, false, s.bn_momentum, s.bn_eps)?
                }
            };
            h = leaky_relu(&h, s.leaky_slope)?;
            h = dropout(&h, s.dropout, rng.as_deref_mut())?;
            h = max_pool2d(&h, 2, s.pool_stride)?;
        }
        let batch = h.shape()[0];
        let flat = h.numel() / batch.max(1);
        h = h.reshape(&[batch, flat])?;
        h = linear(&h, &self.fc1.0, &self.fc1.1)?;
        h = dropout(&h, s.dropout, rng)?;
        h = leaky_relu(&h, s.leaky_slope)?;
        linear(&h, &self.fc2.0, &self.fc2.1)
    }

    /// Training-mode logits: batch statistics, active dropout, and running
    /// statistics updated.
    pub fn forward_train<R: Rng + ?Sized>(&mut self, x: &Tensor<T>, rng: &mut R) -> Result<Tensor<T>> {
        let mut stats: Vec<_> = self.blocks.iter().map(|b| b.running.clone()).collect();
        let out = self.run(x, Some(rng), Some(&mut stats))?;
        for (b, s) in self.blocks.iter_mut().zip(stats) {
            b.running = s;
        }
        Ok(out)
    }

    /// Eval-mode logits. Every sample is processed independently of the rest
    /// of the batch.
    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.run::<StdRng>(x, None, None)
    }

    /// Eval-mode class probabilities without recording a graph.
    pub fn predict_proba(&self, x: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
        no_grad(|| {
            let p = softmax(&self.forward_eval(x)?)?;
            Ok(p.to_vec()
                .chunks(self.spec.classes)
                .map(|r| r.iter().map(|v| v.as_f64()).collect())
                .collect())
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    fn small_spec() -> ModelSpec {
        ModelSpec {
            in_channels: 2,
            height: 8,
            width: 8,
            blocks: vec![
                BlockSpec {
                    deformable: true,
                    filters: 3,
                },
                BlockSpec {
                    deformable: false,
                    filters: 2,
                },
            ],
            kernel: 3,
            dropout: 0.3,
            fc_width: 5,
            classes: 4,
            pool_stride: 2,
            leaky_slope: 0.01,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    #[test]
    fn default_spec_sizes() {
        let s = ModelSpec::default();
        s.validate().unwrap();
        // 32x64 → 16x32 → 8x16 → 4x8
        assert_eq!(s.flat_features().unwrap(), 8 * 4 * 8);
        let mut bad = s.clone();
        bad.classes = 3;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn arrays_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Network::<f32>::new(small_spec(), &mut rng).unwrap();
        let x = Tensor::from_vec((0..4 * 2 * 64).map(|i| (i as f32 * 0.1).sin()).collect(), &[4, 2, 8, 8]).unwrap();
        net.forward_train(&x, &mut rng).unwrap();
        let arrays = net.to_arrays();
        let copy = Network::<f32>::from_arrays(small_spec(), &arrays).unwrap();
        assert_eq!(copy.to_arrays(), arrays);
        assert_eq!(
            net.predict_proba(&x).unwrap(),
            copy.predict_proba(&x).unwrap()
        );
    }

    #[test]
    fn eval_is_batch_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Network::<f32>::new(small_spec(), &mut rng).unwrap();
        let data: Vec<f32> = (0..5 * 128).map(|i| (i as f32 * 0.37).cos()).collect();
        let batch = Tensor::from_vec(data.clone(), &[5, 2, 8, 8]).unwrap();
        let all = net.predict_proba(&batch).unwrap();
        for i in 0..5 {
            let one = Tensor::from_vec(data[i * 128..(i + 1) * 128].to_vec(), &[1, 2, 8, 8]).unwrap();
            let p = net.predict_proba(&one).unwrap();
            for (a, b) in p[0].iter().zip(&all[i]) {
                assert!((a - b).abs() < 1e-6);
            }
            assert!((all[i].iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Network::<f32>::new(small_spec(), &mut rng).unwrap();
        assert!(net.forward_eval(&Tensor::zeros(&[1, 3, 8, 8])).is_err());
    }
}
