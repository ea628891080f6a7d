//! Activation, pooling, normalization and loss operations.

use rand::Rng;

use crate::{Backward, Element, Result, Tensor, TensorError};

struct LeakyReluOp<T> {
    slope: T,
}

impl<T: Element> Backward<T> for LeakyReluOp<T> {
    fn name(&self) -> &'static str {
        "leaky_relu"
    }

    fn backward(&self, inputs: &[Tensor<T>], _out: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        let x = inputs[0].data();
        vec![Some(
            x.iter()
                .zip(g)
                .map(|(x, g)| if *x > T::zero() { *g } else { *g * self.slope })
                .collect(),
        )]
    }
}

pub fn leaky_relu<T: Element>(x: &Tensor<T>, slope: f64) -> Result<Tensor<T>> {
    if !(slope.is_finite() && slope >= 0.0) {
        return Err(TensorError::InvalidArgument(format!(
            "leaky_relu slope must be finite and nonnegative, got {slope}"
        )));
    }
    let s = T::cast(slope);
    let out = x
        .data()
        .iter()
        .map(|v| if *v > T::zero() { *v } else { *v * s })
        .collect();
    Ok(Tensor::from_op(
        out,
        x.shape().to_vec(),
        LeakyReluOp { slope: s },
        vec![x.clone()],
    ))
}

struct MaskOp<T> {
    mask: Vec<T>,
}

impl<T: Element> Backward<T> for MaskOp<T> {
    fn name(&self) -> &'static str {
        "dropout"
    }

    fn backward(&self, _inputs: &[Tensor<T>], _out: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(g.iter().zip(&self.mask).map(|(g, m)| *g * *m).collect())]
    }
}

/// Inverted dropout. With `rng = None` (eval mode) this is the identity;
/// otherwise each unit is zeroed with probability `rate` and survivors are
/// scaled by `1 / (1 − rate)`.
pub fn dropout<T: Element, R: Rng + ?Sized>(
    x: &Tensor<T>,
    rate: f64,
    rng: Option<&mut R>,
) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(TensorError::InvalidArgument(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )));
    }
    let Some(rng) = rng else {
        return Ok(x.clone());
    };
    if rate == 0.0 {
        return Ok(x.clone());
    }
    let keep = T::cast(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..x.numel())
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect();
    let out = x.data().iter().zip(&mask).map(|(v, m)| *v * *m).collect();
    Ok(Tensor::from_op(
        out,
        x.shape().to_vec(),
        MaskOp { mask },
        vec![x.clone()],
    ))
}

struct MaxPoolOp {
    argmax: Vec<usize>,
}

impl<T: Element> Backward<T> for MaxPoolOp {
    fn name(&self) -> &'static str {
        "max_pool2d"
    }

    fn backward(&self, inputs: &[Tensor<T>], _out: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        let mut dx = vec![T::zero(); inputs[0].numel()];
        for (gv, &i) in g.iter().zip(&self.argmax) {
            dx[i] += *gv;
        }
        vec![Some(dx)]
    }
}

/// Max pooling over `kernel × kernel` windows of a `[B, C, H, W]` tensor.
/// Windows that would run past the edge are dropped.
pub fn max_pool2d<T: Element>(x: &Tensor<T>, kernel: usize, stride: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(TensorError::BadShape {
            op: "max_pool2d",
            expected: "[B, C, H, W]".into(),
            got: s.to_vec(),
        });
    }
    if kernel == 0 || stride == 0 || s[2] < kernel || s[3] < kernel {
        return Err(TensorError::InvalidArgument(format!(
            "max_pool2d kernel {kernel} stride {stride} invalid for {:?}",
            s
        )));
    }
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let (ho, wo) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
    let d = x.data();
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut argmax = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                        if d[idx] > d[best] {
                            best = idx;
                        }
                    }
                }
                out.push(d[best]);
                argmax.push(best);
            }
        }
    }
    drop(d);
    Ok(Tensor::from_op(
        out,
        vec![s[0], s[1], ho, wo],
        MaxPoolOp { argmax },
        vec![x.clone()],
    ))
}

/// Per-channel statistics maintained across training batches.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Element> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

struct BatchNormOp<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    channels: usize,
    plane: usize,
    batch_stats: bool,
}

impl<T: Element> Backward<T> for BatchNormOp<T> {
    fn name(&self) -> &'static str {
        "batch_norm"
    }

    fn backward(&self, inputs: &[Tensor<T>], _out: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        let (c_count, plane) = (self.channels, self.plane);
        let batch = g.len() / (c_count * plane);
        let n = T::cast((batch * plane) as f64);
        let gamma = inputs[1].data();
        let mut sum_g = vec![T::zero(); c_count];
        let mut sum_gx = vec![T::zero(); c_count];
        for b in 0..batch {
            for c in 0..c_count {
                let off = (b * c_count + c) * plane;
                for i in off..off + plane {
                    sum_g[c] += g[i];
                    sum_gx[c] += g[i] * self.xhat[i];
                }
            }
        }
        let dx = inputs[0].requires_grad().then(|| {
            let mut dx = vec![T::zero(); g.len()];
            for b in 0..batch {
                for c in 0..c_count {
                    let off = (b * c_count + c) * plane;
                    let k = gamma[c] * self.inv_std[c];
                    for i in off..off + plane {
                        dx[i] = if self.batch_stats {
                            k * (g[i] - sum_g[c] / n - self.xhat[i] * sum_gx[c] / n)
                        } else {
                            k * g[i]
                        };
                    }
                }
            }
            dx
        });
        vec![
            dx,
            inputs[1].requires_grad().then_some(sum_gx),
            inputs[2].requires_grad().then_some(sum_g),
        ]
    }
}

/// Batch normalization of `[B, C, H, W]` (or `[B, C]`) over every axis but
/// the channel axis.
///
/// With `train = true` the batch mean and biased variance normalize the
/// input and `running` is updated as `r ← (1 − momentum)·r + momentum·batch`
/// (using the unbiased variance). Otherwise the running statistics are used.
pub fn batch_norm<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: &mut RunningStats<T>,
    train: bool,
    momentum: f64,
    eps: f64,
) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() < 2 {
        return Err(TensorError::BadShape {
            op: "batch_norm",
            expected: "[B, C, ...]".into(),
            got: s.to_vec(),
        });
    }
    let (batch, c_count) = (s[0], s[1]);
    let plane: usize = s[2..].iter().product();
    if gamma.shape() != [c_count] || beta.shape() != [c_count] || running.mean.len() != c_count {
        return Err(TensorError::ShapeMismatch {
            op: "batch_norm",
            lhs: s.to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let d = x.data();
    let (mean, var) = if train {
        let n = (batch * plane) as f64;
        if n < 2.0 {
            return Err(TensorError::InvalidArgument(
                "batch_norm in training mode needs more than one value per channel".into(),
            ));
        }
        let mut mean = vec![0.0f64; c_count];
        let mut var = vec![0.0f64; c_count];
        for b in 0..batch {
            for c in 0..c_count {
                let off = (b * c_count + c) * plane;
                mean[c] += d[off..off + plane].iter().map(|v| v.as_f64()).sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        for b in 0..batch {
            for c in 0..c_count {
                let off = (b * c_count + c) * plane;
                var[c] += d[off..off + plane]
                    .iter()
                    .map(|v| (v.as_f64() - mean[c]).powi(2))
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= n);
        for c in 0..c_count {
            let rm = running.mean[c].as_f64();
            let rv = running.var[c].as_f64();
            running.mean[c] = T::cast((1.0 - momentum) * rm + momentum * mean[c]);
            running.var[c] = T::cast((1.0 - momentum) * rv + momentum * var[c] * n / (n - 1.0));
        }
        (mean, var)
    } else {
        (
            running.mean.iter().map(|v| v.as_f64()).collect(),
            running.var.iter().map(|v| v.as_f64()).collect(),
        )
    };
    let inv_std: Vec<T> = var.iter().map(|v| T::cast(1.0 / (v + eps).sqrt())).collect();
    let mean_t: Vec<T> = mean.iter().map(|m| T::cast(*m)).collect();
    let gm = gamma.data();
    let bt = beta.data();
    let mut xhat = vec![T::zero(); d.len()];
    let mut out = vec![T::zero(); d.len()];
    for b in 0..batch {
        for c in 0..c_count {
            let off = (b * c_count + c) * plane;
            for i in off..off + plane {
                xhat[i] = (d[i] - mean_t[c]) * inv_std[c];
                out[i] = gm[c] * xhat[i] + bt[c];
            }
        }
    }
    drop((d, gm, bt));
    Ok(Tensor::from_op(
        out,
        s.to_vec(),
        BatchNormOp {
            xhat,
            inv_std,
            channels: c_count,
            plane,
            batch_stats: train,
        },
        vec![x.clone(), gamma.clone(), beta.clone()],
    ))
}

/// `x [B, in] · w [in, out] + b [out]`.
pub fn linear<T: Element>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    x.matmul(w)?.add(b)
}

fn softmax_rows<T: Element>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(cols) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let e: Vec<T> = row.iter().map(|v| (*v - m).exp()).collect();
        let s: T = e.iter().copied().sum();
        out.extend(e.into_iter().map(|v| v / s));
    }
    out
}

struct SoftmaxOp {
    cols: usize,
}

impl<T: Element> Backward<T> for SoftmaxOp {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn backward(&self, _inputs: &[Tensor<T>], out: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        let mut dx = Vec::with_capacity(g.len());
        for (y, gr) in out.chunks(self.cols).zip(g.chunks(self.cols)) {
            let dot: T = y.iter().zip(gr).map(|(a, b)| *a * *b).sum();
            dx.extend(y.iter().zip(gr).map(|(y, g)| *y * (*g - dot)));
        }
        vec![Some(dx)]
    }
}

/// Softmax over the last axis of a `[B, K]` tensor.
pub fn softmax<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 2 {
        return Err(TensorError::BadShape {
            op: "softmax",
            expected: "[B, K]".into(),
            got: x.shape().to_vec(),
        });
    }
    let cols = x.shape()[1];
    let out = softmax_rows(&x.data(), cols);
    Ok(Tensor::from_op(
        out,
        x.shape().to_vec(),
        SoftmaxOp { cols },
        vec![x.clone()],
    ))
}

struct WeightedCeOp<T> {
    probs: Vec<T>,
    labels: Vec<usize>,
    weights: Vec<T>,
    total_weight: T,
}

impl<T: Element> Backward<T> for WeightedCeOp<T> {
    fn name(&self) -> &'static str {
        "weighted_cross_entropy"
    }

    fn backward(&self, _inputs: &[Tensor<T>], _out: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        let k = self.weights.len();
        let mut dx = self.probs.clone();
        for (b, &y) in self.labels.iter().enumerate() {
            let s = g[0] * self.weights[y] / self.total_weight;
            let row = &mut dx[b * k..(b + 1) * k];
            row[y] -= T::one();
            row.iter_mut().for_each(|v| *v *= s);
        }
        vec![Some(dx)]
    }
}

/// `−Σ_b w[y_b]·log softmax(logits_b)[y_b] / Σ_b w[y_b]`, computed with the
/// log-sum-exp shift.
pub fn weighted_cross_entropy<T: Element>(
    logits: &Tensor<T>,
    labels: &[usize],
    weights: &[f64],
) -> Result<Tensor<T>> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() || s[1] != weights.len() {
        return Err(TensorError::BadShape {
            op: "weighted_cross_entropy",
            expected: format!("[{}, {}]", labels.len(), weights.len()),
            got: s.to_vec(),
        });
    }
    let k = s[1];
    if let Some(bad) = labels.iter().find(|&&y| y >= k) {
        return Err(TensorError::InvalidArgument(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let d = logits.data();
    let weights_t: Vec<T> = weights.iter().map(|w| T::cast(*w)).collect();
    let mut loss = 0.0f64;
    let mut total = 0.0f64;
    for (row, &y) in d.chunks(k).zip(labels) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max).as_f64();
        let lse = m + row.iter().map(|v| (v.as_f64() - m).exp()).sum::<f64>().ln();
        loss += weights[y] * (lse - row[y].as_f64());
        total += weights[y];
    }
    if total <= 0.0 {
        return Err(TensorError::InvalidArgument(
            "weighted_cross_entropy: total sample weight is zero".into(),
        ));
    }
    let probs = softmax_rows(&d, k);
    drop(d);
    Ok(Tensor::from_op(
        vec![T::cast(loss / total)],
        Vec::new(),
        WeightedCeOp {
            probs,
            labels: labels.to_vec(),
            weights: weights_t,
            total_weight: T::cast(total),
        },
        vec![logits.clone()],
    ))
}
