//! Central finite-difference verification of analytic gradients.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::nn::{
    batch_norm, bilinear_sample, conv2d, deform_conv2d, dropout, leaky_relu, linear, max_pool2d, softmax,
    weighted_cross_entropy, RunningStats,
};
use crate::{no_grad, Result, Tensor};

/// Compares the gradient produced by [`Tensor::backward`] against central
/// differences `(f(x+h·eᵢ) − f(x−h·eᵢ)) / 2h` for every coordinate of `x`.
///
/// Returns the largest per-coordinate discrepancy divided by the largest
/// gradient magnitude seen on either side, so near-zero coordinates do not
/// dominate the result. Returns 0 when both gradients vanish.
pub fn grad_check<F>(f: F, x: &[f64], shape: &[usize], h: f64) -> Result<f64>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    let leaf = Tensor::param(x.to_vec(), shape)?;
    let loss = f(&leaf)?;
    loss.backward()?;
    let analytic = leaf.grad().expect("param leaf has a gradient");

    let numeric = no_grad(|| -> Result<Vec<f64>> {
        let mut probe = x.to_vec();
        let mut out = Vec::with_capacity(x.len());
        for i in 0..x.len() {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&Tensor::from_vec(probe.clone(), shape)?)?.item();
            probe[i] = orig - h;
            let down = f(&Tensor::from_vec(probe.clone(), shape)?)?.item();
            probe[i] = orig;
            out.push((up - down) / (2.0 * h));
        }
        Ok(out)
    })?;

    let scale = analytic
        .iter()
        .chain(&numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return Ok(0.0);
    }
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / scale)
        .fold(0.0, f64::max))
}

/// Worst gradient-check error of one layer with respect to one input.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCheck {
    pub layer: &'static str,
    pub wrt: &'static str,
    pub cases: usize,
    pub max_error: f64,
}

#[derive(Default)]
struct Recorder(Vec<LayerCheck>);

impl Recorder {
    fn record(&mut self, layer: &'static str, wrt: &'static str, err: f64) {
        match self.0.iter_mut().find(|c| c.layer == layer && c.wrt == wrt) {
            Some(c) => {
                c.cases += 1;
                c.max_error = c.max_error.max(err);
            }
            None => self.0.push(LayerCheck {
                layer,
                wrt,
                cases: 1,
                max_error: err,
            }),
        }
    }
}

fn uniform(rng: &mut StdRng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn constant(values: &[f64], shape: &[usize]) -> Result<Tensor<f64>> {
    Tensor::from_vec(values.to_vec(), shape)
}

/// Grad-checks `f` at `x` after reducing its output to a scalar with fixed
/// random coefficients, so every output element carries a distinct weight.
fn check<F>(rng: &mut StdRng, f: F, x: &[f64], shape: &[usize]) -> Result<f64>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    let probe = no_grad(|| f(&Tensor::from_vec(x.to_vec(), shape)?))?;
    let coeffs = Tensor::from_vec(uniform(rng, probe.numel(), -1.0, 1.0), probe.shape())?;
    grad_check(|t| Ok(f(t)?.mul(&coeffs)?.sum_all()), x, shape, 1e-6)
}

/// Runs `cases` randomized-shape gradient checks for every differentiable
/// operation and layer in 64-bit precision, including the deformable
/// convolution with respect to its input, offsets, weights and bias.
pub fn layer_suite(cases: usize, seed: u64) -> Result<Vec<LayerCheck>> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut rec = Recorder::default();
    for _ in 0..cases {
        conv_cases(&mut rng, &mut rec)?;
        pointwise_cases(&mut rng, &mut rec)?;
        op_cases(&mut rng, &mut rec)?;
    }
    Ok(rec.0)
}

fn conv_cases(rng: &mut StdRng, rec: &mut Recorder) -> Result<()> {
    let b: usize = rng.random_range(1..=2);
    let c = rng.random_range(1..=3);
    let f = rng.random_range(1..=3);
    let k: usize = rng.random_range(1..=3);
    let pad = rng.random_range(0..=k / 2);
    let stride = rng.random_range(1..=2);
    let lo = k.saturating_sub(2 * pad).max(1);
    let h = rng.random_range(lo..=lo + 3);
    let w = rng.random_range(lo..=lo + 3);
    let (xs, ws) = ([b, c, h, w], [f, c, k, k]);
    let x = uniform(rng, b * c * h * w, -1.0, 1.0);
    let wt = uniform(rng, f * c * k * k, -1.0, 1.0);
    let bias = uniform(rng, f, -1.0, 1.0);
    let (ho, wo) = ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1);
    let os = [b, 2 * k * k, ho, wo];
    let off = uniform(rng, os.iter().product(), -2.0, 2.0);

    let (xt, wtt, bt, ot) = (constant(&x, &xs)?, constant(&wt, &ws)?, constant(&bias, &[f])?, constant(&off, &os)?);
    let e = check(rng, |t| conv2d(t, &wtt, Some(&bt), stride, pad), &x, &xs)?;
    rec.record("conv2d", "input", e);
    let e = check(rng, |t| conv2d(&xt, t, Some(&bt), stride, pad), &wt, &ws)?;
    rec.record("conv2d", "weight", e);
    let e = check(rng, |t| conv2d(&xt, &wtt, Some(t), stride, pad), &bias, &[f])?;
    rec.record("conv2d", "bias", e);

    let e = check(rng, |t| deform_conv2d(t, &ot, &wtt, Some(&bt), stride, pad), &x, &xs)?;
    rec.record("deform_conv2d", "input", e);
    let e = check(rng, |t| deform_conv2d(&xt, t, &wtt, Some(&bt), stride, pad), &off, &os)?;
    rec.record("deform_conv2d", "offsets", e);
    let e = check(rng, |t| deform_conv2d(&xt, &ot, t, Some(&bt), stride, pad), &wt, &ws)?;
    rec.record("deform_conv2d", "weight", e);
    let e = check(rng, |t| deform_conv2d(&xt, &ot, &wtt, Some(t), stride, pad), &bias, &[f])?;
    rec.record("deform_conv2d", "bias", e);

    // Offsets produced by a regular convolution, as inside the network.
    let ow = uniform(rng, 2 * k * k * c * k * k, -0.5, 0.5);
    let ows = [2 * k * k, c, k, k];
    let e = check(
        rng,
        |t| {
            let o = conv2d(&xt, t, None, stride, pad)?;
            deform_conv2d(&xt, &o, &wtt, Some(&bt), stride, pad)
        },
        &ow,
        &ows,
    )?;
    rec.record("deform_conv2d", "offset_weight", e);

    let feat_shape = [c, h, w];
    let feat = uniform(rng, c * h * w, -1.0, 1.0);
    let pos = vec![rng.random_range(-1.5..h as f64 + 0.5), rng.random_range(-1.5..w as f64 + 0.5)];
    let (ft, pt) = (constant(&feat, &feat_shape)?, constant(&pos, &[2])?);
    let e = check(rng, |t| bilinear_sample(t, &pt), &feat, &feat_shape)?;
    rec.record("bilinear_sample", "feature", e);
    let e = check(rng, |t| bilinear_sample(&ft, t), &pos, &[2])?;
    rec.record("bilinear_sample", "position", e);
    Ok(())
}

fn pointwise_cases(rng: &mut StdRng, rec: &mut Recorder) -> Result<()> {
    let b = rng.random_range(2..=3);
    let c = rng.random_range(1..=3);
    let h = rng.random_range(2..=4);
    let w = rng.random_range(2..=4);
    let xs = [b, c, h, w];
    let x = uniform(rng, b * c * h * w, -2.0, 2.0);
    let gamma = uniform(rng, c, 0.5, 1.5);
    let beta = uniform(rng, c, -0.5, 0.5);
    let (xt, gt, bt) = (constant(&x, &xs)?, constant(&gamma, &[c])?, constant(&beta, &[c])?);
    let bn = |x: &Tensor<f64>, g: &Tensor<f64>, b: &Tensor<f64>, train: bool| {
        let mut running = RunningStats {
            mean: vec![0.1; c],
            var: vec![0.8; c],
        };
        batch_norm(x, g, b, &mut running, train, 0.1, 1e-5)
    };
    rec.record("batch_norm", "input", check(rng, |t| bn(t, &gt, &bt, true), &x, &xs)?);
    rec.record("batch_norm", "gamma", check(rng, |t| bn(&xt, t, &bt, true), &gamma, &[c])?);
    rec.record("batch_norm", "beta", check(rng, |t| bn(&xt, &gt, t, true), &beta, &[c])?);
    rec.record("batch_norm_eval", "input", check(rng, |t| bn(t, &gt, &bt, false), &x, &xs)?);

    let slope = rng.random_range(0.0..0.3);
    rec.record("leaky_relu", "input", check(rng, |t| leaky_relu(t, slope), &x, &xs)?);
    let rate = rng.random_range(0.0..0.7);
    let mask_seed = rng.random::<u64>();
    let e = check(
        rng,
        |t| dropout(t, rate, Some(&mut StdRng::seed_from_u64(mask_seed))),
        &x,
        &xs,
    )?;
    rec.record("dropout", "input", e);
    let stride = rng.random_range(1..=2);
    rec.record("max_pool2d", "input", check(rng, |t| max_pool2d(t, 2, stride), &x, &xs)?);

    let (n, din, dout) = (rng.random_range(1..=4), rng.random_range(1..=5), rng.random_range(1..=5));
    let a = uniform(rng, n * din, -1.0, 1.0);
    let wt = uniform(rng, din * dout, -1.0, 1.0);
    let bias = uniform(rng, dout, -1.0, 1.0);
    let (at, wtt, bt) = (constant(&a, &[n, din])?, constant(&wt, &[din, dout])?, constant(&bias, &[dout])?);
    rec.record("linear", "input", check(rng, |t| linear(t, &wtt, &bt), &a, &[n, din])?);
    rec.record("linear", "weight", check(rng, |t| linear(&at, t, &bt), &wt, &[din, dout])?);
    rec.record("linear", "bias", check(rng, |t| linear(&at, &wtt, t), &bias, &[dout])?);

    let logits = uniform(rng, n * 4, -3.0, 3.0);
    rec.record("softmax", "input", check(rng, softmax, &logits, &[n, 4])?);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
    let weights = uniform(rng, 4, 0.2, 1.0);
    let e = grad_check(|t| weighted_cross_entropy(t, &labels, &weights), &logits, &[n, 4], 1e-6)?;
    rec.record("weighted_cross_entropy", "logits", e);
    Ok(())
}

fn op_cases(rng: &mut StdRng, rec: &mut Recorder) -> Result<()> {
    let (r, c) = (rng.random_range(1..=4), rng.random_range(1..=4));
    let a = uniform(rng, r * c, -1.0, 1.0);
    let bv = uniform(rng, r * c, -1.0, 1.0);
    let row = uniform(rng, c, -1.0, 1.0);
    let (bt, rowt) = (constant(&bv, &[r, c])?, constant(&row, &[c])?);
    rec.record("add", "lhs", check(rng, |t| t.add(&rowt), &a, &[r, c])?);
    rec.record("add", "broadcast", check(rng, |t| bt.add(t), &row, &[c])?);
    rec.record("sub", "rhs", check(rng, |t| bt.sub(t), &a, &[r, c])?);
    rec.record("mul", "lhs", check(rng, |t| t.mul(&bt), &a, &[r, c])?);
    rec.record("mul", "broadcast", check(rng, |t| bt.mul(t), &row, &[c])?);
    rec.record("scale", "input", check(rng, |t| Ok(t.scale(-1.7)), &a, &[r, c])?);

    let k = rng.random_range(1..=4);
    let m = uniform(rng, c * k, -1.0, 1.0);
    let (at, mt) = (constant(&a, &[r, c])?, constant(&m, &[c, k])?);
    rec.record("matmul", "lhs", check(rng, |t| t.matmul(&mt), &a, &[r, c])?);
    rec.record("matmul", "rhs", check(rng, |t| at.matmul(t), &m, &[c, k])?);

    rec.record("reshape", "input", check(rng, |t| t.reshape(&[c, r]), &a, &[r, c])?);
    rec.record("concat", "input", check(rng, |t| Tensor::concat(&[t.clone(), bt.clone()], 1), &a, &[r, c])?);
    let start = rng.random_range(0..c);
    let end = rng.random_range(start + 1..=c);
    rec.record("slice", "input", check(rng, |t| t.slice(1, start, end), &a, &[r, c])?);
    let axis = rng.random_range(0..2);
    rec.record("sum_axis", "input", check(rng, |t| t.sum_axis(axis), &a, &[r, c])?);
    rec.record("mean_axis", "input", check(rng, |t| t.mean_axis(axis), &a, &[r, c])?);
    rec.record("max_axis", "input", check(rng, |t| t.max_axis(axis), &a, &[r, c])?);
    rec.record("mean_all", "input", check(rng, |t| Ok(t.mean_all()), &a, &[r, c])?);
    rec.record("exp", "input", check(rng, |t| Ok(t.exp()), &a, &[r, c])?);
    let pos: Vec<f64> = a.iter().map(|v| v.abs() + 0.2).collect();
    rec.record("log", "input", check(rng, |t| Ok(t.log()), &pos, &[r, c])?);
    Ok(())
}
