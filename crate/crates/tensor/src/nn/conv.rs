//! Regular and deformable 2-D convolution.
//!
//! Both lower to a column matrix of shape `[C·K·K, Ho·Wo]` per sample followed
//! by a GEMM with the `[F, C·K·K]` weight matrix. The deformable variant fills
//! its columns by bilinear sampling at `p₀ + pₙ + Δpₙ`, where the offsets
//! `Δpₙ = (Δy, Δx)` come from a separate tensor with `2·K²` channels laid out
//! as `[Δy₀, Δx₀, Δy₁, Δx₁, …]` in row-major tap order.

use rayon::prelude::*;

use crate::element::{matmul_into, matmul_nt_into, matmul_tn_into};
use crate::{Backward, Element, Result, Tensor, TensorError};

/// Spatial bookkeeping shared by both convolution kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(TensorError::InvalidArgument(
                "kernel and stride must be positive".into(),
            ));
        }
        let (ph, pw) = (height + 2 * padding, width + 2 * padding);
        if ph < kernel || pw < kernel {
            return Err(TensorError::InvalidArgument(format!(
                "padded input {ph}x{pw} smaller than kernel {kernel}"
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            kernel,
            stride,
            padding,
            out_height: (ph - kernel) / stride + 1,
            out_width: (pw - kernel) / stride + 1,
        })
    }

    pub fn taps(&self) -> usize {
        self.kernel * self.kernel
    }

    pub fn locations(&self) -> usize {
        self.out_height * self.out_width
    }

    fn col_rows(&self) -> usize {
        self.channels * self.taps()
    }

    /// Undeformed sampling position of tap `n` for output location `l`.
    fn base(&self, n: usize, l: usize) -> (isize, isize) {
        let (i, j) = (n / self.kernel, n % self.kernel);
        let (ho, wo) = (l / self.out_width, l % self.out_width);
        (
            (ho * self.stride + i) as isize - self.padding as isize,
            (wo * self.stride + j) as isize - self.padding as isize,
        )
    }
}

/// The ≤4 integer neighbours of a fractional position with their weights.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Corners<T> {
    // Flat `y * width + x` index, or `usize::MAX` when out of bounds.
    idx: [usize; 4],
    w: [T; 4],
    ly: T,
    lx: T,
}

impl<T: Element> Corners<T> {
    /// Order: (y0,x0), (y0,x1), (y1,x0), (y1,x1). Positions with `y ≤ −1`,
    /// `y ≥ H`, `x ≤ −1` or `x ≥ W` sample nothing.
    pub(crate) fn at(y: T, x: T, height: usize, width: usize) -> Self {
        let none = Self {
            idx: [usize::MAX; 4],
            w: [T::zero(); 4],
            ly: T::zero(),
            lx: T::zero(),
        };
        let (hf, wf) = (T::cast(height as f64), T::cast(width as f64));
        if !(y > -T::one() && y < hf && x > -T::one() && x < wf) {
            return none;
        }
        let (y0f, x0f) = (y.floor(), x.floor());
        let (ly, lx) = (y - y0f, x - x0f);
        let (hy, hx) = (T::one() - ly, T::one() - lx);
        let (y0, x0) = (y0f.as_f64() as isize, x0f.as_f64() as isize);
        let inb = |yy: isize, xx: isize| {
            if yy >= 0 && xx >= 0 && (yy as usize) < height && (xx as usize) < width {
                yy as usize * width + xx as usize
            } else {
                usize::MAX
            }
        };
        Self {
            idx: [
                inb(y0, x0),
                inb(y0, x0 + 1),
                inb(y0 + 1, x0),
                inb(y0 + 1, x0 + 1),
            ],
            w: [hy * hx, hy * lx, ly * hx, ly * lx],
            ly,
            lx,
        }
    }

    #[inline]
    fn fetch(&self, plane: &[T]) -> [T; 4] {
        let mut v = [T::zero(); 4];
        for k in 0..4 {
            if self.idx[k] != usize::MAX {
                v[k] = plane[self.idx[k]];
            }
        }
        v
    }

    #[inline]
    pub(crate) fn sample(&self, plane: &[T]) -> T {
        let v = self.fetch(plane);
        self.w[0] * v[0] + self.w[1] * v[1] + self.w[2] * v[2] + self.w[3] * v[3]
    }

    /// ∂sample/∂y and ∂sample/∂x.
    #[inline]
    pub(crate) fn coord_grad(&self, plane: &[T]) -> (T, T) {
        let v = self.fetch(plane);
        let (hy, hx) = (T::one() - self.ly, T::one() - self.lx);
        let dy = hx * (v[2] - v[0]) + self.lx * (v[3] - v[1]);
        let dx = hy * (v[1] - v[0]) + self.ly * (v[3] - v[2]);
        (dy, dx)
    }

    #[inline]
    pub(crate) fn scatter(&self, plane: &mut [T], g: T) {
        for k in 0..4 {
            if self.idx[k] != usize::MAX {
                plane[self.idx[k]] += self.w[k] * g;
            }
        }
    }
}

fn im2col<T: Element>(x: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let (taps, l_count, plane) = (g.taps(), g.locations(), g.height * g.width);
    for c in 0..g.channels {
        let xc = &x[c * plane..(c + 1) * plane];
        for n in 0..taps {
            let row = &mut cols[(c * taps + n) * l_count..(c * taps + n + 1) * l_count];
            for (l, out) in row.iter_mut().enumerate() {
                let (y, xx) = g.base(n, l);
                *out = if y >= 0 && xx >= 0 && (y as usize) < g.height && (xx as usize) < g.width
                {
                    xc[y as usize * g.width + xx as usize]
                } else {
                    T::zero()
                };
            }
        }
    }
}

fn col2im<T: Element>(cols: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let (taps, l_count, plane) = (g.taps(), g.locations(), g.height * g.width);
    for c in 0..g.channels {
        let dxc = &mut dx[c * plane..(c + 1) * plane];
        for n in 0..taps {
            let row = &cols[(c * taps + n) * l_count..(c * taps + n + 1) * l_count];
            for (l, v) in row.iter().enumerate() {
                let (y, xx) = g.base(n, l);
                if y >= 0 && xx >= 0 && (y as usize) < g.height && (xx as usize) < g.width {
                    dxc[y as usize * g.width + xx as usize] += *v;
                }
            }
        }
    }
}

fn deform_corners<T: Element>(offsets: &[T], g: &ConvGeometry, n: usize, l: usize) -> Corners<T> {
    let l_count = g.locations();
    let (by, bx) = g.base(n, l);
    let y = T::cast(by as f64) + offsets[(2 * n) * l_count + l];
    let x = T::cast(bx as f64) + offsets[(2 * n + 1) * l_count + l];
    Corners::at(y, x, g.height, g.width)
}

fn deform_im2col<T: Element>(x: &[T], offsets: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let (taps, l_count, plane) = (g.taps(), g.locations(), g.height * g.width);
    for n in 0..taps {
        for l in 0..l_count {
            let corners = deform_corners(offsets, g, n, l);
            for c in 0..g.channels {
                cols[(c * taps + n) * l_count + l] = corners.sample(&x[c * plane..(c + 1) * plane]);
            }
        }
    }
}

/// Scatters column gradients back to the input and the offsets.
fn deform_col2im<T: Element>(
    dcols: &[T],
    x: &[T],
    offsets: &[T],
    g: &ConvGeometry,
    dx: Option<&mut [T]>,
    doff: Option<&mut [T]>,
) {
    let (taps, l_count, plane) = (g.taps(), g.locations(), g.height * g.width);
    let mut dx = dx;
    let mut doff = doff;
    for n in 0..taps {
        for l in 0..l_count {
            let corners = deform_corners(offsets, g, n, l);
            let (mut gy, mut gx) = (T::zero(), T::zero());
            for c in 0..g.channels {
                let gc = dcols[(c * taps + n) * l_count + l];
                if gc == T::zero() {
                    continue;
                }
                if let Some(dx) = dx.as_deref_mut() {
                    corners.scatter(&mut dx[c * plane..(c + 1) * plane], gc);
                }
                if doff.is_some() {
                    let (dy, ddx) = corners.coord_grad(&x[c * plane..(c + 1) * plane]);
                    gy += dy * gc;
                    gx += ddx * gc;
                }
            }
            if let Some(doff) = doff.as_deref_mut() {
                doff[(2 * n) * l_count + l] += gy;
                doff[(2 * n + 1) * l_count + l] += gx;
            }
        }
    }
}

fn check_conv_inputs<T: Element>(
    op: &'static str,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize, ConvGeometry)> {
    let (is, ws) = (input.shape(), weight.shape());
    if is.len() != 4 {
        return Err(TensorError::BadShape {
            op,
            expected: "input [B, C, H, W]".into(),
            got: is.to_vec(),
        });
    }
    if ws.len() != 4 || ws[2] != ws[3] {
        return Err(TensorError::BadShape {
            op,
            expected: "weight [F, C, K, K]".into(),
            got: ws.to_vec(),
        });
    }
    if ws[1] != is[1] {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: is.to_vec(),
            rhs: ws.to_vec(),
        });
    }
    if let Some(b) = bias {
        if b.shape() != [ws[0]] {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: ws.to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
    }
    let geom = ConvGeometry::new(is[1], is[2], is[3], ws[2], stride, padding)?;
    Ok((is[0], ws[0], geom))
}

fn add_bias<T: Element>(out: &mut [T], bias: Option<&[T]>, l_count: usize) {
    if let Some(b) = bias {
        for (f, row) in out.chunks_mut(l_count).enumerate() {
            row.iter_mut().for_each(|v| *v += b[f]);
        }
    }
}

/// Weight and bias gradients summed over samples in sample order.
fn reduce_param_grads<T: Element>(
    per_sample: &[(Vec<T>, Vec<T>)],
    wlen: usize,
    flen: usize,
) -> (Vec<T>, Vec<T>) {
    let mut dw = vec![T::zero(); wlen];
    let mut db = vec![T::zero(); flen];
    for (w, b) in per_sample {
        dw.iter_mut().zip(w).for_each(|(a, v)| *a += *v);
        db.iter_mut().zip(b).for_each(|(a, v)| *a += *v);
    }
    (dw, db)
}

struct Conv2dOp<T> {
    geom: ConvGeometry,
    filters: usize,
    cols: Vec<Vec<T>>,
}

impl<T: Element> Backward<T> for Conv2dOp<T> {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, inputs: &[Tensor<T>], _out: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        let geom = &self.geom;
        let (f, rows, l_count) = (self.filters, geom.col_rows(), geom.locations());
        let in_plane = geom.channels * geom.height * geom.width;
        let need_x = inputs[0].requires_grad();
        let need_w = inputs[1].requires_grad() || inputs.get(2).is_some_and(|b| b.requires_grad());
        let w = inputs[1].data();

        let per_sample: Vec<(Vec<T>, (Vec<T>, Vec<T>))> = self
            .cols
            .par_iter()
            .enumerate()
            .map(|(b, cols)| {
                let gb = &g[b * f * l_count..(b + 1) * f * l_count];
                let mut dx = Vec::new();
                if need_x {
                    let mut dcols = vec![T::zero(); rows * l_count];
                    matmul_tn_into(&w, gb, &mut dcols, rows, f, l_count, false);
                    dx = vec![T::zero(); in_plane];
                    col2im(&dcols, geom, &mut dx);
                }
                let mut dw = Vec::new();
                let mut db = Vec::new();
                if need_w {
                    dw = vec![T::zero(); f * rows];
                    matmul_nt_into(gb, cols, &mut dw, f, l_count, rows, false);
                    db = gb.chunks(l_count).map(|r| r.iter().copied().sum()).collect();
                }
                (dx, (dw, db))
            })
            .collect();
        drop(w);

        let dx = need_x.then(|| per_sample.iter().flat_map(|(dx, _)| dx.iter().copied()).collect());
        let (dw, db) = if need_w {
            let pg: Vec<_> = per_sample.into_iter().map(|(_, p)| p).collect();
            let (dw, db) = reduce_param_grads(&pg, f * rows, f);
            (Some(dw), Some(db))
        } else {
            (None, None)
        };
        let mut grads = vec![dx, dw.filter(|_| inputs[1].requires_grad())];
        if inputs.len() > 2 {
            grads.push(db.filter(|_| inputs[2].requires_grad()));
        }
        grads
    }
}

/// Regular convolution: `[B, C, H, W] ⊛ [F, C, K, K] (+ [F]) → [B, F, Ho, Wo]`.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (batch, f, geom) = check_conv_inputs("conv2d", input, weight, bias, stride, padding)?;
    let (rows, l_count) = (geom.col_rows(), geom.locations());
    let in_plane = geom.channels * geom.height * geom.width;
    let x = input.data();
    let w = weight.data();
    let bvals = bias.map(|b| b.to_vec());
    let track = crate::is_grad_enabled()
        && (input.requires_grad() || weight.requires_grad() || bias.is_some_and(|b| b.requires_grad()));

    let results: Vec<(Vec<T>, Vec<T>)> = (0..batch)
        .into_par_iter()
        .map(|b| {
            let mut cols = vec![T::zero(); rows * l_count];
            im2col(&x[b * in_plane..(b + 1) * in_plane], &geom, &mut cols);
            let mut out = vec![T::zero(); f * l_count];
            matmul_into(&w, &cols, &mut out, f, rows, l_count, false);
            add_bias(&mut out, bvals.as_deref(), l_count);
            (out, if track { cols } else { Vec::new() })
        })
        .collect();
    drop((x, w));

    let mut out = Vec::with_capacity(batch * f * l_count);
    let mut saved = Vec::with_capacity(batch);
    for (o, c) in results {
        out.extend_from_slice(&o);
        saved.push(c);
    }
    let mut inputs = vec![input.clone(), weight.clone()];
    inputs.extend(bias.cloned());
    Ok(Tensor::from_op(
        out,
        vec![batch, f, geom.out_height, geom.out_width],
        Conv2dOp {
            geom,
            filters: f,
            cols: saved,
        },
        inputs,
    ))
}

struct DeformConv2dOp<T> {
    geom: ConvGeometry,
    filters: usize,
    cols: Vec<Vec<T>>,
}

impl<T: Element> Backward<T> for DeformConv2dOp<T> {
    fn name(&self) -> &'static str {
        "deform_conv2d"
    }

    fn backward(&self, inputs: &[Tensor<T>], _out: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        let geom = &self.geom;
        let (f, rows, l_count) = (self.filters, geom.col_rows(), geom.locations());
        let in_plane = geom.channels * geom.height * geom.width;
        let off_plane = 2 * geom.taps() * l_count;
        let need_x = inputs[0].requires_grad();
        let need_off = inputs[1].requires_grad();
        let need_w = inputs[2].requires_grad() || inputs.get(3).is_some_and(|b| b.requires_grad());
        let x = inputs[0].data();
        let off = inputs[1].data();
        let w = inputs[2].data();

        let per_sample: Vec<(Vec<T>, Vec<T>, (Vec<T>, Vec<T>))> = self
            .cols
            .par_iter()
            .enumerate()
            .map(|(b, cols)| {
                let gb = &g[b * f * l_count..(b + 1) * f * l_count];
                let xb = &x[b * in_plane..(b + 1) * in_plane];
                let ob = &off[b * off_plane..(b + 1) * off_plane];
                let (mut dx, mut doff) = (Vec::new(), Vec::new());
                if need_x || need_off {
                    let mut dcols = vec![T::zero(); rows * l_count];
                    matmul_tn_into(&w, gb, &mut dcols, rows, f, l_count, false);
                    if need_x {
                        dx = vec![T::zero(); in_plane];
                    }
                    if need_off {
                        doff = vec![T::zero(); off_plane];
                    }
                    deform_col2im(
                        &dcols,
                        xb,
                        ob,
                        geom,
                        need_x.then_some(dx.as_mut_slice()),
                        need_off.then_some(doff.as_mut_slice()),
                    );
                }
                let (mut dw, mut db) = (Vec::new(), Vec::new());
                if need_w {
                    dw = vec![T::zero(); f * rows];
                    matmul_nt_into(gb, cols, &mut dw, f, l_count, rows, false);
                    db = gb.chunks(l_count).map(|r| r.iter().copied().sum()).collect();
                }
                (dx, doff, (dw, db))
            })
            .collect();
        drop((x, off, w));

        let dx = need_x.then(|| per_sample.iter().flat_map(|p| p.0.iter().copied()).collect());
        let doff = need_off.then(|| per_sample.iter().flat_map(|p| p.1.iter().copied()).collect());
        let (dw, db) = if need_w {
            let pg: Vec<_> = per_sample.into_iter().map(|p| p.2).collect();
            let (dw, db) = reduce_param_grads(&pg, f * rows, f);
            (Some(dw), Some(db))
        } else {
            (None, None)
        };
        let mut grads = vec![dx, doff, dw.filter(|_| inputs[2].requires_grad())];
        if inputs.len() > 3 {
            grads.push(db.filter(|_| inputs[3].requires_grad()));
        }
        grads
    }
}

/// Deformable convolution.
///
/// `offsets` has shape `[B, 2·K², Ho, Wo]`; channel `2n` shifts tap `n`
/// vertically and `2n + 1` horizontally, in input pixels. Samples falling
/// outside the input contribute zero. Gradients flow to the input, the
/// offsets, the weights and the bias.
pub fn deform_conv2d<T: Element>(
    input: &Tensor<T>,
    offsets: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (batch, f, geom) = check_conv_inputs("deform_conv2d", input, weight, bias, stride, padding)?;
    let expected_off = [batch, 2 * geom.taps(), geom.out_height, geom.out_width];
    if offsets.shape() != expected_off {
        return Err(TensorError::ShapeMismatch {
            op: "deform_conv2d",
            lhs: expected_off.to_vec(),
            rhs: offsets.shape().to_vec(),
        });
    }
    let (rows, l_count) = (geom.col_rows(), geom.locations());
    let in_plane = geom.channels * geom.height * geom.width;
    let off_plane = 2 * geom.taps() * l_count;
    let x = input.data();
    let off = offsets.data();
    let w = weight.data();
    let bvals = bias.map(|b| b.to_vec());
    let track = crate::is_grad_enabled()
        && (input.requires_grad()
            || offsets.requires_grad()
            || weight.requires_grad()
            || bias.is_some_and(|b| b.requires_grad()));

    let results: Vec<(Vec<T>, Vec<T>)> = (0..batch)
        .into_par_iter()
        .map(|b| {
            let mut cols = vec![T::zero(); rows * l_count];
            deform_im2col(
                &x[b * in_plane..(b + 1) * in_plane],
                &off[b * off_plane..(b + 1) * off_plane],
                &geom,
                &mut cols,
            );
            let mut out = vec![T::zero(); f * l_count];
            matmul_into(&w, &cols, &mut out, f, rows, l_count, false);
            add_bias(&mut out, bvals.as_deref(), l_count);
            (out, if track { cols } else { Vec::new() })
        })
        .collect();
    drop((x, off, w));

    let mut out = Vec::with_capacity(batch * f * l_count);
    let mut saved = Vec::with_capacity(batch);
    for (o, c) in results {
        out.extend_from_slice(&o);
        saved.push(c);
    }
    let mut inputs = vec![input.clone(), offsets.clone(), weight.clone()];
    inputs.extend(bias.cloned());
    Ok(Tensor::from_op(
        out,
        vec![batch, f, geom.out_height, geom.out_width],
        DeformConv2dOp {
            geom,
            filters: f,
            cols: saved,
        },
        inputs,
    ))
}

struct BilinearSampleOp {
    height: usize,
    width: usize,
}

impl<T: Element> Backward<T> for BilinearSampleOp {
    fn name(&self) -> &'static str {
        "bilinear_sample"
    }

    fn backward(&self, inputs: &[Tensor<T>], _out: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        let feat = inputs[0].data();
        let pos = inputs[1].data();
        let plane = self.height * self.width;
        let corners = Corners::at(pos[0], pos[1], self.height, self.width);
        let dfeat = inputs[0].requires_grad().then(|| {
            let mut d = vec![T::zero(); feat.len()];
            for (c, gc) in g.iter().enumerate() {
                corners.scatter(&mut d[c * plane..(c + 1) * plane], *gc);
            }
            d
        });
        let dpos = inputs[1].requires_grad().then(|| {
            let (mut gy, mut gx) = (T::zero(), T::zero());
            for (c, gc) in g.iter().enumerate() {
                let (dy, dx) = corners.coord_grad(&feat[c * plane..(c + 1) * plane]);
                gy += dy * *gc;
                gx += dx * *gc;
            }
            vec![gy, gx]
        });
        vec![dfeat, dpos]
    }
}

/// Samples every channel of `feature [C, H, W]` at the fractional position
/// `position = [y, x]`, returning `[C]`.
pub fn bilinear_sample<T: Element>(feature: &Tensor<T>, position: &Tensor<T>) -> Result<Tensor<T>> {
    let fs = feature.shape();
    if fs.len() != 3 {
        return Err(TensorError::BadShape {
            op: "bilinear_sample",
            expected: "feature [C, H, W]".into(),
            got: fs.to_vec(),
        });
    }
    if position.shape() != [2] {
        return Err(TensorError::BadShape {
            op: "bilinear_sample",
            expected: "position [2]".into(),
            got: position.shape().to_vec(),
        });
    }
    let (c, h, w) = (fs[0], fs[1], fs[2]);
    let pos = position.to_vec();
    let corners = Corners::at(pos[0], pos[1], h, w);
    let feat = feature.data();
    let out = (0..c)
        .map(|ch| corners.sample(&feat[ch * h * w..(ch + 1) * h * w]))
        .collect();
    drop(feat);
    Ok(Tensor::from_op(
        out,
        vec![c],
        BilinearSampleOp {
            height: h,
            width: w,
        },
        vec![feature.clone(), position.clone()],
    ))
}
