//! Primitive differentiable operations.
//!
//! Binary elementwise ops broadcast by trailing-dimension alignment only: the
//! shapes must be equal, or one must be a suffix of the other, in which case
//! the shorter operand is tiled over the leading dimensions.

use crate::element::{matmul_into, matmul_nt_into, matmul_tn_into};
use crate::tensor::numel;
use crate::{Backward, Element, Result, Tensor, TensorError};

/// Output shape plus the length of the smaller operand's period, or `None`
/// when the shapes do not align.
fn broadcast(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a == b || a.ends_with(b) {
        Some(a.to_vec())
    } else if b.ends_with(a) {
        Some(b.to_vec())
    } else {
        None
    }
}

/// Sums a full-size gradient down to a tiled operand of length `len`.
fn reduce_to<T: Element>(g: &[T], len: usize) -> Vec<T> {
    if g.len() == len {
        return g.to_vec();
    }
    let mut out = vec![T::zero(); len];
    for chunk in g.chunks(len) {
        out.iter_mut().zip(chunk).for_each(|(o, v)| *o += *v);
    }
    out
}

fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        Err(TensorError::AxisOutOfRange { op, axis, rank })
    } else {
        Ok(())
    }
}

/// (outer, axis length, inner) decomposition around `axis`.
fn split_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

struct AddOp;

impl<T: Element> Backward<T> for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }

    fn backward(&self, inputs: &[Tensor<T>], _out: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        inputs
            .iter()
            .map(|t| t.requires_grad().then(|| reduce_to(g, t.numel())))
            .collect()
    }
}

struct SubOp;

impl<T: Element> Backward<T> for SubOp {
    fn name(&self) -> &'static str {
        "sub"
    }

    fn backward(&self, inputs: &[Tensor<T>], _out: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        vec![
            inputs[0]
                .requires_grad()
                .then(|| reduce_to(g, inputs[0].numel())),
            inputs[1].requires_grad().then(|| {
                let mut r = reduce_to(g, inputs[1].numel());
                r.iter_mut().for_each(|v| *v = -*v);
                r
            }),
        ]
    }
}

struct MulOp;

impl<T: Element> Backward<T> for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn backward(&self, inputs: &[Tensor<T>], _out: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        let a = inputs[0].data();
        let b = inputs[1].data();
        let ga = inputs[0].requires_grad().then(|| {
            let full: Vec<T> = g
                .iter()
                .enumerate()
                .map(|(i, gv)| *gv * b[i % b.len()])
                .collect();
            reduce_to(&full, a.len())
        });
        let gb = inputs[1].requires_grad().then(|| {
            let full: Vec<T> = g
                .iter()
                .enumerate()
                .map(|(i, gv)| *gv * a[i % a.len()])
                .collect();
            reduce_to(&full, b.len())
        });
        vec![ga, gb]
    }
}

struct ScaleOp<T>(T);

impl<T: Element> Backward<T> for ScaleOp<T> {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(&self, _inputs: &[Tensor<T>], _out: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(g.iter().map(|v| *v * self.0).collect())]
    }
}

struct MatmulOp {
    m: usize,
    k: usize,
    n: usize,
}

impl<T: Element> Backward<T> for MatmulOp {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(&self, inputs: &[Tensor<T>], _out: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        let (m, k, n) = (self.m, self.k, self.n);
        let ga = inputs[0].requires_grad().then(|| {
            let b = inputs[1].data();
            let mut ga = vec![T::zero(); m * k];
            matmul_nt_into(g, &b, &mut ga, m, n, k, false);
            ga
        });
        let gb = inputs[1].requires_grad().then(|| {
            let a = inputs[0].data();
            let mut gb = vec![T::zero(); k * n];
            matmul_tn_into(&a, g, &mut gb, k, m, n, false);
            gb
        });
        vec![ga, gb]
    }
}

struct ReshapeOp;

impl<T: Element> Backward<T> for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, _inputs: &[Tensor<T>], _out: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(g.to_vec())]
    }
}

struct ConcatOp {
    axis: usize,
}

impl<T: Element> Backward<T> for ConcatOp {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn backward(&self, inputs: &[Tensor<T>], _out: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        let shape0 = inputs[0].shape();
        let (outer, _, inner) = split_dims(shape0, self.axis);
        let total: usize = inputs.iter().map(|t| t.shape()[self.axis]).sum();
        let mut offset = 0;
        inputs
            .iter()
            .map(|t| {
                let len = t.shape()[self.axis];
                let r = t.requires_grad().then(|| {
                    let mut out = Vec::with_capacity(t.numel());
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        out.extend_from_slice(&g[start..start + len * inner]);
                    }
                    out
                });
                offset += len;
                r
            })
            .collect()
    }
}

struct SliceOp {
    axis: usize,
    start: usize,
    end: usize,
}

impl<T: Element> Backward<T> for SliceOp {
    fn name(&self) -> &'static str {
        "slice"
    }

    fn backward(&self, inputs: &[Tensor<T>], _out: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        let (outer, len, inner) = split_dims(inputs[0].shape(), self.axis);
        let width = (self.end - self.start) * inner;
        let mut out = vec![T::zero(); inputs[0].numel()];
        for o in 0..outer {
            let dst = (o * len + self.start) * inner;
            out[dst..dst + width].copy_from_slice(&g[o * width..(o + 1) * width]);
        }
        vec![Some(out)]
    }
}

struct SumAxisOp {
    axis: usize,
    scale: f64,
}

impl<T: Element> Backward<T> for SumAxisOp {
    fn name(&self) -> &'static str {
        "reduce_sum"
    }

    fn backward(&self, inputs: &[Tensor<T>], _out: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        let (outer, len, inner) = split_dims(inputs[0].shape(), self.axis);
        let s = T::cast(self.scale);
        let mut out = vec![T::zero(); inputs[0].numel()];
        for o in 0..outer {
            for a in 0..len {
                for i in 0..inner {
                    out[(o * len + a) * inner + i] = g[o * inner + i] * s;
                }
            }
        }
        vec![Some(out)]
    }
}

struct SumAllOp {
    scale: f64,
}

impl<T: Element> Backward<T> for SumAllOp {
    fn name(&self) -> &'static str {
        "reduce_sum_all"
    }

    fn backward(&self, inputs: &[Tensor<T>], _out: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(vec![g[0] * T::cast(self.scale); inputs[0].numel()])]
    }
}

struct ExpOp;

impl<T: Element> Backward<T> for ExpOp {
    fn name(&self) -> &'static str {
        "exp"
    }

    fn backward(&self, _inputs: &[Tensor<T>], out: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(g.iter().zip(out).map(|(g, y)| *g * *y).collect())]
    }
}

struct LogOp;

impl<T: Element> Backward<T> for LogOp {
    fn name(&self) -> &'static str {
        "log"
    }

    fn backward(&self, inputs: &[Tensor<T>], _out: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        let x = inputs[0].data();
        vec![Some(g.iter().zip(x.iter()).map(|(g, x)| *g / *x).collect())]
    }
}

struct MaxAxisOp {
    // Flat input index of the winning element for each output element.
    argmax: Vec<usize>,
}

impl<T: Element> Backward<T> for MaxAxisOp {
    fn name(&self) -> &'static str {
        "max"
    }

    fn backward(&self, inputs: &[Tensor<T>], _out: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        let mut out = vec![T::zero(); inputs[0].numel()];
        for (gi, &idx) in g.iter().zip(&self.argmax) {
            out[idx] += *gi;
        }
        vec![Some(out)]
    }
}

impl<T: Element> Tensor<T> {
    fn elementwise(
        &self,
        other: &Tensor<T>,
        op: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Vec<T>, Vec<usize>)> {
        let shape = broadcast(self.shape(), other.shape()).ok_or_else(|| {
            TensorError::ShapeMismatch {
                op,
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            }
        })?;
        let a = self.data();
        let b = other.data();
        let n = numel(&shape);
        let data = (0..n).map(|i| f(a[i % a.len()], b[i % b.len()])).collect();
        Ok((data, shape))
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (data, shape) = self.elementwise(other, "add", |a, b| a + b)?;
        Ok(Tensor::from_op(data, shape, AddOp, vec![self.clone(), other.clone()]))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (data, shape) = self.elementwise(other, "sub", |a, b| a - b)?;
        Ok(Tensor::from_op(data, shape, SubOp, vec![self.clone(), other.clone()]))
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (data, shape) = self.elementwise(other, "mul", |a, b| a * b)?;
        Ok(Tensor::from_op(data, shape, MulOp, vec![self.clone(), other.clone()]))
    }

    pub fn scale(&self, s: T) -> Tensor<T> {
        let data = self.data().iter().map(|v| *v * s).collect();
        Tensor::from_op(data, self.shape().to_vec(), ScaleOp(s), vec![self.clone()])
    }

    pub fn neg(&self) -> Tensor<T> {
        self.scale(-T::one())
    }

    /// `[m, k] × [k, n] → [m, n]`.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
        let (m, k, n) = (a[0], a[1], b[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_into(&self.data(), &other.data(), &mut out, m, k, n, false);
        Ok(Tensor::from_op(
            out,
            vec![m, n],
            MatmulOp { m, k, n },
            vec![self.clone(), other.clone()],
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            ReshapeOp,
            vec![self.clone()],
        ))
    }

    /// Joins tensors along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::InvalidArgument("concat of zero tensors".into()))?;
        check_axis("concat", axis, first.rank())?;
        for p in &parts[1..] {
            let same_rank = p.rank() == first.rank();
            let others_match = same_rank
                && p
                    .shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !others_match {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let (outer, _, inner) = split_dims(first.shape(), axis);
        let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let guards: Vec<_> = parts.iter().map(|p| p.data()).collect();
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for (p, d) in parts.iter().zip(&guards) {
                let w = p.shape()[axis] * inner;
                out.extend_from_slice(&d[o * w..(o + 1) * w]);
            }
        }
        drop(guards);
        Ok(Tensor::from_op(out, shape, ConcatOp { axis }, parts.to_vec()))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor<T>> {
        check_axis("slice", axis, self.rank())?;
        if start > end || end > self.shape()[axis] {
            return Err(TensorError::InvalidArgument(format!(
                "slice {start}..{end} out of bounds for axis {axis} of shape {:?}",
                self.shape()
            )));
        }
        let (outer, len, inner) = split_dims(self.shape(), axis);
        let d = self.data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[(o * len + start) * inner..(o * len + end) * inner]);
        }
        drop(d);
        let mut shape = self.shape().to_vec();
        shape[axis] = end - start;
        Ok(Tensor::from_op(
            out,
            shape,
            SliceOp { axis, start, end },
            vec![self.clone()],
        ))
    }

    pub fn sum_all(&self) -> Tensor<T> {
        let s = self.data().iter().copied().sum();
        Tensor::from_op(vec![s], Vec::new(), SumAllOp { scale: 1.0 }, vec![self.clone()])
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let n = self.numel().max(1);
        let s: T = self.data().iter().copied().sum();
        Tensor::from_op(
            vec![s / T::cast(n as f64)],
            Vec::new(),
            SumAllOp {
                scale: 1.0 / n as f64,
            },
            vec![self.clone()],
        )
    }

    fn reduce_axis(&self, axis: usize, mean: bool, op: &'static str) -> Result<Tensor<T>> {
        check_axis(op, axis, self.rank())?;
        let (outer, len, inner) = split_dims(self.shape(), axis);
        let scale = if mean { 1.0 / len.max(1) as f64 } else { 1.0 };
        let d = self.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += d[(o * len + a) * inner + i];
                }
            }
        }
        drop(d);
        out.iter_mut().for_each(|v| *v *= T::cast(scale));
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        Ok(Tensor::from_op(
            out,
            shape,
            SumAxisOp { axis, scale },
            vec![self.clone()],
        ))
    }

    /// Sum over `axis`, dropping it.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<T>> {
        self.reduce_axis(axis, false, "reduce_sum")
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor<T>> {
        self.reduce_axis(axis, true, "reduce_mean")
    }

    /// Maximum over `axis`; the gradient goes to the first maximal element.
    pub fn max_axis(&self, axis: usize) -> Result<Tensor<T>> {
        check_axis("max", axis, self.rank())?;
        let (outer, len, inner) = split_dims(self.shape(), axis);
        if len == 0 {
            return Err(TensorError::InvalidArgument("max over empty axis".into()));
        }
        let d = self.data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = o * len * inner + i;
                for a in 1..len {
                    let idx = (o * len + a) * inner + i;
                    if d[idx] > d[best] {
                        best = idx;
                    }
                }
                out.push(d[best]);
                argmax.push(best);
            }
        }
        drop(d);
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        Ok(Tensor::from_op(
            out,
            shape,
            MaxAxisOp { argmax },
            vec![self.clone()],
        ))
    }

    pub fn exp(&self) -> Tensor<T> {
        let data = self.data().iter().map(|v| v.exp()).collect();
        Tensor::from_op(data, self.shape().to_vec(), ExpOp, vec![self.clone()])
    }

    pub fn log(&self) -> Tensor<T> {
        let data = self.data().iter().map(|v| v.ln()).collect();
        Tensor::from_op(data, self.shape().to_vec(), LogOp, vec![self.clone()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::from_vec(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn add_elementwise() {
        let y = t(&[1.0, 2.0], &[2]).add(&t(&[3.0, 4.0], &[2])).unwrap();
        assert_eq!(y.to_vec(), vec![4.0, 6.0]);
    }

    #[test]
    fn add_broadcasts_trailing_dims() {
        let a = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let b = t(&[10.0, 20.0, 30.0], &[3]);
        assert_eq!(
            a.add(&b).unwrap().to_vec(),
            vec![11.0, 22.0, 33.0, 14.0, 25.0, 36.0]
        );
        let err = a.add(&t(&[1.0, 2.0], &[2])).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { op: "add", .. }));
    }

    #[test]
    fn matmul_identity() {
        let eye = t(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], &[3, 3]);
        let a = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2]);
        assert_eq!(eye.matmul(&a).unwrap().to_vec(), a.to_vec());
    }

    #[test]
    fn matmul_reports_dimensions() {
        let err = t(&[0.0; 6], &[2, 3]).matmul(&t(&[0.0; 4], &[2, 2])).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 2]
            }
        );
    }

    #[test]
    fn reduce_sum_of_ones() {
        assert_eq!(Tensor::<f64>::ones(&[2, 3]).sum_all().item(), 6.0);
    }

    #[test]
    fn axis_reductions() {
        let a = t(&[1.0, 5.0, 3.0, 4.0, 2.0, 6.0], &[2, 3]);
        assert_eq!(a.sum_axis(0).unwrap().to_vec(), vec![5.0, 7.0, 9.0]);
        assert_eq!(a.mean_axis(1).unwrap().to_vec(), vec![3.0, 4.0]);
        assert_eq!(a.max_axis(1).unwrap().to_vec(), vec![5.0, 6.0]);
        assert!(a.sum_axis(2).is_err());
    }

    #[test]
    fn concat_and_slice_invert() {
        let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = t(&[5.0, 6.0], &[2, 1]);
        let c = Tensor::concat(&[a.clone(), b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.to_vec(), vec![1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        assert_eq!(c.slice(1, 0, 2).unwrap().to_vec(), a.to_vec());
    }

    #[test]
    fn sum_of_product_gradient_is_other_factor() {
        let a = Tensor::<f64>::param(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b = t(&[0.5, -1.0, 2.0, 3.0], &[2, 2]);
        a.mul(&b).unwrap().sum_all().backward().unwrap();
        assert_eq!(a.grad().unwrap(), b.to_vec());
    }

    #[test]
    fn diamond_graph_sums_paths() {
        // y = exp(x) * log(x); dy/dx = exp(x) log(x) + exp(x) / x
        let x = Tensor::<f64>::param(vec![1.7], &[]).unwrap();
        let y = x.exp().mul(&x.log()).unwrap();
        y.backward().unwrap();
        let v: f64 = 1.7;
        let expected = v.exp() * v.ln() + v.exp() / v;
        assert!((x.grad().unwrap()[0] - expected).abs() < 1e-12);
    }
}
