//! Differentiable operations on [`Var`].

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{ConvGeom, Op, Var};
use crate::kernels;
use crate::map::LinearMap;
use crate::tensor::{numel, Tensor};

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let pad = |s: &[usize], d: usize| {
        let off = rank - s.len();
        if d < off {
            1
        } else {
            s[d - off]
        }
    };
    (0..rank)
        .map(|d| {
            let (x, y) = (pad(a, d), pad(b, d));
            if x == y || y == 1 {
                Some(x)
            } else if x == 1 {
                Some(y)
            } else {
                None
            }
        })
        .collect()
}

fn check_domain(op: &'static str, operand: &'static str, t: &Tensor, ok: impl Fn(f64) -> bool) -> Result<()> {
    match t.data().iter().position(|&v| !ok(v)) {
        Some(index) => Err(Error::Domain {
            op,
            operand,
            index,
            value: t.data()[index],
        }),
        None => Ok(()),
    }
}

impl<'g> Var<'g> {
    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'g> {
        let value = self.value.map(f);
        self.graph.record(op, &[self], value)
    }

    fn binary_same(&self, other: &Var<'g>, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'g>> {
        let value = self.value.zip_map(&other.value, f)?;
        Ok(self.graph.record(op, &[self, other], value))
    }

    /// Brings both operands to their common broadcast shape.
    fn broadcast_pair(&self, other: &Var<'g>, op: &'static str) -> Result<(Var<'g>, Var<'g>)> {
        if self.shape() == other.shape() {
            return Ok((self.clone(), other.clone()));
        }
        let target = broadcast_shape(self.shape(), other.shape()).ok_or_else(|| Error::ShapeMismatch {
            op,
            lhs: self.shape().to_vec(),
            rhs: other.shape().to_vec(),
        })?;
        Ok((self.expand_to(&target)?, other.expand_to(&target)?))
    }

    pub fn add(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let (a, b) = self.broadcast_pair(other, "add")?;
        a.binary_same(&b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let (a, b) = self.broadcast_pair(other, "sub")?;
        a.binary_same(&b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let (a, b) = self.broadcast_pair(other, "mul")?;
        a.binary_same(&b, Op::Mul, |x, y| x * y)
    }

    /// Elementwise quotient; any exactly-zero divisor is an error.
    pub fn div(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let (a, b) = self.broadcast_pair(other, "div")?;
        check_domain("div", "divisor", &b.value, |v| v != 0.0)?;
        a.binary_same(&b, Op::Div, |x, y| x / y)
    }

    pub fn neg(&self) -> Var<'g> {
        self.unary(Op::Neg, |x| -x)
    }

    pub fn scale(&self, c: f64) -> Var<'g> {
        self.unary(Op::Scale(c), move |x| x * c)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'g> {
        self.unary(Op::Shift, move |x| x + c)
    }

    pub fn mul_scalar(&self, c: f64) -> Var<'g> {
        self.scale(c)
    }

    pub fn div_scalar(&self, c: f64) -> Result<Var<'g>> {
        if c == 0.0 {
            return Err(Error::Domain {
                op: "div",
                operand: "divisor",
                index: 0,
                value: c,
            });
        }
        Ok(self.scale(1.0 / c))
    }

    pub fn exp(&self) -> Var<'g> {
        self.unary(Op::Exp, f64::exp)
    }

    /// Natural log; non-positive entries are an error.
    pub fn log(&self) -> Result<Var<'g>> {
        check_domain("log", "input", &self.value, |v| v > 0.0)?;
        Ok(self.unary(Op::Log, f64::ln))
    }

    /// Square root; negative entries are an error. The derivative at zero is
    /// taken as zero.
    pub fn sqrt(&self) -> Result<Var<'g>> {
        check_domain("sqrt", "input", &self.value, |v| v >= 0.0)?;
        Ok(self.unary(Op::Sqrt, f64::sqrt))
    }

    /// `1/x` where `x != 0`, and `0` where `x == 0`.
    pub fn recip_or_zero(&self) -> Var<'g> {
        self.unary(Op::RecipOrZero, |x| if x == 0.0 { 0.0 } else { 1.0 / x })
    }

    /// `max(x, 0)`. The backward pass multiplies by the constant mask
    /// `x > 0`, so the subgradient at exactly zero is zero and the mask
    /// contributes nothing to higher derivatives.
    pub fn relu(&self) -> Var<'g> {
        self.unary(Op::Relu, |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn square(&self) -> Var<'g> {
        // `mul` cannot fail for identical shapes.
        self.binary_same(self, Op::Mul, |x, y| x * y)
            .expect("identical shapes")
    }

    fn check_axes(&self, op: &'static str, axes: &[usize]) -> Result<Vec<usize>> {
        let rank = self.value.rank();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if let Some(&axis) = sorted.iter().find(|&&a| a >= rank) {
            return Err(Error::InvalidAxis { op, axis, rank });
        }
        Ok(sorted)
    }

    fn drop_axes(shape: &[usize], axes: &[usize]) -> Vec<usize> {
        shape
            .iter()
            .enumerate()
            .filter(|(d, _)| !axes.contains(d))
            .map(|(_, &s)| s)
            .collect()
    }

    pub(crate) fn sum_keep(&self, axes: &[usize]) -> Var<'g> {
        let (data, shape) = kernels::sum_axes(self.value.data(), self.shape(), axes);
        self.graph.record(Op::Sum, &[self], Tensor::from_parts(shape, data))
    }

    pub fn sum(&self, axes: &[usize], keepdim: bool) -> Result<Var<'g>> {
        let axes = self.check_axes("sum", axes)?;
        let kept = self.sum_keep(&axes);
        if keepdim {
            Ok(kept)
        } else {
            kept.reshape(&Self::drop_axes(self.shape(), &axes))
        }
    }

    pub fn sum_all(&self) -> Var<'g> {
        let axes: Vec<usize> = (0..self.value.rank()).collect();
        self.sum_keep(&axes)
            .reshape(&[])
            .expect("single element reshapes to a scalar")
    }

    pub fn mean(&self, axes: &[usize], keepdim: bool) -> Result<Var<'g>> {
        let axes = self.check_axes("mean", axes)?;
        let count: usize = axes.iter().map(|&a| self.shape()[a]).product();
        if count == 0 {
            return Err(Error::invalid("mean", "reduction over an empty axis"));
        }
        Ok(self.sum(&axes, keepdim)?.scale(1.0 / count as f64))
    }

    pub fn mean_all(&self) -> Result<Var<'g>> {
        if self.value.is_empty() {
            return Err(Error::invalid("mean", "mean of an empty tensor"));
        }
        Ok(self.sum_all().scale(1.0 / self.value.len() as f64))
    }

    /// Maximum over `axes`; the gradient goes to the first maximal element in
    /// raster order.
    pub fn max(&self, axes: &[usize], keepdim: bool) -> Result<Var<'g>> {
        let axes = self.check_axes("max", axes)?;
        let shape = self.shape().to_vec();
        if axes.iter().any(|&a| shape[a] == 0) {
            return Err(Error::invalid("max", "reduction over an empty axis"));
        }
        let mut kept_shape = shape.clone();
        for &a in &axes {
            kept_shape[a] = 1;
        }
        let rank = shape.len();
        let mut in_strides = vec![1usize; rank];
        for d in (0..rank.saturating_sub(1)).rev() {
            in_strides[d] = in_strides[d + 1] * shape[d + 1];
        }
        let data = self.value.data();
        let mut rows = vec![Vec::new(); numel(&kept_shape)];
        let mut best: Vec<Option<(usize, f64)>> = vec![None; rows.len()];
        let mut idx = vec![0usize; rank];
        for (flat, &v) in data.iter().enumerate() {
            let mut out = 0;
            for d in 0..rank {
                let coord = if axes.contains(&d) { 0 } else { idx[d] };
                out = out * kept_shape[d] + coord;
            }
            match best[out] {
                Some((_, b)) if v <= b => {}
                _ => best[out] = Some((flat, v)),
            }
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        for (row, b) in rows.iter_mut().zip(&best) {
            let (flat, _) = b.expect("non-empty reduction");
            row.push((flat, 1.0));
        }
        let map = LinearMap::from_rows(self.value.len(), rows)?;
        let out_shape = if keepdim {
            kept_shape
        } else {
            Self::drop_axes(&shape, &axes)
        };
        self.apply_map(&Arc::new(map), &out_shape)
    }

    pub fn max_all(&self) -> Result<Var<'g>> {
        let axes: Vec<usize> = (0..self.value.rank()).collect();
        self.max(&axes, false)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g>> {
        let value = self.value.reshape(shape.to_vec())?;
        Ok(self.graph.record(Op::Reshape, &[self], value))
    }

    pub fn flatten(&self) -> Var<'g> {
        self.reshape(&[self.value.len()]).expect("same element count")
    }

    /// NumPy-style broadcast to `shape`.
    pub fn expand_to(&self, shape: &[usize]) -> Result<Var<'g>> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        let mismatch = || Error::ShapeMismatch {
            op: "expand",
            lhs: self.shape().to_vec(),
            rhs: shape.to_vec(),
        };
        if self.value.rank() > shape.len() {
            return Err(mismatch());
        }
        let mut padded = vec![1; shape.len() - self.value.rank()];
        padded.extend_from_slice(self.shape());
        if padded
            .iter()
            .zip(shape)
            .any(|(&from, &to)| from != to && from != 1)
        {
            return Err(mismatch());
        }
        let src = if padded.as_slice() == self.shape() {
            self.clone()
        } else {
            self.reshape(&padded)?
        };
        let data = kernels::expand(src.value.data(), &padded, shape);
        let value = Tensor::from_parts(shape.to_vec(), data);
        Ok(src.graph.record(Op::Expand, &[&src], value))
    }

    /// Transpose of a 2-D tensor.
    pub fn t(&self) -> Result<Var<'g>> {
        let &[r, c] = self.shape() else {
            return Err(Error::invalid("transpose", format!("expected a matrix, got {:?}", self.shape())));
        };
        let data = kernels::transpose(r, c, self.value.data());
        Ok(self.graph.record(Op::Transpose, &[self], Tensor::from_parts(vec![c, r], data)))
    }

    pub fn matmul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let (&[m, k], &[k2, n]) = (self.shape(), other.shape()) else {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        };
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value.data(), false, other.value.data(), false, &mut out, false);
        Ok(self
            .graph
            .record(Op::MatMul, &[self, other], Tensor::from_parts(vec![m, n], out)))
    }

    /// Zero-padded cross-correlation: `[n, c, h, w] * [f, c, kh, kw]`.
    pub fn conv2d(&self, kernel: &Var<'g>, stride: usize, padding: usize) -> Result<Var<'g>> {
        let (&[n, c, h, w], &[f, kc, kh, kw]) = (self.shape(), kernel.shape()) else {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape().to_vec(),
                rhs: kernel.shape().to_vec(),
            });
        };
        if kc != c {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape().to_vec(),
                rhs: kernel.shape().to_vec(),
            });
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be at least 1"));
        }
        if kh == 0 || kw == 0 || kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel {kh}x{kw} does not fit a {h}x{w} input with padding {padding}"),
            ));
        }
        let geom = ConvGeom {
            in_h: h,
            in_w: w,
            kh,
            kw,
            stride,
            padding,
        };
        Ok(conv_forward(self, kernel, n, c, f, geom))
    }

    /// Stacks equally shaped vars along a new leading axis.
    pub fn stack(items: &[Var<'g>]) -> Result<Var<'g>> {
        let Some(first) = items.first() else {
            return Err(Error::invalid("stack", "no tensors to stack"));
        };
        let values: Vec<Tensor> = items.iter().map(|v| v.value.clone()).collect();
        let value = Tensor::stack(&values)?;
        let refs: Vec<&Var<'g>> = items.iter().collect();
        Ok(first.graph.record(Op::Stack, &refs, value))
    }

    /// The `index`-th slice along the leading axis.
    pub fn select(&self, index: usize) -> Result<Var<'g>> {
        let value = self.value.select(index)?;
        let len = self.shape()[0];
        Ok(self.graph.record(Op::Select { index, len }, &[self], value))
    }

    /// Applies `map` (see [`LinearMap`]) to each trailing plane; the result is
    /// reshaped to `out_shape`.
    pub fn apply_map(&self, map: &Arc<LinearMap>, out_shape: &[usize]) -> Result<Var<'g>> {
        apply_map_impl(self, map, false, out_shape)
    }
}

pub(crate) fn apply_map_impl<'g>(
    x: &Var<'g>,
    map: &Arc<LinearMap>,
    transposed: bool,
    out_shape: &[usize],
) -> Result<Var<'g>> {
    let (in_len, out_len) = map.plane_lens(transposed);
    let len = x.value.len();
    if in_len == 0 || len % in_len != 0 || numel(out_shape) != (len / in_len) * out_len {
        return Err(Error::invalid(
            "apply_map",
            format!(
                "map {in_len}->{out_len} cannot take {:?} to {out_shape:?}",
                x.shape()
            ),
        ));
    }
    let data = map.apply(x.value.data(), transposed);
    let value = Tensor::from_parts(out_shape.to_vec(), data);
    Ok(x.graph.record(
        Op::Map {
            map: Arc::clone(map),
            transposed,
        },
        &[x],
        value,
    ))
}

pub(crate) fn conv_forward<'g>(
    x: &Var<'g>,
    kernel: &Var<'g>,
    n: usize,
    c: usize,
    f: usize,
    geom: ConvGeom,
) -> Var<'g> {
    let out = kernels::conv2d(x.value.data(), n, c, kernel.value.data(), f, &geom);
    let shape = vec![n, f, geom.out_h(), geom.out_w()];
    x.graph
        .record(Op::Conv2d(geom), &[x, kernel], Tensor::from_parts(shape, out))
}

/// `gy` `[n, f, oh, ow]`, `kernel` `[f, c, kh, kw]` -> `[n, c, h, w]`.
pub(crate) fn conv_input_grad<'g>(gy: &Var<'g>, kernel: &Var<'g>, geom: ConvGeom) -> Var<'g> {
    let (n, f) = (gy.shape()[0], gy.shape()[1]);
    let c = kernel.shape()[1];
    let out = kernels::conv2d_input_grad(gy.value.data(), n, f, kernel.value.data(), c, &geom);
    let shape = vec![n, c, geom.in_h, geom.in_w];
    gy.graph.record(
        Op::Conv2dInputGrad(geom),
        &[gy, kernel],
        Tensor::from_parts(shape, out),
    )
}

/// `x` `[n, c, h, w]`, `gy` `[n, f, oh, ow]` -> `[f, c, kh, kw]`.
pub(crate) fn conv_weight_grad<'g>(x: &Var<'g>, gy: &Var<'g>, geom: ConvGeom) -> Var<'g> {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let f = gy.shape()[1];
    let out = kernels::conv2d_weight_grad(x.value.data(), n, c, gy.value.data(), f, &geom);
    let shape = vec![f, c, geom.kh, geom.kw];
    x.graph.record(
        Op::Conv2dWeightGrad(geom),
        &[x, gy],
        Tensor::from_parts(shape, out),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Graph;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_clamps_negatives() {
        let g = Graph::new();
        let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        assert_eq!(x.relu().value().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn exp_inverts_log() {
        let g = Graph::new();
        let x = g.constant(t(&[2], &[0.5, 2.0]));
        let y = x.log().unwrap().exp();
        assert!(y.value().max_abs_diff(x.value()).unwrap() < 1e-12);
    }

    #[test]
    fn domain_errors_name_the_operand() {
        let g = Graph::new();
        let x = g.constant(t(&[2], &[1.0, -1.0]));
        assert!(matches!(
            x.log(),
            Err(Error::Domain { operand: "input", index: 1, .. })
        ));
        assert!(matches!(
            x.sqrt(),
            Err(Error::Domain { op: "sqrt", index: 1, .. })
        ));
        let z = g.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(
            x.div(&z),
            Err(Error::Domain { operand: "divisor", index: 1, .. })
        ));
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![3, 2]));
        assert!(matches!(a.add(&b), Err(Error::ShapeMismatch { .. })));
        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn scalar_operand_broadcasts() {
        let g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let s = g.constant(Tensor::scalar(10.0));
        assert_eq!(a.mul(&s).unwrap().value().data(), &[10.0, 20.0, 30.0, 40.0]);
        assert_eq!(s.sub(&a).unwrap().value().data(), &[9.0, 8.0, 7.0, 6.0]);
    }

    #[test]
    fn reductions() {
        let g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 3.0, 5.0, 7.0]));
        assert_eq!(a.mean_all().unwrap().item().unwrap(), 4.0);
        let b = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let s = b.sum(&[0], false).unwrap();
        assert_eq!(s.shape(), &[2]);
        assert_eq!(s.value().data(), &[4.0, 6.0]);
        let m = b.max(&[1], false).unwrap();
        assert_eq!(m.value().data(), &[2.0, 4.0]);
        assert!(matches!(b.sum(&[2], false), Err(Error::InvalidAxis { axis: 2, .. })));
    }

    #[test]
    fn matmul_examples() {
        let g = Graph::new();
        let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        assert_eq!(eye.matmul(&b).unwrap().value(), b.value());
        let r = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let c = g.constant(t(&[2, 1], &[3.0, 4.0]));
        assert_eq!(r.matmul(&c).unwrap().value().data(), &[11.0]);
    }

    #[test]
    fn conv_examples() {
        let g = Graph::new();
        let x = g.constant(Tensor::from_fn(vec![1, 1, 3, 3], |i| i as f64));
        let one = g.constant(Tensor::ones(vec![1, 1, 1, 1]));
        assert_eq!(x.conv2d(&one, 1, 0).unwrap().value(), x.value());
        let ones = g.constant(Tensor::ones(vec![1, 1, 3, 3]));
        let k = g.constant(Tensor::ones(vec![1, 1, 3, 3]));
        let y = ones.conv2d(&k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.value().data(), &[9.0]);
        let big = g.constant(Tensor::ones(vec![1, 1, 5, 5]));
        assert!(ones.conv2d(&big, 1, 0).is_err());
        assert!(ones.conv2d(&k, 0, 0).is_err());
        let padded = ones.conv2d(&k, 2, 1).unwrap();
        assert_eq!(padded.shape(), &[1, 1, 2, 2]);
        assert_eq!(padded.value().data(), &[4.0, 4.0, 4.0, 4.0]);
    }
}
