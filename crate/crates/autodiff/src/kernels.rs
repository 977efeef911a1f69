//! Raw numeric kernels on flat buffers. No graph bookkeeping here.

use crate::graph::ConvGeom;
use crate::tensor::numel;

/// `c = op(a) * op(b) (+ c when accumulate)`, all row-major.
///
/// `a` is `m x k` after optional transposition, `b` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices have exactly the lengths implied by the dimensions
    // and strides above, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn transpose(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Broadcast `data` (shape `from`, same rank as `to`, size-1 dims expand).
pub(crate) fn expand(data: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    let rank = to.len();
    let src = strides(from);
    let eff: Vec<usize> = (0..rank)
        .map(|d| if from[d] == 1 { 0 } else { src[d] })
        .collect();
    let total = numel(to);
    let mut out = Vec::with_capacity(total);
    if rank == 0 {
        out.push(data[0]);
        return out;
    }
    let inner = to[rank - 1];
    let inner_stride = eff[rank - 1];
    let mut idx = vec![0usize; rank];
    while out.len() < total {
        let base: usize = (0..rank - 1).map(|d| idx[d] * eff[d]).sum();
        if inner_stride == 0 {
            let v = data[base];
            out.extend(std::iter::repeat_n(v, inner));
        } else {
            out.extend_from_slice(&data[base..base + inner]);
        }
        // advance the odometer over the outer dimensions
        let mut d = rank - 1;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            if idx[d] < to[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

/// Sum over `axes`, keeping them as size-1 dims. Returns (data, shape).
pub(crate) fn sum_axes(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let mut out_shape = shape.to_vec();
    for &a in axes {
        out_shape[a] = 1;
    }
    let out_strides = strides(&out_shape);
    let eff: Vec<usize> = (0..rank)
        .map(|d| if out_shape[d] == 1 { 0 } else { out_strides[d] })
        .collect();
    let mut out = vec![0.0; numel(&out_shape)];
    if rank == 0 {
        out[0] = data[0];
        return (out, out_shape);
    }
    let inner = shape[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut pos = 0;
    while pos < data.len() {
        let base: usize = (0..rank - 1).map(|d| idx[d] * eff[d]).sum();
        let row = &data[pos..pos + inner];
        if eff[rank - 1] == 0 {
            out[base] += row.iter().sum::<f64>();
        } else {
            for (o, v) in out[base..base + inner].iter_mut().zip(row) {
                *o += v;
            }
        }
        pos += inner;
        let mut d = rank - 1;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

fn im2col(x: &[f64], c: usize, g: &ConvGeom, cols: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let pad = g.padding as isize;
    for ch in 0..c {
        let src = &x[ch * g.in_h * g.in_w..(ch + 1) * g.in_h * g.in_w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ch * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src_row = &src[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, slot) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        *slot = if ix < 0 || ix >= g.in_w as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], c: usize, g: &ConvGeom, x: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let pad = g.padding as isize;
    for ch in 0..c {
        let dst = &mut x[ch * g.in_h * g.in_w..(ch + 1) * g.in_h * g.in_w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ch * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let base = iy as usize * g.in_w;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `x` `[n, c, h, w]` with `k` `[f, c, kh, kw]`.
pub(crate) fn conv2d(x: &[f64], n: usize, c: usize, k: &[f64], f: usize, g: &ConvGeom) -> Vec<f64> {
    let plane = g.out_h() * g.out_w();
    let ckk = c * g.kh * g.kw;
    let mut cols = vec![0.0; ckk * plane];
    let mut out = vec![0.0; n * f * plane];
    let in_size = c * g.in_h * g.in_w;
    for b in 0..n {
        im2col(&x[b * in_size..(b + 1) * in_size], c, g, &mut cols);
        gemm(
            f,
            ckk,
            plane,
            k,
            false,
            &cols,
            false,
            &mut out[b * f * plane..(b + 1) * f * plane],
            false,
        );
    }
    out
}

/// Adjoint of [`conv2d`] in its input: `gy` `[n, f, oh, ow]` to `[n, c, h, w]`.
pub(crate) fn conv2d_input_grad(
    gy: &[f64],
    n: usize,
    f: usize,
    k: &[f64],
    c: usize,
    g: &ConvGeom,
) -> Vec<f64> {
    let plane = g.out_h() * g.out_w();
    let ckk = c * g.kh * g.kw;
    let in_size = c * g.in_h * g.in_w;
    let mut cols = vec![0.0; ckk * plane];
    let mut out = vec![0.0; n * in_size];
    for b in 0..n {
        gemm(
            ckk,
            f,
            plane,
            k,
            true,
            &gy[b * f * plane..(b + 1) * f * plane],
            false,
            &mut cols,
            false,
        );
        col2im(&cols, c, g, &mut out[b * in_size..(b + 1) * in_size]);
    }
    out
}

/// Adjoint of [`conv2d`] in its kernel: returns `[f, c, kh, kw]`.
pub(crate) fn conv2d_weight_grad(
    x: &[f64],
    n: usize,
    c: usize,
    gy: &[f64],
    f: usize,
    g: &ConvGeom,
) -> Vec<f64> {
    let plane = g.out_h() * g.out_w();
    let ckk = c * g.kh * g.kw;
    let in_size = c * g.in_h * g.in_w;
    let mut cols = vec![0.0; ckk * plane];
    let mut out = vec![0.0; f * ckk];
    for b in 0..n {
        im2col(&x[b * in_size..(b + 1) * in_size], c, g, &mut cols);
        gemm(
            f,
            plane,
            ckk,
            &gy[b * f * plane..(b + 1) * f * plane],
            false,
            &cols,
            true,
            &mut out,
            true,
        );
    }
    out
}
