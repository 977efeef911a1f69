//! Sparse linear maps between flat planes.
//!
//! Cropping, flipping, pooling and bilinear resampling are all fixed linear
//! maps of a spatial plane, so one sparse operator (and its transpose, which
//! is its own adjoint) covers all of them and stays closed under repeated
//! differentiation.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
struct Csr {
    offsets: Vec<usize>,
    index: Vec<usize>,
    weight: Vec<f64>,
}

impl Csr {
    fn rows(&self) -> usize {
        self.offsets.len() - 1
    }

    fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.offsets[r]..self.offsets[r + 1];
        self.index[span.clone()]
            .iter()
            .copied()
            .zip(self.weight[span].iter().copied())
    }

    fn transpose(&self, cols: usize) -> Csr {
        let mut counts = vec![0usize; cols + 1];
        for &c in &self.index {
            counts[c + 1] += 1;
        }
        for i in 0..cols {
            counts[i + 1] += counts[i];
        }
        let offsets = counts.clone();
        let mut cursor = counts;
        let mut index = vec![0; self.index.len()];
        let mut weight = vec![0.0; self.weight.len()];
        for r in 0..self.rows() {
            for (c, w) in self.row(r) {
                let slot = cursor[c];
                index[slot] = r;
                weight[slot] = w;
                cursor[c] += 1;
            }
        }
        Csr {
            offsets,
            index,
            weight,
        }
    }
}

/// `out[r] = sum_k w_rk * in[c_rk]` over a plane of `in_len` values.
///
/// Applied chunk-wise: a tensor whose length is a multiple of `in_len` is
/// treated as a stack of independent planes.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearMap {
    in_len: usize,
    out_len: usize,
    forward: Csr,
    adjoint: Csr,
}

impl LinearMap {
    /// Builds a map from one list of `(input index, weight)` pairs per output.
    pub fn from_rows(in_len: usize, rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let mut index = Vec::new();
        let mut weight = Vec::new();
        offsets.push(0);
        for row in &rows {
            for &(c, w) in row {
                if c >= in_len {
                    return Err(Error::invalid(
                        "linear_map",
                        format!("input index {c} out of range for plane of {in_len}"),
                    ));
                }
                index.push(c);
                weight.push(w);
            }
            offsets.push(index.len());
        }
        let forward = Csr {
            offsets,
            index,
            weight,
        };
        let adjoint = forward.transpose(in_len);
        Ok(Self {
            in_len,
            out_len: rows.len(),
            forward,
            adjoint,
        })
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn out_len(&self) -> usize {
        self.out_len
    }

    pub fn transposed(&self) -> LinearMap {
        LinearMap {
            in_len: self.out_len,
            out_len: self.in_len,
            forward: self.adjoint.clone(),
            adjoint: self.forward.clone(),
        }
    }

    pub(crate) fn plane_lens(&self, transposed: bool) -> (usize, usize) {
        if transposed {
            (self.out_len, self.in_len)
        } else {
            (self.in_len, self.out_len)
        }
    }

    /// Applies the map (or its transpose) to every plane of `data`.
    pub(crate) fn apply(&self, data: &[f64], transposed: bool) -> Vec<f64> {
        let (csr, in_len, out_len) = if transposed {
            (&self.adjoint, self.out_len, self.in_len)
        } else {
            (&self.forward, self.in_len, self.out_len)
        };
        let planes = data.len() / in_len;
        let mut out = Vec::with_capacity(planes * out_len);
        for p in 0..planes {
            let src = &data[p * in_len..(p + 1) * in_len];
            for r in 0..out_len {
                out.push(csr.row(r).map(|(c, w)| w * src[c]).sum());
            }
        }
        out
    }

    /// `self` followed by `next`: the map `x -> next(self(x))`.
    pub fn then(&self, next: &LinearMap) -> Result<LinearMap> {
        if next.in_len != self.out_len {
            return Err(Error::invalid(
                "linear_map",
                format!(
                    "cannot compose a map producing {} values with one consuming {}",
                    self.out_len, next.in_len
                ),
            ));
        }
        let mut scratch = vec![0.0; self.in_len];
        let mut touched: Vec<usize> = Vec::new();
        let mut rows = Vec::with_capacity(next.out_len);
        for r in 0..next.out_len {
            for (mid, w_next) in next.forward.row(r) {
                for (c, w_self) in self.forward.row(mid) {
                    if scratch[c] == 0.0 && !touched.contains(&c) {
                        touched.push(c);
                    }
                    scratch[c] += w_next * w_self;
                }
            }
            touched.sort_unstable();
            let row: Vec<(usize, f64)> = touched
                .drain(..)
                .map(|c| (c, std::mem::take(&mut scratch[c])))
                .filter(|&(_, w)| w != 0.0)
                .collect();
            rows.push(row);
        }
        LinearMap::from_rows(self.in_len, rows)
    }

    /// Block-diagonal map applying `blocks[i]` to the `i`-th input plane.
    pub fn block_diagonal(blocks: &[&LinearMap]) -> Result<LinearMap> {
        let in_len: usize = blocks.iter().map(|b| b.in_len).sum();
        let mut rows = Vec::new();
        let mut base = 0;
        for b in blocks {
            for r in 0..b.out_len {
                rows.push(b.forward.row(r).map(|(c, w)| (c + base, w)).collect());
            }
            base += b.in_len;
        }
        LinearMap::from_rows(in_len, rows)
    }

    /// Dense `out_len x in_len` matrix, for tests and debugging.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.in_len * self.out_len];
        for r in 0..self.out_len {
            for (c, w) in self.forward.row(r) {
                m[r * self.in_len + c] += w;
            }
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> LinearMap {
        LinearMap::from_rows(3, vec![vec![(0, 1.0), (2, 0.5)], vec![(1, 2.0)]]).unwrap()
    }

    #[test]
    fn adjoint_is_dense_transpose() {
        let m = sample();
        let t = m.transposed();
        let d = m.to_dense();
        let dt = t.to_dense();
        for r in 0..2 {
            for c in 0..3 {
                assert_eq!(d[r * 3 + c], dt[c * 2 + r]);
            }
        }
    }

    #[test]
    fn applies_per_plane() {
        let m = sample();
        let out = m.apply(&[1.0, 2.0, 4.0, 0.0, 1.0, 0.0], false);
        assert_eq!(out, vec![3.0, 4.0, 0.0, 2.0]);
    }

    #[test]
    fn composition_matches_sequential_application() {
        let a = sample();
        let b = LinearMap::from_rows(2, vec![vec![(0, 1.0), (1, -1.0)], vec![(1, 3.0)]]).unwrap();
        let ab = a.then(&b).unwrap();
        let x = [0.3, -1.2, 2.5];
        let direct = ab.apply(&x, false);
        let staged = b.apply(&a.apply(&x, false), false);
        for (d, s) in direct.iter().zip(&staged) {
            assert!((d - s).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_out_of_range_index() {
        assert!(LinearMap::from_rows(2, vec![vec![(2, 1.0)]]).is_err());
    }
}
