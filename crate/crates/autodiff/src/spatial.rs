//! Spatial operators on the trailing two axes, built on [`LinearMap`].

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::map::LinearMap;

/// An axis-aligned rectangle in pixel coordinates: columns `x..x+w`, rows
/// `y..y+h`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

fn plane_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [.., h, w] => Ok((*h, *w)),
        _ => Err(Error::invalid(op, format!("expected at least 2 axes, got {shape:?}"))),
    }
}

fn with_plane(shape: &[usize], h: usize, w: usize) -> Vec<usize> {
    let mut s = shape[..shape.len() - 2].to_vec();
    s.push(h);
    s.push(w);
    s
}

/// Source coordinate sampled by output index `i` under corner alignment.
pub fn corner_aligned_coord(i: usize, src: usize, dst: usize) -> f64 {
    if dst <= 1 || src <= 1 {
        0.0
    } else {
        i as f64 * (src - 1) as f64 / (dst - 1) as f64
    }
}

fn linear_taps(coord: f64, len: usize) -> [(usize, f64); 2] {
    let lo = (coord.floor() as usize).min(len - 1);
    let hi = (lo + 1).min(len - 1);
    let frac = coord - lo as f64;
    [(lo, 1.0 - frac), (hi, frac)]
}

/// Corner-aligned bilinear resampling of an `h x w` plane to `oh x ow`.
pub fn bilinear_map(h: usize, w: usize, oh: usize, ow: usize) -> Result<LinearMap> {
    if h == 0 || w == 0 || oh == 0 || ow == 0 {
        return Err(Error::invalid(
            "bilinear_resize",
            format!("cannot resize {h}x{w} to {oh}x{ow}"),
        ));
    }
    let mut rows = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        let ys = linear_taps(corner_aligned_coord(i, h, oh), h);
        for j in 0..ow {
            let xs = linear_taps(corner_aligned_coord(j, w, ow), w);
            let mut row: Vec<(usize, f64)> = Vec::with_capacity(4);
            for &(y, wy) in &ys {
                for &(x, wx) in &xs {
                    let weight = wy * wx;
                    if weight == 0.0 {
                        continue;
                    }
                    let idx = y * w + x;
                    match row.iter_mut().find(|(c, _)| *c == idx) {
                        Some(entry) => entry.1 += weight,
                        None => row.push((idx, weight)),
                    }
                }
            }
            rows.push(row);
        }
    }
    LinearMap::from_rows(h * w, rows)
}

pub fn crop_map(h: usize, w: usize, rect: Rect) -> Result<LinearMap> {
    if rect.w == 0 || rect.h == 0 || rect.x + rect.w > w || rect.y + rect.h > h {
        return Err(Error::invalid(
            "crop",
            format!("rectangle {rect:?} is not inside a {h}x{w} plane"),
        ));
    }
    let rows = (0..rect.h)
        .flat_map(|i| (0..rect.w).map(move |j| vec![((rect.y + i) * w + rect.x + j, 1.0)]))
        .collect();
    LinearMap::from_rows(h * w, rows)
}

pub fn hflip_map(h: usize, w: usize) -> Result<LinearMap> {
    let rows = (0..h)
        .flat_map(|i| (0..w).map(move |j| vec![(i * w + (w - 1 - j), 1.0)]))
        .collect();
    LinearMap::from_rows(h * w, rows)
}

fn pool_out(op: &'static str, h: usize, w: usize, window: usize, stride: usize) -> Result<(usize, usize)> {
    if window == 0 || stride == 0 || window > h || window > w {
        return Err(Error::invalid(
            op,
            format!("window {window} with stride {stride} does not fit a {h}x{w} plane"),
        ));
    }
    Ok(((h - window) / stride + 1, (w - window) / stride + 1))
}

pub fn avg_pool_map(h: usize, w: usize, window: usize, stride: usize) -> Result<LinearMap> {
    let (oh, ow) = pool_out("avg_pool2d", h, w, window, stride)?;
    let weight = 1.0 / (window * window) as f64;
    let mut rows = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        for j in 0..ow {
            let mut row = Vec::with_capacity(window * window);
            for di in 0..window {
                for dj in 0..window {
                    row.push(((i * stride + di) * w + j * stride + dj, weight));
                }
            }
            rows.push(row);
        }
    }
    LinearMap::from_rows(h * w, rows)
}

impl<'g> Var<'g> {
    fn plane_op(&self, op: &'static str, map: LinearMap, oh: usize, ow: usize) -> Result<Var<'g>> {
        let shape = with_plane(self.shape(), oh, ow);
        self.apply_map(&Arc::new(map), &shape)
            .map_err(|e| match e {
                Error::InvalidArgument { reason, .. } => Error::InvalidArgument { op, reason },
                other => other,
            })
    }

    pub fn bilinear_resize(&self, out_h: usize, out_w: usize) -> Result<Var<'g>> {
        let (h, w) = plane_dims("bilinear_resize", self.shape())?;
        if (h, w) == (out_h, out_w) {
            return Ok(self.clone());
        }
        self.plane_op("bilinear_resize", bilinear_map(h, w, out_h, out_w)?, out_h, out_w)
    }

    pub fn crop(&self, rect: Rect) -> Result<Var<'g>> {
        let (h, w) = plane_dims("crop", self.shape())?;
        self.plane_op("crop", crop_map(h, w, rect)?, rect.h, rect.w)
    }

    /// Reverses the column order of every plane.
    pub fn hflip(&self) -> Result<Var<'g>> {
        let (h, w) = plane_dims("hflip", self.shape())?;
        self.plane_op("hflip", hflip_map(h, w)?, h, w)
    }

    pub fn avg_pool2d(&self, window: usize, stride: usize) -> Result<Var<'g>> {
        let (h, w) = plane_dims("avg_pool2d", self.shape())?;
        let (oh, ow) = pool_out("avg_pool2d", h, w, window, stride)?;
        self.plane_op("avg_pool2d", avg_pool_map(h, w, window, stride)?, oh, ow)
    }

    /// Max pooling; ties send the gradient to the first maximal element in
    /// raster order.
    pub fn max_pool2d(&self, window: usize, stride: usize) -> Result<Var<'g>> {
        let (h, w) = plane_dims("max_pool2d", self.shape())?;
        let (oh, ow) = pool_out("max_pool2d", h, w, window, stride)?;
        let data = self.value().data();
        let planes = data.len() / (h * w);
        let mut rows = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = (usize::MAX, f64::NEG_INFINITY);
                    for di in 0..window {
                        for dj in 0..window {
                            let idx = base + (i * stride + di) * w + j * stride + dj;
                            if best.0 == usize::MAX || data[idx] > best.1 {
                                best = (idx, data[idx]);
                            }
                        }
                    }
                    rows.push(vec![(best.0, 1.0)]);
                }
            }
        }
        let map = LinearMap::from_rows(data.len(), rows)?;
        self.apply_map(&Arc::new(map), &with_plane(self.shape(), oh, ow))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{Graph, Tensor};

    #[test]
    fn pooling_examples() {
        let g = Graph::new();
        let x = g.param(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        assert_eq!(x.avg_pool2d(2, 2).unwrap().value().data(), &[2.5]);
        let m = x.max_pool2d(2, 2).unwrap();
        assert_eq!(m.value().data(), &[4.0]);
        let grad = m.sum_all().backward(&[&x], false).unwrap();
        assert_eq!(grad[0].value().data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn max_pool_tie_routes_to_first() {
        let g = Graph::new();
        let x = g.param(Tensor::new(vec![1, 1, 2, 2], vec![5.0, 5.0, 1.0, 5.0]).unwrap());
        let grad = x.max_pool2d(2, 2).unwrap().sum_all().backward(&[&x], false).unwrap();
        assert_eq!(grad[0].value().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn bilinear_two_to_three_is_forced() {
        let g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap());
        let y = x.bilinear_resize(3, 3).unwrap();
        assert_eq!(
            y.value().data(),
            &[0.0, 0.5, 1.0, 1.0, 1.5, 2.0, 2.0, 2.5, 3.0]
        );
    }

    #[test]
    fn bilinear_same_size_is_identity() {
        let g = Graph::new();
        let x = g.constant(Tensor::from_fn(vec![1, 5, 7], |i| (i as f64).sin()));
        let map = bilinear_map(5, 7, 5, 7).unwrap();
        let y = x.apply_map(&Arc::new(map), &[1, 5, 7]).unwrap();
        assert!(y.value().max_abs_diff(x.value()).unwrap() <= 1e-12);
    }

    #[test]
    fn bilinear_preserves_corners_when_downsampling() {
        let g = Graph::new();
        let x = g.constant(Tensor::from_fn(vec![4, 6], |i| (i * i) as f64));
        let y = x.bilinear_resize(3, 2).unwrap();
        let d = y.value().data();
        assert_eq!(d[0], 0.0);
        assert_eq!(d[1], 25.0);
        assert_eq!(d[4], 324.0);
        assert_eq!(d[5], 529.0);
        assert!(x.bilinear_resize(0, 3).is_err());
    }

    #[test]
    fn crop_and_flip() {
        let g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        assert_eq!(x.hflip().unwrap().value().data(), &[3.0, 2.0, 1.0]);
        let img = g.constant(Tensor::from_fn(vec![2, 4, 4], |i| i as f64));
        let full = img.crop(Rect { x: 0, y: 0, w: 4, h: 4 }).unwrap();
        assert_eq!(full.value(), img.value());
        let twice = img.hflip().unwrap().hflip().unwrap();
        assert_eq!(twice.value(), img.value());
        let part = img.crop(Rect { x: 1, y: 2, w: 2, h: 1 }).unwrap();
        assert_eq!(part.shape(), &[2, 1, 2]);
        assert_eq!(part.value().data(), &[9.0, 10.0, 25.0, 26.0]);
        assert!(img.crop(Rect { x: 3, y: 0, w: 2, h: 1 }).is_err());
    }
}
