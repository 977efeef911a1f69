//! Random spatial transforms (crop, resize, horizontal flip) that act
//! identically on images and heatmaps.
//!
//! A transform is a fixed linear resampling of the trailing two axes, so the
//! image and heatmap paths share one map: crop, then corner-aligned bilinear
//! resize to `out_size x out_size`, then an optional column reversal.

use std::sync::Arc;

use cgc_autodiff::{bilinear_map, crop_map, hflip_map, LinearMap, Rect, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcam::Heatmap;

/// Smallest crop side, in source pixels.
pub const MIN_CROP: usize = 8;

const RESIZED_CROP_ATTEMPTS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugConfig {
    /// Crop area as a fraction of the source area.
    pub scale_range: [f64; 2],
    /// Crop width over height.
    pub aspect_range: [f64; 2],
    pub flip_prob: f64,
    /// Output side; `None` keeps the source size.
    #[serde(default)]
    pub out_size: Option<usize>,
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig {
            scale_range: [0.6, 1.0],
            aspect_range: [0.75, 4.0 / 3.0],
            flip_prob: 0.5,
            out_size: None,
        }
    }
}

impl AugConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            out.push(format!("aug.scale_range: need 0 < lo <= hi <= 1, got [{lo}, {hi}]"));
        }
        let [alo, ahi] = self.aspect_range;
        if !(alo > 0.0 && alo <= ahi && ahi.is_finite()) {
            out.push(format!("aug.aspect_range: need 0 < lo <= hi, got [{alo}, {ahi}]"));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            out.push(format!("aug.flip_prob: {} is not a probability", self.flip_prob));
        }
        if self.out_size == Some(0) {
            out.push("aug.out_size: must be at least 1".to_string());
        }
        out
    }

    fn accepts(&self, w: usize, h: usize, src_h: usize, src_w: usize) -> bool {
        const TOL: f64 = 1e-12;
        if w < MIN_CROP || h < MIN_CROP || w > src_w || h > src_h {
            return false;
        }
        let scale = (w * h) as f64 / (src_w * src_h) as f64;
        let aspect = w as f64 / h as f64;
        scale >= self.scale_range[0] - TOL
            && scale <= self.scale_range[1] + TOL
            && aspect >= self.aspect_range[0] - TOL
            && aspect <= self.aspect_range[1] + TOL
    }
}

/// One sampled transform.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugParams {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub flip: bool,
    pub out_size: usize,
}

impl AugParams {
    /// The full frame, unflipped, at the source size.
    pub fn identity(size: usize) -> Self {
        AugParams {
            x: 0,
            y: 0,
            w: size,
            h: size,
            flip: false,
            out_size: size,
        }
    }

    pub fn rect(&self) -> Rect {
        Rect {
            x: self.x,
            y: self.y,
            w: self.w,
            h: self.h,
        }
    }

    pub fn check_bounds(&self, src_h: usize, src_w: usize) -> Result<()> {
        if self.w < MIN_CROP.min(src_w)
            || self.h < MIN_CROP.min(src_h)
            || self.x + self.w > src_w
            || self.y + self.h > src_h
            || self.out_size == 0
        {
            return Err(Error::invalid(format!(
                "transform {self:?} does not fit a {src_h}x{src_w} source"
            )));
        }
        Ok(())
    }

    /// The transform as a map from a `src_h x src_w` plane to an
    /// `out_size x out_size` plane.
    pub fn sampling_map(&self, src_h: usize, src_w: usize) -> Result<LinearMap> {
        self.check_bounds(src_h, src_w)?;
        let mut map = crop_map(src_h, src_w, self.rect())?;
        if (self.h, self.w) != (self.out_size, self.out_size) {
            map = map.then(&bilinear_map(self.h, self.w, self.out_size, self.out_size)?)?;
        }
        if self.flip {
            map = map.then(&hflip_map(self.out_size, self.out_size)?)?;
        }
        Ok(map)
    }

    /// Where source pixel `(row, col)` lands in the output, in continuous
    /// output coordinates.
    pub fn forward_coord(&self, row: f64, col: f64) -> (f64, f64) {
        let scale = |len: usize| {
            if len <= 1 || self.out_size <= 1 {
                0.0
            } else {
                (self.out_size - 1) as f64 / (len - 1) as f64
            }
        };
        let r = (row - self.y as f64) * scale(self.h);
        let mut c = (col - self.x as f64) * scale(self.w);
        if self.flip {
            c = (self.out_size - 1) as f64 - c;
        }
        (r, c)
    }
}

/// Random-resized-crop sampling with exact range checks after rounding.
///
/// A few rejection rounds draw `(area, log-aspect)`; if none lands in the
/// feasible set, a crop size is drawn uniformly from the enumerated feasible
/// sizes. Offsets are uniform over valid positions.
pub fn sample_aug<R: Rng + ?Sized>(
    rng: &mut R,
    config: &AugConfig,
    src_h: usize,
    src_w: usize,
) -> Result<AugParams> {
    let problems = config.violations();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    if src_h < MIN_CROP || src_w < MIN_CROP {
        return Err(Error::invalid(format!(
            "source {src_h}x{src_w} is smaller than the minimum crop {MIN_CROP}"
        )));
    }
    let area = (src_h * src_w) as f64;
    let (ln_lo, ln_hi) = (config.aspect_range[0].ln(), config.aspect_range[1].ln());
    let mut size = None;
    for _ in 0..RESIZED_CROP_ATTEMPTS {
        let target = area * uniform(rng, config.scale_range[0], config.scale_range[1]);
        let aspect = uniform(rng, ln_lo, ln_hi).exp();
        let w = (target * aspect).sqrt().round() as usize;
        let h = (target / aspect).sqrt().round() as usize;
        if config.accepts(w, h, src_h, src_w) {
            size = Some((w, h));
            break;
        }
    }
    let (w, h) = match size {
        Some(s) => s,
        None => {
            let feasible: Vec<(usize, usize)> = (MIN_CROP..=src_w)
                .flat_map(|w| (MIN_CROP..=src_h).map(move |h| (w, h)))
                .filter(|&(w, h)| config.accepts(w, h, src_h, src_w))
                .collect();
            if feasible.is_empty() {
                return Err(Error::invalid(format!(
                    "no crop of a {src_h}x{src_w} source satisfies scale {:?} and aspect {:?}",
                    config.scale_range, config.aspect_range
                )));
            }
            feasible[rng.gen_range(0..feasible.len())]
        }
    };
    let x = rng.gen_range(0..=src_w - w);
    let y = rng.gen_range(0..=src_h - h);
    let flip = rng.gen::<f64>() < config.flip_prob;
    Ok(AugParams {
        x,
        y,
        w,
        h,
        flip,
        out_size: config.out_size.unwrap_or(src_h.max(src_w)),
    })
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

fn plane(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [.., h, w] => Ok((*h, *w)),
        _ => Err(Error::invalid(format!("expected at least 2 axes, got {shape:?}"))),
    }
}

fn with_plane(shape: &[usize], side: usize) -> Vec<usize> {
    let mut s = shape[..shape.len() - 2].to_vec();
    s.extend([side, side]);
    s
}

/// Transforms every trailing plane of `image` with the same parameters.
pub fn apply_to_image<'g>(image: &Var<'g>, params: &AugParams) -> Result<Var<'g>> {
    let (h, w) = plane(image.shape())?;
    let map = Arc::new(params.sampling_map(h, w)?);
    Ok(image.apply_map(&map, &with_plane(image.shape(), params.out_size))?)
}

pub fn apply_to_heatmap<'g>(hm: &Heatmap<'g>, params: &AugParams) -> Result<Heatmap<'g>> {
    Ok(Heatmap {
        values: apply_to_image(&hm.values, params)?,
        target_class: hm.target_class,
    })
}

/// Transforms sample `i` of a batch `[N, ...]` with `params[i]`, as a single
/// block-diagonal map.
pub fn apply_batch<'g>(batch: &Var<'g>, params: &[AugParams]) -> Result<Var<'g>> {
    let shape = batch.shape();
    let (h, w) = plane(shape)?;
    if shape.len() < 3 || shape[0] != params.len() {
        return Err(Error::invalid(format!(
            "{} transforms for a batch of shape {shape:?}",
            params.len()
        )));
    }
    let out = params[0].out_size;
    if params.iter().any(|p| p.out_size != out) {
        return Err(Error::invalid("transforms in one batch must share out_size"));
    }
    let planes_per_sample: usize = shape[1..shape.len() - 2].iter().product();
    let maps = params
        .iter()
        .map(|p| p.sampling_map(h, w))
        .collect::<Result<Vec<_>>>()?;
    let blocks: Vec<&LinearMap> = maps
        .iter()
        .flat_map(|m| std::iter::repeat(m).take(planes_per_sample))
        .collect();
    let map = Arc::new(LinearMap::block_diagonal(&blocks)?);
    let flat = batch.reshape(&[batch.value().len()])?;
    Ok(flat.apply_map(&map, &with_plane(shape, out))?)
}
