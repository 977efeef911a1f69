//! Explanation and accuracy metrics, and the report they are collected in.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use cgc_autodiff::{Graph, Tensor};
use serde::{Deserialize, Serialize};

use crate::augment::{apply_batch, sample_aug, AugConfig, AugParams};
use crate::cgcloss::{cgc_query_losses, CgcBatch};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gradcam::heatmaps_for;
use crate::nn::{argmax_row, predictions, Classifier, Model};
use crate::rng::{self, Purpose};

/// Batch size of the held-out consistency loss.
pub const EVAL_LOSS_BATCH: usize = 32;

/// Axis-aligned box; columns `x0..x1`, rows `y0..y1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.y0..self.y1).contains(&row) && (self.x0..self.x1).contains(&col)
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BoxSet(pub Vec<BBox>);

impl BoxSet {
    pub fn check(&self, h: usize, w: usize) -> Result<()> {
        for b in &self.0 {
            if b.x0 >= b.x1 || b.y0 >= b.y1 || b.x1 > w || b.y1 > h {
                return Err(Error::invalid(format!("box {b:?} is empty or outside {h}x{w}")));
            }
        }
        Ok(())
    }

    /// Row-major mask of pixels covered by at least one box.
    pub fn union_mask(&self, h: usize, w: usize) -> Result<Vec<bool>> {
        self.check(h, w)?;
        let mut mask = vec![false; h * w];
        for b in &self.0 {
            for r in b.y0..b.y1 {
                mask[r * w + b.x0..r * w + b.x1].fill(true);
            }
        }
        Ok(mask)
    }
}

fn plane_dims(hm: &Tensor) -> Result<(usize, usize)> {
    match hm.shape() {
        [h, w] => Ok((*h, *w)),
        s => Err(Error::invalid(format!("heatmap must be [H, W], got {s:?}"))),
    }
}

/// Fraction of heatmap mass inside the union of `boxes`; `None` when the
/// heatmap has no mass.
pub fn content_heatmap(hm: &Tensor, boxes: &BoxSet) -> Result<Option<f64>> {
    let (h, w) = plane_dims(hm)?;
    let mask = boxes.union_mask(h, w)?;
    let total = hm.sum();
    if !(total > 0.0) {
        return Ok(None);
    }
    let inside: f64 = hm
        .data()
        .iter()
        .zip(&mask)
        .filter(|(_, &m)| m)
        .map(|(v, _)| v)
        .sum();
    Ok(Some(inside / total))
}

/// Shannon entropy (nats) of the ℓ1-normalized heatmap; `None` when the
/// heatmap has no mass.
pub fn heatmap_entropy(hm: &Tensor) -> Result<Option<f64>> {
    plane_dims(hm)?;
    let total = hm.sum();
    if !(total > 0.0) {
        return Ok(None);
    }
    Ok(Some(
        -hm.data()
            .iter()
            .filter(|&&v| v > 0.0)
            .map(|&v| {
                let p = v / total;
                p * p.ln()
            })
            .sum::<f64>(),
    ))
}

/// `max(1, pixels / 64)`.
pub fn default_insertion_step(pixels: usize) -> usize {
    (pixels / 64).max(1)
}

fn softmax_at(row: &[f64], t: usize) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
    (row[t] - m).exp() / z
}

const INSERTION_CHUNK: usize = 16;

/// Probabilities of the original top class as pixels are revealed on an
/// all-zero canvas in descending heatmap order, `step_pixels` at a time.
/// Ties keep raster order; the last entry is the full image.
pub fn insertion_curve(
    model: &impl Classifier,
    image: &Tensor,
    hm: &Tensor,
    step_pixels: usize,
) -> Result<Vec<f64>> {
    let (c, h, w) = match image.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::invalid(format!("image must be [C, H, W], got {s:?}"))),
    };
    if plane_dims(hm)? != (h, w) {
        return Err(Error::invalid(format!(
            "heatmap {:?} does not match image {:?}",
            hm.shape(),
            image.shape()
        )));
    }
    if step_pixels == 0 {
        return Err(Error::invalid("step_pixels must be at least 1"));
    }
    let pixels = h * w;
    let full = image.reshape(vec![1, c, h, w])?;
    let full_logits = model.logits(&full)?;
    let k = full_logits.len();
    let target = argmax_row(full_logits.data());

    let mut order: Vec<usize> = (0..pixels).collect();
    let v = hm.data();
    order.sort_by(|&a, &b| v[b].total_cmp(&v[a]));

    let steps = pixels.div_ceil(step_pixels);
    let src = image.data();
    let mut canvas = vec![0.0; c * pixels];
    let mut revealed = 0;
    let mut probs = Vec::with_capacity(steps);
    let mut step = 0;
    while step < steps {
        let chunk = INSERTION_CHUNK.min(steps - step);
        let mut batch = Vec::with_capacity(chunk * c * pixels);
        for _ in 0..chunk {
            let upto = ((step + 1) * step_pixels).min(pixels);
            for &p in &order[revealed..upto] {
                for ch in 0..c {
                    canvas[ch * pixels + p] = src[ch * pixels + p];
                }
            }
            revealed = upto;
            batch.extend_from_slice(&canvas);
            step += 1;
        }
        let logits = model.logits(&Tensor::new(vec![chunk, c, h, w], batch)?)?;
        probs.extend(logits.data().chunks(k).map(|row| softmax_at(row, target)));
    }
    Ok(probs)
}

/// Mean of [`insertion_curve`].
pub fn insertion_auc(
    model: &impl Classifier,
    image: &Tensor,
    hm: &Tensor,
    step_pixels: usize,
) -> Result<f64> {
    let curve = insertion_curve(model, image, hm, step_pixels)?;
    Ok(curve.iter().sum::<f64>() / curve.len() as f64)
}

/// Top-1 accuracy.
pub fn accuracy(model: &impl Classifier, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::invalid("accuracy of an empty dataset is undefined"));
    }
    let mut correct = 0usize;
    for chunk in (0..dataset.len()).collect::<Vec<_>>().chunks(64) {
        let logits = model.logits(&dataset.images(chunk)?)?;
        correct += predictions(&logits)
            .iter()
            .zip(chunk)
            .filter(|(p, &i)| **p == dataset.samples[i].label)
            .count();
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Transform for sample `id` in held-out loss evaluation.
pub fn eval_transform(aug: &AugConfig, seed: u64, id: u64, size: usize) -> Result<AugParams> {
    let cfg = AugConfig {
        out_size: Some(size),
        ..*aug
    };
    sample_aug(&mut rng::stream(seed, Purpose::EvalAugment, id, 0), &cfg, size, size)
}

/// Mean per-query consistency loss over consecutive batches of
/// [`EVAL_LOSS_BATCH`]; a trailing partial batch is skipped.
pub fn eval_cgc_loss(
    model: &Model,
    dataset: &Dataset,
    aug: &AugConfig,
    temperature: f64,
    seed: u64,
) -> Result<f64> {
    if dataset.len() < EVAL_LOSS_BATCH {
        return Err(Error::invalid(format!(
            "held-out loss needs at least {EVAL_LOSS_BATCH} samples, got {}",
            dataset.len()
        )));
    }
    let size = model.config.input_size;
    let mut total = 0.0;
    let mut queries = 0usize;
    let idx: Vec<usize> = (0..dataset.len()).collect();
    for chunk in idx.chunks_exact(EVAL_LOSS_BATCH) {
        let images = dataset.images(chunk)?;
        let transforms = chunk
            .iter()
            .map(|&i| eval_transform(aug, seed, dataset.samples[i].id, size))
            .collect::<Result<Vec<_>>>()?;
        let (original, targets) = heatmaps_for(&model.config, &model.params, &images, None)?;
        let g = Graph::new();
        let augmented = apply_batch(&g.constant(images), &transforms)?.into_value();
        let (candidates, _) =
            heatmaps_for(&model.config, &model.params, &augmented, Some(&targets))?;
        let anchors = apply_batch(&g.constant(original), &transforms)?;
        let batch = CgcBatch::new(anchors, g.constant(candidates), temperature)?;
        total += cgc_query_losses(&batch)?.value().sum();
        queries += chunk.len();
    }
    Ok(total / queries as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    /// `None` when no sample has a defined value.
    pub mean: Option<f64>,
    pub std: Option<f64>,
    /// Samples with a defined value.
    pub n: usize,
    /// Samples whose value was undefined and excluded.
    pub undefined: usize,
}

impl MetricSummary {
    /// Mean and population standard deviation of the defined values.
    pub fn of(values: &[Option<f64>]) -> Self {
        let defined: Vec<f64> = values.iter().flatten().copied().collect();
        let n = defined.len();
        let (mean, std) = if n == 0 {
            (None, None)
        } else {
            let mean = defined.iter().sum::<f64>() / n as f64;
            let var = defined.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            (Some(mean), Some(var.sqrt()))
        };
        MetricSummary {
            mean,
            std,
            n,
            undefined: values.len() - n,
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        MetricSummary {
            mean: self.mean.map(|m| m * factor),
            std: self.std.map(|s| s * factor),
            ..*self
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub sample_id: u64,
    pub metric: String,
    /// `None` when undefined for this sample.
    pub value: Option<f64>,
    #[serde(default)]
    pub flags: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_fingerprint: String,
    pub seed: u64,
    pub summaries: BTreeMap<String, MetricSummary>,
    /// Whole-set metrics without per-sample values.
    pub aggregates: BTreeMap<String, f64>,
    pub rows: Vec<SampleRow>,
}

impl MetricsReport {
    pub fn summary(&self, metric: &str) -> Option<&MetricSummary> {
        self.summaries.get(metric)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// `sample_id,metric,value,flags`; undefined values are empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample_id,metric,value,flags\n");
        for r in &self.rows {
            let value = r.value.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{}", r.sample_id, r.metric, value, r.flags);
        }
        out
    }

    pub fn rows_from_csv(text: &str) -> Result<Vec<SampleRow>> {
        let mut lines = text.lines();
        if lines.next() != Some("sample_id,metric,value,flags") {
            return Err(Error::invalid("unexpected CSV header"));
        }
        lines
            .map(|line| {
                let f: Vec<&str> = line.splitn(4, ',').collect();
                if f.len() != 4 {
                    return Err(Error::invalid(format!("malformed CSV row {line:?}")));
                }
                let bad = |_| Error::invalid(format!("malformed CSV row {line:?}"));
                Ok(SampleRow {
                    sample_id: f[0].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                    metric: f[1].to_string(),
                    value: if f[2].is_empty() {
                        None
                    } else {
                        Some(f[2].parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?)
                    },
                    flags: f[3].to_string(),
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bbox(x0: usize, y0: usize, x1: usize, y1: usize) -> BBox {
        BBox { x0, y0, x1, y1 }
    }

    #[test]
    fn uniform_heatmap_gives_area_fraction() {
        let hm = Tensor::ones(vec![10, 10]);
        let ch = content_heatmap(&hm, &BoxSet(vec![bbox(2, 3, 7, 8)])).unwrap();
        assert_eq!(ch, Some(0.25));
    }

    #[test]
    fn mass_inside_box_gives_one() {
        let mut v = vec![0.0; 100];
        v[3 * 10 + 4] = 2.0;
        v[5 * 10 + 6] = 0.5;
        let ch = content_heatmap(&Tensor::new(vec![10, 10], v).unwrap(), &BoxSet(vec![bbox(4, 3, 7, 6)]));
        assert_eq!(ch.unwrap(), Some(1.0));
    }

    #[test]
    fn overlapping_boxes_count_once() {
        let hm = Tensor::ones(vec![4, 4]);
        let boxes = BoxSet(vec![bbox(0, 0, 2, 2), bbox(1, 1, 3, 3)]);
        assert_eq!(content_heatmap(&hm, &boxes).unwrap(), Some(7.0 / 16.0));
    }

    #[test]
    fn zero_heatmap_is_undefined() {
        let hm = Tensor::zeros(vec![4, 4]);
        assert_eq!(content_heatmap(&hm, &BoxSet(vec![bbox(0, 0, 1, 1)])).unwrap(), None);
        assert_eq!(heatmap_entropy(&hm).unwrap(), None);
        assert!(content_heatmap(&Tensor::ones(vec![4, 4]), &BoxSet(vec![bbox(0, 0, 5, 1)])).is_err());
    }

    #[test]
    fn entropy_extremes() {
        let mut v = vec![0.0; 12];
        v[7] = 3.0;
        assert_eq!(heatmap_entropy(&Tensor::new(vec![3, 4], v).unwrap()).unwrap(), Some(0.0));
        let e = heatmap_entropy(&Tensor::full(vec![3, 4], 0.2)).unwrap().unwrap();
        assert!((e - 12f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn summary_excludes_undefined() {
        let s = MetricSummary::of(&[Some(1.0), None, Some(3.0)]);
        assert_eq!((s.mean, s.std, s.n, s.undefined), (Some(2.0), Some(1.0), 2, 1));
        assert_eq!(MetricSummary::of(&[None]).mean, None);
    }

    #[test]
    fn csv_round_trip() {
        let report = MetricsReport {
            rows: vec![
                SampleRow { sample_id: 3, metric: "ch".into(), value: Some(0.125), flags: String::new() },
                SampleRow { sample_id: 4, metric: "ch".into(), value: None, flags: "undefined".into() },
            ],
            ..Default::default()
        };
        assert_eq!(MetricsReport::rows_from_csv(&report.to_csv()).unwrap(), report.rows);
    }
}
