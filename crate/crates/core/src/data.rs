//! Synthetic glyph datasets with ground-truth boxes, labeled/unlabeled
//! splits, and the `CGCD` container format.
//!
//! Each image is a textured noise background with one class glyph drawn at
//! a random position and size. Glyph pixels have intensity 1 and the
//! background stays at or below the noise amplitude.
//!
//! File layout (little-endian): `b"CGCD"`, `u32` version, `u64` header
//! length, the JSON header, then every image as `f32` values in id order.

use std::f64::consts::PI;
use std::path::Path;

use cgc_autodiff::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{BBox, BoxSet};
use crate::rng::{self, Purpose};

pub const MAGIC: &[u8; 4] = b"CGCD";
pub const VERSION: u32 = 1;
/// Glyph margin from the image border, in pixels.
pub const MARGIN: usize = 2;
/// Number of distinct glyph patterns.
pub const NUM_PATTERNS: usize = 12;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    /// `[C, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub label: usize,
    pub boxes: BoxSet,
    pub labeled: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub spec: Option<SynthSpec>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Stacks the images at `indices` into `[n, C, H, W]`.
    pub fn images(&self, indices: &[usize]) -> Result<Tensor> {
        let plane = self.channels * self.height * self.width;
        let mut data = Vec::with_capacity(indices.len() * plane);
        for &i in indices {
            let s = self
                .samples
                .get(i)
                .ok_or_else(|| Error::invalid(format!("sample index {i} out of range")))?;
            data.extend_from_slice(s.image.data());
        }
        Ok(Tensor::new(
            vec![indices.len(), self.channels, self.height, self.width],
            data,
        )?)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    pub fn find(&self, id: u64) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    fn check(&self) -> Result<()> {
        let shape = [self.channels, self.height, self.width];
        for s in &self.samples {
            if s.image.shape() != shape {
                return Err(Error::invalid(format!(
                    "sample {} has shape {:?}, dataset is {shape:?}",
                    s.id,
                    s.image.shape()
                )));
            }
            if s.label >= self.num_classes {
                return Err(Error::invalid(format!("sample {} has label {}", s.id, s.label)));
            }
            s.boxes.check(self.height, self.width)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Background {
    /// Upper bound of background intensity.
    pub noise_amplitude: f64,
    pub texture_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub image_size: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    /// Inclusive range of glyph side lengths.
    pub glyph_size_range: [usize; 2],
    pub background: Background,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_classes: 8,
            image_size: 64,
            train_per_class: 200,
            val_per_class: 50,
            glyph_size_range: [14, 24],
            background: Background {
                noise_amplitude: 0.5,
                texture_seed: 17,
            },
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(2..=NUM_PATTERNS).contains(&self.num_classes) {
            out.push(format!(
                "data.num_classes: {} is outside 2..={NUM_PATTERNS}",
                self.num_classes
            ));
        }
        let [lo, hi] = self.glyph_size_range;
        if lo < 4 || lo > hi {
            out.push(format!("data.glyph_size_range: need 4 <= lo <= hi, got [{lo}, {hi}]"));
        }
        if hi + 2 * MARGIN > self.image_size {
            out.push(format!(
                "data.glyph_size_range: glyphs of {hi} px do not fit a {} px image with a {MARGIN} px margin",
                self.image_size
            ));
        }
        let amp = self.background.noise_amplitude;
        if !(0.0..1.0).contains(&amp) {
            out.push(format!("data.background.noise_amplitude: {amp} is outside [0, 1)"));
        }
        if self.train_per_class == 0 {
            out.push("data.train_per_class: must be at least 1".to_string());
        }
        out
    }
}

/// Whether pixel `(r, c)` of a `size x size` glyph of `class` is set.
pub fn glyph_pixel(class: usize, size: usize, r: usize, c: usize) -> bool {
    let s = size as isize;
    let (r, c) = (r as isize, c as isize);
    let t = (s / 5).max(1);
    let mid = (s - 1) as f64 / 2.0;
    let (dr, dc) = (r as f64 - mid, c as f64 - mid);
    let radius = s as f64 / 2.0;
    let dist = (dr * dr + dc * dc).sqrt();
    let half = t as f64 / 2.0;
    match class {
        0 => true,
        1 => r < t || c < t || r >= s - t || c >= s - t,
        2 => dr.abs() <= half || dc.abs() <= half,
        3 => (r - c).abs() <= t / 2 || (r + c - (s - 1)).abs() <= t / 2,
        4 => (r / t) % 2 == 0,
        5 => (c / t) % 2 == 0,
        6 => {
            let cell = (s / 4).max(1);
            (r / cell + c / cell) % 2 == 0
        }
        7 => dist <= radius,
        8 => c <= r,
        9 => dr.abs() + dc.abs() <= radius,
        10 => dist <= radius && dist >= radius - t as f64 - 0.5,
        11 => r < t || dc.abs() <= half,
        _ => false,
    }
}

fn render_sample(spec: &SynthSpec, id: u64, label: usize) -> Sample {
    let n = spec.image_size;
    let amp = spec.background.noise_amplitude;
    let mut tex = rng::stream(spec.background.texture_seed, Purpose::Data, 1, id);
    let fx = tex.gen_range(0.05..0.35) * 2.0 * PI;
    let fy = tex.gen_range(0.05..0.35) * 2.0 * PI;
    let phase = tex.gen_range(0.0..2.0 * PI);
    let mut img: Vec<f64> = (0..n * n)
        .map(|i| {
            let (r, c) = ((i / n) as f64, (i % n) as f64);
            let wave = 0.5 + 0.5 * (fx * c + fy * r + phase).sin();
            let v = amp * (0.5 * wave + 0.5 * tex.gen::<f64>());
            v.clamp(0.0, amp)
        })
        .collect();

    let mut glyph = rng::stream(spec.seed, Purpose::Data, 2, id);
    let [lo, hi] = spec.glyph_size_range;
    let size = glyph.gen_range(lo..=hi);
    let y = glyph.gen_range(MARGIN..=n - MARGIN - size);
    let x = glyph.gen_range(MARGIN..=n - MARGIN - size);
    let (mut y0, mut x0, mut y1, mut x1) = (usize::MAX, usize::MAX, 0, 0);
    for r in 0..size {
        for c in 0..size {
            if glyph_pixel(label, size, r, c) {
                img[(y + r) * n + x + c] = 1.0;
                y0 = y0.min(y + r);
                x0 = x0.min(x + c);
                y1 = y1.max(y + r + 1);
                x1 = x1.max(x + c + 1);
            }
        }
    }
    let image = Tensor::new(vec![1, n, n], img.into_iter().map(|v| v as f32 as f64).collect())
        .expect("image shape matches its data");
    Sample {
        id,
        image,
        label,
        boxes: BoxSet(vec![BBox { x0, y0, x1, y1 }]),
        labeled: true,
    }
}

/// Class-balanced train and validation sets; labels cycle through the
/// classes in id order.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<(Dataset, Dataset)> {
    let problems = spec.violations();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let k = spec.num_classes;
    let make = |first: u64, count: usize| Dataset {
        num_classes: k,
        channels: 1,
        height: spec.image_size,
        width: spec.image_size,
        spec: Some(spec.clone()),
        samples: (0..count)
            .map(|j| render_sample(spec, first + j as u64, j % k))
            .collect(),
    };
    let n_train = k * spec.train_per_class;
    let train = make(0, n_train);
    let val = make(n_train as u64, k * spec.val_per_class);
    Ok((train, val))
}

/// Flags exactly `round(fraction * n)` samples as labeled, allotted to
/// classes in proportion to their size (largest remainder) and chosen
/// uniformly within each class.
pub fn split_labeled(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("label fraction {fraction} is outside (0, 1]")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for (i, s) in dataset.samples.iter().enumerate() {
        by_class[s.label].push(i);
    }
    let total = (fraction * dataset.len() as f64).round() as usize;
    let quotas: Vec<f64> = by_class.iter().map(|c| fraction * c.len() as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut leftover = total.saturating_sub(counts.iter().sum());
    let mut order: Vec<usize> = (0..dataset.num_classes).collect();
    order.shuffle(&mut rng::stream(seed, Purpose::Split, 0, 0));
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa)
    });
    for &c in &order {
        if leftover == 0 {
            break;
        }
        if counts[c] < by_class[c].len() {
            counts[c] += 1;
            leftover -= 1;
        }
    }
    if let Some(c) = (0..dataset.num_classes).find(|&c| !by_class[c].is_empty() && counts[c] == 0) {
        return Err(Error::invalid(format!(
            "label fraction {fraction} leaves class {c} without labeled samples"
        )));
    }
    let mut out = dataset.clone();
    for s in &mut out.samples {
        s.labeled = false;
    }
    for (c, members) in by_class.iter_mut().enumerate() {
        members.shuffle(&mut rng::stream(seed, Purpose::Split, 1, c as u64));
        for &i in &members[..counts[c]] {
            out.samples[i].labeled = true;
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct HeaderSample {
    id: u64,
    label: usize,
    boxes: BoxSet,
    labeled: bool,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: Option<SynthSpec>,
    num_classes: usize,
    channels: usize,
    height: usize,
    width: usize,
    count: usize,
    samples: Vec<HeaderSample>,
}

/// Serializes `dataset` with samples in id order.
pub fn encode_dataset(dataset: &Dataset) -> Result<Vec<u8>> {
    dataset.check()?;
    let mut order: Vec<&Sample> = dataset.samples.iter().collect();
    order.sort_by_key(|s| s.id);
    if order.windows(2).any(|w| w[0].id == w[1].id) {
        return Err(Error::invalid("sample ids must be unique"));
    }
    let plane = (dataset.channels * dataset.height * dataset.width * 4) as u64;
    let header = Header {
        spec: dataset.spec.clone(),
        num_classes: dataset.num_classes,
        channels: dataset.channels,
        height: dataset.height,
        width: dataset.width,
        count: order.len(),
        samples: order
            .iter()
            .enumerate()
            .map(|(i, s)| HeaderSample {
                id: s.id,
                label: s.label,
                boxes: s.boxes.clone(),
                labeled: s.labeled,
                offset: i as u64 * plane,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + order.len() * plane as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for s in order {
        for &v in s.image.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

fn format_err(offset: usize, reason: impl Into<String>) -> Error {
    Error::Format {
        file: "dataset",
        offset: offset as u64,
        reason: reason.into(),
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(format_err(0, "missing CGCD magic"));
    }
    if bytes.len() < 16 {
        return Err(format_err(bytes.len(), "file ends inside the fixed header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let payload_start = 16usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| format_err(8, format!("header length {header_len} exceeds the file")))?;
    let header: Header = serde_json::from_slice(&bytes[16..payload_start])
        .map_err(|e| format_err(16, format!("bad header: {e}")))?;
    if header.count != header.samples.len() {
        return Err(format_err(16, "sample count disagrees with the sample table"));
    }
    let plane = header.channels * header.height * header.width;
    let payload = &bytes[payload_start..];
    let expected = header.count * plane * 4;
    if payload.len() != expected {
        return Err(format_err(
            payload_start,
            format!("payload has {} bytes, header implies {expected}", payload.len()),
        ));
    }
    let mut samples = Vec::with_capacity(header.count);
    for hs in header.samples {
        let start = hs.offset as usize;
        let end = start + plane * 4;
        if end > payload.len() {
            return Err(format_err(payload_start + start, format!("sample {} overruns the payload", hs.id)));
        }
        let data = payload[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        samples.push(Sample {
            id: hs.id,
            image: Tensor::new(vec![header.channels, header.height, header.width], data)?,
            label: hs.label,
            boxes: hs.boxes,
            labeled: hs.labeled,
        });
    }
    let ds = Dataset {
        num_classes: header.num_classes,
        channels: header.channels,
        height: header.height,
        width: header.width,
        spec: header.spec,
        samples,
    };
    ds.check()?;
    Ok(ds)
}

pub fn save_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    std::fs::write(path, encode_dataset(dataset)?).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Classifies by thresholding out the background and matching every glyph
/// template, pixel by pixel, on the square spanned by the detected pixels.
pub fn template_match(sample: &Sample, num_classes: usize, threshold: f64) -> usize {
    let (h, w) = (sample.image.shape()[1], sample.image.shape()[2]);
    let on: Vec<bool> = sample.image.data()[..h * w].iter().map(|&v| v > threshold).collect();
    let (mut y0, mut x0, mut y1, mut x1) = (h, w, 0, 0);
    for (i, _) in on.iter().enumerate().filter(|(_, &b)| b) {
        y0 = y0.min(i / w);
        x0 = x0.min(i % w);
        y1 = y1.max(i / w + 1);
        x1 = x1.max(i % w + 1);
    }
    if y1 == 0 {
        return 0;
    }
    let size = (y1 - y0).max(x1 - x0);
    let score = |class: usize| -> usize {
        (0..size * size)
            .filter(|&i| {
                let (r, c) = (y0 + i / size, x0 + i % size);
                let seen = r < h && c < w && on[r * w + c];
                glyph_pixel(class, size, i / size, i % size) == seen
            })
            .count()
    };
    let mut best = 0;
    let mut best_score = score(0);
    for class in 1..num_classes {
        let s = score(class);
        if s > best_score {
            best = class;
            best_score = s;
        }
    }
    best
}
