//! Heatmap export as 8-bit binary PGM with a JSON sidecar.

use std::path::{Path, PathBuf};

use cgc_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gradcam::{heatmaps_for, top_class};
use crate::nn::Model;

/// Raw value range of an exported heatmap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSidecar {
    pub sample_id: u64,
    pub label: usize,
    pub target_class: usize,
    pub min: f64,
    pub max: f64,
}

/// Min-max scales a plane to `0..=255`; a constant plane maps to zeros.
pub fn to_gray(values: &[f64]) -> (Vec<u8>, f64, f64) {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let bytes = values
        .iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - min) / span * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect();
    (bytes, min, max)
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Parses a binary PGM with maxval 255 into `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |offset: usize, reason: &str| Error::Format {
        file: "pgm",
        offset: offset as u64,
        reason: reason.to_string(),
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad(pos, "header ended early"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad(start, "bad header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad(0, "not a binary PGM"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad(0, "bad header number"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(bad(0, "only 8-bit PGM is supported"));
    }
    let data = &bytes[pos + 1..];
    if data.len() != w * h {
        return Err(bad(pos + 1, "pixel data length does not match the header"));
    }
    Ok((w, h, data.to_vec()))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `sample_<id>_{image,heatmap,overlay}.pgm` and
/// `sample_<id>_heatmap.json` for every requested id; the heatmap targets
/// the predicted class. Returns the written paths.
pub fn export_heatmaps(
    model: &Model,
    dataset: &Dataset,
    ids: &[u64],
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w) = (dataset.height, dataset.width);
    let mut written = Vec::new();
    for &id in ids {
        let sample = dataset
            .find(id)
            .ok_or_else(|| Error::invalid(format!("no sample with id {id}")))?;
        let target = top_class(model, &sample.image)?;
        let batch = sample.image.reshape(vec![1, dataset.channels, h, w])?;
        let (maps, _) = heatmaps_for(&model.config, &model.params, &batch, Some(&[target]))?;
        let hm: Tensor = maps.select(0)?;
        let (heat, min, max) = to_gray(hm.data());
        let first_channel = &sample.image.data()[..h * w];
        let image: Vec<u8> = first_channel
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let overlay: Vec<u8> = image
            .iter()
            .zip(&heat)
            .map(|(&a, &b)| ((a as u16 + b as u16) / 2) as u8)
            .collect();
        let stem = format!("sample_{id}");
        for (suffix, px) in [("image", &image), ("heatmap", &heat), ("overlay", &overlay)] {
            let path = dir.join(format!("{stem}_{suffix}.pgm"));
            write(&path, &encode_pgm(w, h, px))?;
            written.push(path);
        }
        let sidecar = HeatmapSidecar {
            sample_id: id,
            label: sample.label,
            target_class: target,
            min,
            max,
        };
        let path = dir.join(format!("{stem}_heatmap.json"));
        write(&path, serde_json::to_string_pretty(&sidecar)?.as_bytes())?;
        written.push(path);
    }
    Ok(written)
}
