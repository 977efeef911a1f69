#![allow(dead_code)]

use std::collections::BTreeMap;

use cgc_autodiff::gradcheck::CaseRng;
use cgc_autodiff::Tensor;
use cgc_core::nn::{ModelConfig, Parameters};

pub const CONV_WEIGHTS: [&str; 2] = ["conv0.weight", "conv1.weight"];

/// Two pooled blocks on 8x8 single-channel input, three classes.
pub fn tiny_model(seed: u64) -> (ModelConfig, Parameters) {
    let cfg = ModelConfig::with_channels(1, 8, 3, &[3, 4]);
    let params = Parameters::init(&cfg, seed).unwrap();
    (cfg, params)
}

pub fn random_images(seed: u64, n: usize, channels: usize, size: usize) -> Tensor {
    CaseRng::new(seed).tensor(&[n, channels, size, size], 0.0, 1.0)
}

pub fn with_entry(params: &Parameters, name: &str, index: usize, value: f64) -> Parameters {
    let mut p = params.clone();
    let mut data = p.get(name).unwrap().to_vec();
    data[index] = value;
    let shape = p.get(name).unwrap().shape().to_vec();
    p.set(name, Tensor::new(shape, data).unwrap()).unwrap();
    p
}

/// Central differences of `f` with respect to every entry of the named
/// parameters, with step `h * max(1, |x|)`.
pub fn numeric_param_grads(
    params: &Parameters,
    names: &[&str],
    h: f64,
    f: impl Fn(&Parameters) -> f64,
) -> BTreeMap<String, Tensor> {
    let mut out = BTreeMap::new();
    for &name in names {
        let base = params.get(name).unwrap().clone();
        let grad: Vec<f64> = (0..base.len())
            .map(|i| {
                let x = base.data()[i];
                let step = h * x.abs().max(1.0);
                let plus = f(&with_entry(params, name, i, x + step));
                let minus = f(&with_entry(params, name, i, x - step));
                (plus - minus) / (2.0 * step)
            })
            .collect();
        out.insert(name.to_string(), Tensor::new(base.shape().to_vec(), grad).unwrap());
    }
    out
}

/// Per image, the class whose heatmap has the most mass; panics if every
/// class gives an all-zero map.
pub fn live_targets(cfg: &ModelConfig, params: &Parameters, images: &Tensor) -> Vec<usize> {
    let n = images.shape()[0];
    let mut best = vec![(0usize, 0.0f64); n];
    for k in 0..cfg.num_classes {
        let (maps, _) = cgc_core::gradcam::heatmaps_for(cfg, params, images, Some(&vec![k; n])).unwrap();
        for (i, b) in best.iter_mut().enumerate() {
            let mass = maps.select(i).unwrap().sum();
            if mass > b.1 {
                *b = (k, mass);
            }
        }
    }
    assert!(best.iter().all(|b| b.1 > 0.0), "some image has no live heatmap");
    best.into_iter().map(|b| b.0).collect()
}
