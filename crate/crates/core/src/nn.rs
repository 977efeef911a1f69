//! A small convolutional classifier, masked cross-entropy and SGD with
//! momentum.
//!
//! Each block is `conv (zero padding kernel/2) -> bias -> relu -> optional
//! pool`; the head is global average pooling followed by a linear layer.

use std::collections::BTreeMap;

use cgc_autodiff::{Graph, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Avg,
    Max,
}

/// Non-overlapping pooling (stride equals window).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pool {
    pub kind: PoolKind,
    pub window: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub out_channels: usize,
    pub kernel: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub pool: Option<Pool>,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub input_size: usize,
    pub conv_blocks: Vec<ConvBlock>,
    pub num_classes: usize,
    /// Block whose post-relu, pre-pool output is the Grad-CAM target.
    pub gradcam_layer: usize,
}

impl ModelConfig {
    /// Three 3x3 blocks of 16, 32 and 64 channels, each followed by 2x2
    /// average pooling, with Grad-CAM on the last block.
    pub fn desk_default(input_channels: usize, input_size: usize, num_classes: usize) -> Self {
        Self::with_channels(input_channels, input_size, num_classes, &[16, 32, 64])
    }

    pub fn with_channels(
        input_channels: usize,
        input_size: usize,
        num_classes: usize,
        channels: &[usize],
    ) -> Self {
        let conv_blocks = channels
            .iter()
            .map(|&c| ConvBlock {
                out_channels: c,
                kernel: 3,
                stride: 1,
                pool: Some(Pool {
                    kind: PoolKind::Avg,
                    window: 2,
                }),
            })
            .collect();
        ModelConfig {
            input_channels,
            input_size,
            conv_blocks,
            num_classes,
            gradcam_layer: channels.len().saturating_sub(1),
        }
    }

    /// Every violated constraint, as `field: reason` strings.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.input_channels == 0 {
            out.push("model.input_channels: must be at least 1".to_string());
        }
        if self.input_size == 0 {
            out.push("model.input_size: must be at least 1".to_string());
        }
        if self.num_classes < 2 {
            out.push("model.num_classes: must be at least 2".to_string());
        }
        if self.conv_blocks.is_empty() {
            out.push("model.conv_blocks: at least one block is required".to_string());
        } else if self.gradcam_layer >= self.conv_blocks.len() {
            out.push(format!(
                "model.gradcam_layer: {} is not below the block count {}",
                self.gradcam_layer,
                self.conv_blocks.len()
            ));
        }
        let mut size = self.input_size;
        for (i, b) in self.conv_blocks.iter().enumerate() {
            if b.out_channels == 0 {
                out.push(format!("model.conv_blocks[{i}].out_channels: must be at least 1"));
            }
            if b.kernel == 0 || b.stride == 0 {
                out.push(format!("model.conv_blocks[{i}]: kernel and stride must be at least 1"));
                return out;
            }
            if let Some(p) = b.pool {
                if p.window == 0 {
                    out.push(format!("model.conv_blocks[{i}].pool.window: must be at least 1"));
                    return out;
                }
            }
            match block_out(size, b) {
                Some(s) => size = s,
                None => {
                    out.push(format!(
                        "model.conv_blocks[{i}]: spatial size {size} is too small for this block"
                    ));
                    return out;
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    /// Channels and spatial size of the Grad-CAM target activations.
    pub fn gradcam_output(&self) -> (usize, usize) {
        let mut size = self.input_size;
        for b in &self.conv_blocks[..self.gradcam_layer] {
            size = block_out(size, b).unwrap_or(0);
        }
        let b = &self.conv_blocks[self.gradcam_layer];
        (b.out_channels, conv_out(size, b).unwrap_or(0))
    }

    /// Parameter names and shapes in initialization order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut c = self.input_channels;
        for (i, b) in self.conv_blocks.iter().enumerate() {
            out.push((format!("conv{i}.weight"), vec![b.out_channels, c, b.kernel, b.kernel]));
            out.push((format!("conv{i}.bias"), vec![b.out_channels]));
            c = b.out_channels;
        }
        out.push(("fc.weight".to_string(), vec![self.num_classes, c]));
        out.push(("fc.bias".to_string(), vec![self.num_classes]));
        out
    }
}

fn conv_out(size: usize, b: &ConvBlock) -> Option<usize> {
    let padded = size + 2 * (b.kernel / 2);
    (padded >= b.kernel).then(|| (padded - b.kernel) / b.stride + 1)
}

fn block_out(size: usize, b: &ConvBlock) -> Option<usize> {
    let s = conv_out(size, b)?;
    match b.pool {
        Some(p) if s < p.window => None,
        Some(p) => Some((s - p.window) / p.window + 1),
        None => Some(s),
    }
}

/// Named parameter tensors, each with a momentum buffer of the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    values: BTreeMap<String, Tensor>,
    momentum: BTreeMap<String, Tensor>,
}

impl Parameters {
    /// Convolution kernels uniform in `±sqrt(6/fan_in)`, the classifier
    /// weight uniform in `±sqrt(1/fan_in)`, biases zero; rounded to `f32`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, Purpose::Init, 0, 0);
        let mut values = BTreeMap::new();
        for (name, shape) in config.parameter_shapes() {
            let t = if shape.len() == 1 {
                Tensor::zeros(shape)
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let gain = if name.starts_with("conv") { 6.0 } else { 1.0 };
                let bound = (gain / fan_in as f64).sqrt();
                Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound) as f32 as f64)
            };
            values.insert(name, t);
        }
        Ok(Self::from_values(values))
    }

    /// Wraps values with zero momentum buffers.
    pub fn from_values(values: BTreeMap<String, Tensor>) -> Self {
        let momentum = values
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec())))
            .collect();
        Parameters { values, momentum }
    }

    pub fn from_parts(
        values: BTreeMap<String, Tensor>,
        momentum: BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        if values.len() != momentum.len() {
            return Err(Error::invalid("every parameter needs exactly one momentum buffer"));
        }
        for (k, v) in &values {
            match momentum.get(k) {
                Some(m) if m.shape() == v.shape() => {}
                Some(m) => {
                    return Err(Error::invalid(format!(
                        "momentum for {k} has shape {:?}, parameter has {:?}",
                        m.shape(),
                        v.shape()
                    )))
                }
                None => return Err(Error::invalid(format!("missing momentum buffer for {k}"))),
            }
        }
        Ok(Parameters { values, momentum })
    }

    /// Checks names and shapes against a model configuration.
    pub fn check_matches(&self, config: &ModelConfig) -> Result<()> {
        let expected = config.parameter_shapes();
        if expected.len() != self.values.len() {
            return Err(Error::invalid(format!(
                "model needs {} parameters, found {}",
                expected.len(),
                self.values.len()
            )));
        }
        for (name, shape) in expected {
            match self.values.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::invalid(format!(
                        "parameter {name} has shape {:?}, model needs {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::invalid(format!("missing parameter {name}"))),
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.values.get(name)
    }

    pub fn values(&self) -> &BTreeMap<String, Tensor> {
        &self.values
    }

    pub fn momentum(&self) -> &BTreeMap<String, Tensor> {
        &self.momentum
    }

    /// Replaces one parameter value; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .values
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::invalid(format!(
                "parameter {name} has shape {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    /// Registers every parameter as a differentiable leaf of `graph`.
    pub fn bind<'g>(&self, graph: &'g Graph) -> ParamVars<'g> {
        ParamVars {
            vars: self
                .values
                .iter()
                .map(|(k, v)| (k.clone(), graph.param(v.clone())))
                .collect(),
        }
    }

    /// Binds parameters as constants, for inference without a tape.
    pub fn bind_constant<'g>(&self, graph: &'g Graph) -> ParamVars<'g> {
        ParamVars {
            vars: self
                .values
                .iter()
                .map(|(k, v)| (k.clone(), graph.constant(v.clone())))
                .collect(),
        }
    }

    /// Rounds values and momentum to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for t in self.values.values_mut().chain(self.momentum.values_mut()) {
            *t = t.map(|x| x as f32 as f64);
        }
    }
}

/// Parameters bound to one graph.
#[derive(Clone, Debug)]
pub struct ParamVars<'g> {
    vars: BTreeMap<String, Var<'g>>,
}

impl<'g> ParamVars<'g> {
    pub fn get(&self, name: &str) -> Result<&Var<'g>> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var<'g>)> {
        self.vars.iter()
    }

    /// Gradients of a scalar loss with respect to every parameter.
    pub fn gradients(&self, loss: &Var<'g>) -> Result<BTreeMap<String, Tensor>> {
        let refs: Vec<&Var<'g>> = self.vars.values().collect();
        let grads = loss.backward(&refs, false)?;
        Ok(self
            .vars
            .keys()
            .cloned()
            .zip(grads.into_iter().map(Var::into_value))
            .collect())
    }
}

/// Logits and the Grad-CAM target activations of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward<'g> {
    pub logits: Var<'g>,
    pub activations: Var<'g>,
}

pub fn forward_with_activations<'g>(
    config: &ModelConfig,
    params: &ParamVars<'g>,
    images: &Var<'g>,
) -> Result<Forward<'g>> {
    let s = images.shape();
    if s.len() != 4
        || s[1] != config.input_channels
        || s[2] != config.input_size
        || s[3] != config.input_size
    {
        return Err(Error::invalid(format!(
            "images have shape {s:?}, model expects [N, {}, {}, {}]",
            config.input_channels, config.input_size, config.input_size
        )));
    }
    let mut x = images.clone();
    let mut activations = None;
    for (i, b) in config.conv_blocks.iter().enumerate() {
        let w = params.get(&format!("conv{i}.weight"))?;
        let bias = params
            .get(&format!("conv{i}.bias"))?
            .reshape(&[1, b.out_channels, 1, 1])?;
        x = x.conv2d(w, b.stride, b.kernel / 2)?.add(&bias)?.relu();
        if i == config.gradcam_layer {
            activations = Some(x.clone());
        }
        if let Some(p) = b.pool {
            x = match p.kind {
                PoolKind::Avg => x.avg_pool2d(p.window, p.window)?,
                PoolKind::Max => x.max_pool2d(p.window, p.window)?,
            };
        }
    }
    let pooled = x.mean(&[2, 3], false)?;
    let logits = pooled
        .matmul(&params.get("fc.weight")?.t()?)?
        .add(&params.get("fc.bias")?.reshape(&[1, config.num_classes])?)?;
    let activations =
        activations.ok_or_else(|| Error::invalid("gradcam_layer is out of range"))?;
    Ok(Forward {
        logits,
        activations,
    })
}

/// Anything that maps an image batch `[N, C, H, W]` to logits `[N, K]`.
pub trait Classifier: Sync {
    fn logits(&self, images: &Tensor) -> Result<Tensor>;
}

/// A configuration with its trained parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Parameters,
}

impl Model {
    pub fn new(config: ModelConfig, params: Parameters) -> Result<Self> {
        config.validate()?;
        params.check_matches(&config)?;
        Ok(Model { config, params })
    }
}

impl Classifier for Model {
    fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let p = self.params.bind_constant(&g);
        let fwd = forward_with_activations(&self.config, &p, &g.constant(images.clone()))?;
        Ok(fwd.logits.into_value())
    }
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Row-wise argmax of a `[N, K]` logit tensor.
pub fn predictions(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape().get(1).copied().unwrap_or(1).max(1);
    logits.data().chunks(k).map(argmax_row).collect()
}

/// Log-softmax along the last axis of `[N, K]` logits, shifted by a
/// detached row maximum.
pub fn log_softmax<'g>(logits: &Var<'g>) -> Result<Var<'g>> {
    let m = logits.max(&[1], true)?.detach();
    let z = logits.sub(&m)?;
    let lse = z.exp().sum(&[1], true)?.log()?;
    Ok(z.sub(&lse)?)
}

/// Mean of `-log softmax(logits)[label]` over samples whose mask entry is
/// true; zero when no sample is selected.
pub fn cross_entropy<'g>(
    logits: &Var<'g>,
    labels: &[usize],
    mask: Option<&[bool]>,
) -> Result<Var<'g>> {
    let (n, k) = match logits.shape() {
        [n, k] => (*n, *k),
        s => return Err(Error::invalid(format!("logits must be [N, K], got {s:?}"))),
    };
    if labels.len() != n {
        return Err(Error::invalid(format!("{} labels for {n} samples", labels.len())));
    }
    if let Some(m) = mask {
        if m.len() != n {
            return Err(Error::invalid(format!("mask has {} entries for {n} samples", m.len())));
        }
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
    }
    let g = logits.graph();
    let mut pick = vec![0.0; n * k];
    let mut count = 0usize;
    for (i, &l) in labels.iter().enumerate() {
        if mask.map_or(true, |m| m[i]) {
            pick[i * k + l] = 1.0;
            count += 1;
        }
    }
    if count == 0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let pick = g.constant(Tensor::new(vec![n, k], pick)?);
    let picked = log_softmax(logits)?.mul(&pick)?.sum_all();
    Ok(picked.scale(-1.0 / count as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// `v <- momentum*v + g + weight_decay*theta; theta <- theta - lr*v`.
pub fn sgd_step(
    params: &mut Parameters,
    grads: &BTreeMap<String, Tensor>,
    sgd: SgdConfig,
) -> Result<()> {
    if grads.len() != params.values.len() {
        return Err(Error::invalid(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.values.len()
        )));
    }
    for (name, g) in grads {
        let theta = params
            .values
            .get(name)
            .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter {name}")))?;
        if theta.shape() != g.shape() {
            return Err(Error::invalid(format!(
                "gradient for {name} has shape {:?}, parameter has {:?}",
                g.shape(),
                theta.shape()
            )));
        }
    }
    for (name, g) in grads {
        let theta = &params.values[name];
        let v = &params.momentum[name];
        let new_v: Vec<f64> = v
            .data()
            .iter()
            .zip(g.data())
            .zip(theta.data())
            .map(|((v, g), t)| sgd.momentum * v + g + sgd.weight_decay * t)
            .collect();
        let new_t: Vec<f64> = theta
            .data()
            .iter()
            .zip(&new_v)
            .map(|(t, v)| t - sgd.lr * v)
            .collect();
        let shape = theta.shape().to_vec();
        params.values.insert(name.clone(), Tensor::new(shape.clone(), new_t)?);
        params.momentum.insert(name.clone(), Tensor::new(shape, new_v)?);
    }
    Ok(())
}

/// `base_lr * decay_factor^floor(epoch / decay_every)`; a zero period means
/// no decay.
pub fn lr_schedule(epoch: usize, base_lr: f64, decay_every: usize, decay_factor: f64) -> f64 {
    if decay_every == 0 {
        return base_lr;
    }
    base_lr * decay_factor.powi((epoch / decay_every) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig::with_channels(1, 8, 3, &[2, 3])
    }

    #[test]
    fn logits_have_batch_by_class_shape() {
        let cfg = tiny();
        let p = Parameters::init(&cfg, 1).unwrap();
        let g = Graph::new();
        let x = g.constant(Tensor::from_fn(vec![2, 1, 8, 8], |i| (i as f64 * 0.37).sin()));
        let f = forward_with_activations(&cfg, &p.bind(&g), &x).unwrap();
        assert_eq!(f.logits.shape(), &[2, 3]);
        assert_eq!(f.activations.shape(), &[2, 3, 4, 4]);
        assert_eq!(cfg.gradcam_output(), (3, 4));
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let cfg = tiny();
        let values = cfg
            .parameter_shapes()
            .into_iter()
            .map(|(n, s)| (n, Tensor::zeros(s)))
            .collect();
        let m = Model::new(cfg, Parameters::from_values(values)).unwrap();
        let y = m.logits(&Tensor::ones(vec![1, 1, 8, 8])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_wrong_image_shape() {
        let cfg = tiny();
        let m = Model::new(cfg.clone(), Parameters::init(&cfg, 0).unwrap()).unwrap();
        assert!(m.logits(&Tensor::ones(vec![1, 2, 8, 8])).is_err());
    }

    #[test]
    fn validation_lists_every_problem() {
        let mut cfg = tiny();
        cfg.num_classes = 1;
        cfg.gradcam_layer = 5;
        cfg.input_channels = 0;
        assert_eq!(cfg.violations().len(), 3);
        cfg = ModelConfig::with_channels(1, 4, 3, &[2, 2, 2]);
        assert!(cfg.violations()[0].contains("too small"));
    }

    fn ce_of(logits: Vec<f64>, k: usize, labels: &[usize]) -> f64 {
        let g = Graph::new();
        let n = labels.len();
        let y = g.constant(Tensor::new(vec![n, k], logits).unwrap());
        cross_entropy(&y, labels, None).unwrap().item().unwrap()
    }

    #[test]
    fn cross_entropy_examples() {
        assert!((ce_of(vec![0.3; 10], 10, &[4]) - 10f64.ln()).abs() < 1e-12);
        let oracle = -(10f64.exp() / (10f64.exp() + 2.0)).ln();
        let got = ce_of(vec![10.0, 0.0, 0.0], 3, &[0]);
        assert!((got - oracle).abs() < 1e-15);
        assert!((got - 9.1e-5).abs() < 1e-6);
        let g = Graph::new();
        let y = g.constant(Tensor::ones(vec![2, 3]));
        let none = cross_entropy(&y, &[0, 1], Some(&[false, false])).unwrap();
        assert_eq!(none.item().unwrap(), 0.0);
        assert!(cross_entropy(&y, &[0, 3], None).is_err());
    }

    #[test]
    fn masked_mean_divides_by_selected_count() {
        let g = Graph::new();
        let y = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 3.0]).unwrap());
        let one = cross_entropy(&y, &[0, 0], Some(&[true, false])).unwrap();
        let expect = ce_of(vec![1.0, 0.0], 2, &[0]);
        assert!((one.item().unwrap() - expect).abs() < 1e-15);
    }

    fn scalar_params(theta: f64) -> Parameters {
        Parameters::from_values(BTreeMap::from([("w".to_string(), Tensor::scalar(theta))]))
    }

    fn step(p: &mut Parameters, g: f64, lr: f64, momentum: f64, wd: f64) {
        let grads = BTreeMap::from([("w".to_string(), Tensor::scalar(g))]);
        sgd_step(p, &grads, SgdConfig { lr, momentum, weight_decay: wd }).unwrap();
    }

    #[test]
    fn sgd_examples() {
        let mut p = scalar_params(0.5);
        step(&mut p, 2.0, 0.1, 0.0, 0.0);
        assert!((p.get("w").unwrap().item().unwrap() - 0.3).abs() < 1e-15);

        let mut p = scalar_params(0.0);
        step(&mut p, 1.0, 1.0, 0.9, 0.0);
        step(&mut p, 1.0, 1.0, 0.9, 0.0);
        assert!((p.get("w").unwrap().item().unwrap() + 2.9).abs() < 1e-12);

        let mut p = scalar_params(2.0);
        step(&mut p, 0.0, 1.0, 0.0, 0.1);
        assert!((p.get("w").unwrap().item().unwrap() - 1.8).abs() < 1e-12);
    }

    #[test]
    fn sgd_rejects_mismatched_gradients() {
        let mut p = scalar_params(0.0);
        let bad = BTreeMap::from([("w".to_string(), Tensor::zeros(vec![2]))]);
        let sgd = SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0 };
        assert!(sgd_step(&mut p, &bad, sgd).is_err());
        let other = BTreeMap::from([("v".to_string(), Tensor::scalar(0.0))]);
        assert!(sgd_step(&mut p, &other, sgd).is_err());
        assert_eq!(p, scalar_params(0.0));
    }

    #[test]
    fn lr_schedule_examples() {
        assert_eq!(lr_schedule(0, 0.1, 30, 0.1), 0.1);
        assert!((lr_schedule(30, 0.1, 30, 0.1) - 0.01).abs() < 1e-15);
        assert!((lr_schedule(89, 0.1, 30, 0.1) - 0.001).abs() < 1e-15);
        assert_eq!(lr_schedule(29, 0.1, 30, 0.1), 0.1);
    }

    #[test]
    fn ties_go_to_first_class() {
        assert_eq!(argmax_row(&[1.0, 1.0]), 0);
        assert_eq!(argmax_row(&[0.1, 0.9, 0.3]), 1);
    }
}
