use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugConfig;
use crate::cgcloss::{CeOn, StepSettings, Variant};
use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::nn::{ModelConfig, SgdConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SynthSpec),
    Files { train: PathBuf, val: PathBuf },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Pixels revealed per insertion step; defaults to 1/64 of the image.
    #[serde(default)]
    pub insertion_step: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub data: DataSource,
    #[serde(default)]
    pub aug: AugConfig,
    #[serde(default)]
    pub variant: Variant,
    #[serde(default = "defaults::tau")]
    pub tau: f64,
    #[serde(default = "defaults::lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub ce_on: CeOn,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default = "defaults::momentum")]
    pub momentum: f64,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    /// Epochs between learning-rate decays; defaults to a third of `epochs`.
    #[serde(default)]
    pub decay_every: Option<usize>,
    #[serde(default = "defaults::decay_factor")]
    pub decay_factor: f64,
    #[serde(default = "defaults::label_fraction")]
    pub label_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub eval: EvalConfig,
}

mod defaults {
    use std::path::PathBuf;

    pub fn tau() -> f64 {
        0.5
    }
    pub fn lambda() -> f64 {
        0.5
    }
    pub fn epochs() -> usize {
        30
    }
    pub fn batch_size() -> usize {
        16
    }
    pub fn lr() -> f64 {
        0.1
    }
    pub fn momentum() -> f64 {
        0.9
    }
    pub fn weight_decay() -> f64 {
        1e-4
    }
    pub fn decay_factor() -> f64 {
        0.1
    }
    pub fn label_fraction() -> f64 {
        1.0
    }
    pub fn output_dir() -> PathBuf {
        PathBuf::from("runs")
    }
}

impl ExperimentConfig {
    /// Default hyperparameters around a synthetic dataset and the default
    /// three-block model sized to it.
    pub fn with_synthetic(spec: SynthSpec) -> Self {
        let model = ModelConfig::desk_default(1, spec.image_size, spec.num_classes);
        ExperimentConfig {
            model,
            data: DataSource::Synthetic(spec),
            aug: AugConfig::default(),
            variant: Variant::default(),
            tau: defaults::tau(),
            lambda: defaults::lambda(),
            ce_on: CeOn::default(),
            epochs: defaults::epochs(),
            batch_size: defaults::batch_size(),
            lr: defaults::lr(),
            momentum: defaults::momentum(),
            weight_decay: defaults::weight_decay(),
            decay_every: None,
            decay_factor: defaults::decay_factor(),
            label_fraction: defaults::label_fraction(),
            seed: 0,
            output_dir: defaults::output_dir(),
            eval: EvalConfig::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn decay_every(&self) -> usize {
        self.decay_every.unwrap_or((self.epochs / 3).max(1))
    }

    pub fn sgd(&self, lr: f64) -> SgdConfig {
        SgdConfig {
            lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    pub fn step_settings(&self) -> StepSettings {
        StepSettings {
            variant: self.variant,
            temperature: self.tau,
            lambda: self.lambda,
            ce_on: self.ce_on,
        }
    }

    /// Augmentation with its output fixed to the model input size.
    pub fn resolved_aug(&self) -> AugConfig {
        AugConfig {
            out_size: Some(self.model.input_size),
            ..self.aug
        }
    }

    /// Every violated constraint, one entry per field.
    pub fn violations(&self) -> Vec<String> {
        let mut out = self.model.violations();
        out.extend(self.aug.violations());
        if let DataSource::Synthetic(spec) = &self.data {
            out.extend(spec.violations());
            if spec.image_size != self.model.input_size {
                out.push(format!(
                    "model.input_size: {} differs from data.image_size {}",
                    self.model.input_size, spec.image_size
                ));
            }
            if spec.num_classes != self.model.num_classes {
                out.push(format!(
                    "model.num_classes: {} differs from data.num_classes {}",
                    self.model.num_classes, spec.num_classes
                ));
            }
            if self.model.input_channels != 1 {
                out.push("model.input_channels: synthetic data has 1 channel".to_string());
            }
        }
        if let Some(s) = self.aug.out_size {
            if s != self.model.input_size {
                out.push(format!(
                    "aug.out_size: {s} differs from the model input size {}",
                    self.model.input_size
                ));
            }
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            out.push(format!("tau: must be positive, got {}", self.tau));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            out.push(format!("lambda: must be nonnegative, got {}", self.lambda));
        }
        if self.epochs == 0 {
            out.push("epochs: must be at least 1".to_string());
        }
        let min_batch = if self.variant == Variant::Cgc { 2 } else { 1 };
        if self.batch_size < min_batch {
            out.push(format!(
                "batch_size: {} is below {min_batch} for variant {:?}",
                self.batch_size, self.variant
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            out.push(format!("lr: must be nonnegative, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            out.push(format!("momentum: {} is outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            out.push(format!("weight_decay: must be nonnegative, got {}", self.weight_decay));
        }
        if self.decay_every == Some(0) {
            out.push("decay_every: must be at least 1".to_string());
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            out.push(format!("decay_factor: {} is outside (0, 1]", self.decay_factor));
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            out.push(format!("label_fraction: {} is outside (0, 1]", self.label_fraction));
        }
        if self.eval.insertion_step == Some(0) {
            out.push("eval.insertion_step: must be at least 1".to_string());
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

    /// The configuration without its output location, which does not affect
    /// results.
    pub fn canonical(&self) -> Self {
        ExperimentConfig {
            output_dir: PathBuf::new(),
            ..self.clone()
        }
    }

    /// SHA-256 of the canonical configuration's JSON, in hex.
    pub fn fingerprint(&self) -> Result<String> {
        let bytes = serde_json::to_vec(&self.canonical())?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ExperimentConfig {
        ExperimentConfig::with_synthetic(SynthSpec::default())
    }

    #[test]
    fn defaults_are_valid() {
        base().validate().unwrap();
        assert_eq!(base().decay_every(), 10);
    }

    #[test]
    fn minimal_json_fills_defaults() {
        let json = r#"{
            "model": {"input_channels": 1, "input_size": 64, "num_classes": 8, "gradcam_layer": 0,
                      "conv_blocks": [{"out_channels": 4, "kernel": 3}]},
            "data": {"synthetic": {"num_classes": 8, "image_size": 64, "train_per_class": 2,
                     "val_per_class": 1, "glyph_size_range": [8, 12],
                     "background": {"noise_amplitude": 0.3, "texture_seed": 1}, "seed": 0}}
        }"#;
        let cfg = ExperimentConfig::from_json(json).unwrap();
        assert_eq!((cfg.tau, cfg.lambda, cfg.epochs, cfg.batch_size), (0.5, 0.5, 30, 16));
        assert_eq!((cfg.lr, cfg.momentum, cfg.weight_decay), (0.1, 0.9, 1e-4));
        assert_eq!(cfg.variant, Variant::Cgc);
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn every_violation_is_listed() {
        let mut cfg = base();
        cfg.tau = 0.0;
        cfg.lambda = -1.0;
        cfg.batch_size = 1;
        cfg.label_fraction = 0.0;
        let v = cfg.violations();
        for field in ["tau", "lambda", "batch_size", "label_fraction"] {
            assert!(v.iter().any(|m| m.starts_with(field)), "{field} missing from {v:?}");
        }
        assert_eq!(v.len(), 4);
    }

    #[test]
    fn fingerprint_ignores_output_dir() {
        let a = base();
        let mut b = base();
        b.output_dir = "elsewhere".into();
        assert_eq!(a.fingerprint().unwrap(), b.fingerprint().unwrap());
        b.seed = 1;
        assert_ne!(a.fingerprint().unwrap(), b.fingerprint().unwrap());
    }
}
