//! The training loop.
//!
//! Epoch `e` visits the training set in an order drawn from the
//! `(seed, e)` shuffle stream, in full batches (a trailing partial batch is
//! skipped). Sample `id` in epoch `e` is augmented from the `(seed, e, id)`
//! stream, so an epoch depends only on the parameters it starts from.
//! Parameters and momentum are rounded to `f32` after every step, which makes
//! the `f32` checkpoint an exact snapshot of the state.

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::ExperimentConfig;
use crate::augment::{sample_aug, AugParams};
use crate::cgcloss::{cgc_training_step, TrainBatch};
use crate::data::{split_labeled, Dataset};
use crate::error::{Error, Result};
use crate::nn::{lr_schedule, sgd_step, Parameters};
use crate::rng::{self, Purpose};
use rand::seq::SliceRandom;

/// One line of the training log: means over the epoch's batches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub ce: f64,
    pub cgc: f64,
    pub cgc_per_query: f64,
    pub total: f64,
}

/// Applies the configured label fraction.
pub fn prepare_train_set(config: &ExperimentConfig, train: &Dataset) -> Result<Dataset> {
    if config.label_fraction < 1.0 {
        split_labeled(train, config.label_fraction, config.seed)
    } else {
        Ok(train.clone())
    }
}

pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, Purpose::Shuffle, epoch as u64, 0));
    order
}

pub fn train_transform(config: &ExperimentConfig, epoch: usize, id: u64) -> Result<AugParams> {
    let size = config.model.input_size;
    let mut r = rng::stream(config.seed, Purpose::Augment, epoch as u64, id);
    sample_aug(&mut r, &config.resolved_aug(), size, size)
}

/// Runs one epoch in place and returns its log line.
pub fn run_epoch(
    config: &ExperimentConfig,
    train: &Dataset,
    params: &mut Parameters,
    epoch: usize,
) -> Result<EpochLog> {
    let lr = lr_schedule(epoch, config.lr, config.decay_every(), config.decay_factor);
    let settings = config.step_settings();
    let order = epoch_order(config.seed, epoch, train.len());
    let mut sums = [0.0; 4];
    let mut steps = 0usize;
    for chunk in order.chunks_exact(config.batch_size) {
        let images = train.images(chunk)?;
        let labels: Vec<usize> = chunk.iter().map(|&i| train.samples[i].label).collect();
        let mask: Vec<bool> = chunk.iter().map(|&i| train.samples[i].labeled).collect();
        let transforms = chunk
            .iter()
            .map(|&i| train_transform(config, epoch, train.samples[i].id))
            .collect::<Result<Vec<_>>>()?;
        let batch = TrainBatch {
            images: &images,
            labels: &labels,
            label_mask: &mask,
        };
        let out = cgc_training_step(&config.model, params, batch, &transforms, &settings)?;
        if !out.total.is_finite() {
            return Err(Error::invalid(format!(
                "loss became non-finite in epoch {epoch} (ce {}, cgc {})",
                out.ce, out.cgc
            )));
        }
        sgd_step(params, &out.grads, config.sgd(lr))?;
        params.round_to_f32();
        for (s, v) in sums.iter_mut().zip([out.ce, out.cgc, out.cgc_per_query, out.total]) {
            *s += v;
        }
        steps += 1;
    }
    let mean = |i: usize| sums[i] / steps as f64;
    Ok(EpochLog {
        epoch,
        lr,
        ce: mean(0),
        cgc: mean(1),
        cgc_per_query: mean(2),
        total: mean(3),
    })
}

/// Trains from `start` (or a fresh initialization) through the configured
/// number of epochs, calling `on_epoch` after each with the log line and the
/// checkpoint of the state reached.
pub fn train(
    config: &ExperimentConfig,
    train_set: &Dataset,
    start: Option<Checkpoint>,
    mut on_epoch: impl FnMut(&EpochLog, &Checkpoint) -> Result<()>,
) -> Result<Checkpoint> {
    config.validate()?;
    if train_set.len() < config.batch_size {
        return Err(Error::invalid(format!(
            "training set of {} is smaller than one batch of {}",
            train_set.len(),
            config.batch_size
        )));
    }
    let train_set = prepare_train_set(config, train_set)?;
    let mut ck = match start {
        Some(ck) => {
            if ck.manifest.config_fingerprint != config.fingerprint()? {
                return Err(Error::invalid("checkpoint was written by a different configuration"));
            }
            ck
        }
        None => {
            let mut params = Parameters::init(&config.model, config.seed)?;
            params.round_to_f32();
            Checkpoint::new(config, 0, params)?
        }
    };
    for epoch in ck.manifest.rng.next_epoch..config.epochs {
        let mut params = ck.params;
        let log = run_epoch(config, &train_set, &mut params, epoch)?;
        ck = Checkpoint::new(config, epoch + 1, params)?;
        on_epoch(&log, &ck)?;
    }
    Ok(ck)
}
