//! Per-sample evaluation and report assembly.

use std::collections::BTreeMap;

use crate::augment::AugConfig;
use crate::data::Dataset;
use crate::error::Result;
use crate::gradcam::heatmaps_for;
use crate::metrics::{
    content_heatmap, default_insertion_step, eval_cgc_loss, heatmap_entropy, insertion_auc,
    MetricSummary, MetricsReport, SampleRow, EVAL_LOSS_BATCH,
};
use crate::nn::{predictions, Classifier, Model};

pub const ACCURACY: &str = "accuracy";
pub const CONTENT_HEATMAP: &str = "content_heatmap";
pub const CONTENT_HEATMAP_PCT: &str = "content_heatmap_pct";
pub const ENTROPY: &str = "heatmap_entropy";
pub const INSERTION_AUC: &str = "insertion_auc";
pub const EVAL_CGC_LOSS: &str = "eval_cgc_loss";

#[derive(Clone, Debug)]
pub struct EvalSettings {
    pub aug: AugConfig,
    pub temperature: f64,
    pub seed: u64,
    /// `None` uses [`default_insertion_step`].
    pub insertion_step: Option<usize>,
    /// Worker threads for per-sample metrics; 1 runs inline.
    pub threads: usize,
}

/// Metrics of one sample; content and entropy use the heatmap of the true
/// label, insertion uses the heatmap of the predicted class.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleMetrics {
    pub id: u64,
    pub correct: bool,
    pub content_heatmap: Option<f64>,
    pub entropy: Option<f64>,
    pub insertion_auc: f64,
}

const CHUNK: usize = 32;

fn evaluate_chunk(
    model: &Model,
    dataset: &Dataset,
    indices: &[usize],
    step: usize,
) -> Result<Vec<SampleMetrics>> {
    let images = dataset.images(indices)?;
    let labels: Vec<usize> = indices.iter().map(|&i| dataset.samples[i].label).collect();
    let preds = predictions(&model.logits(&images)?);
    let (true_maps, _) = heatmaps_for(&model.config, &model.params, &images, Some(&labels))?;
    let (pred_maps, _) = heatmaps_for(&model.config, &model.params, &images, Some(&preds))?;
    let mut out = Vec::with_capacity(indices.len());
    for (j, &i) in indices.iter().enumerate() {
        let s = &dataset.samples[i];
        let hm_true = true_maps.select(j)?;
        let hm_pred = pred_maps.select(j)?;
        out.push(SampleMetrics {
            id: s.id,
            correct: preds[j] == s.label,
            content_heatmap: content_heatmap(&hm_true, &s.boxes)?,
            entropy: heatmap_entropy(&hm_true)?,
            insertion_auc: insertion_auc(model, &s.image, &hm_pred, step)?,
        });
    }
    Ok(out)
}

/// Per-sample metrics in dataset order; the result does not depend on the
/// thread count.
pub fn sample_metrics(
    model: &Model,
    dataset: &Dataset,
    settings: &EvalSettings,
) -> Result<Vec<SampleMetrics>> {
    let step = settings
        .insertion_step
        .unwrap_or_else(|| default_insertion_step(dataset.height * dataset.width));
    let idx: Vec<usize> = (0..dataset.len()).collect();
    let chunks: Vec<&[usize]> = idx.chunks(CHUNK).collect();
    let threads = settings.threads.max(1).min(chunks.len().max(1));
    if threads == 1 {
        let mut out = Vec::with_capacity(dataset.len());
        for c in chunks {
            out.extend(evaluate_chunk(model, dataset, c, step)?);
        }
        return Ok(out);
    }
    let results: Vec<Result<Vec<(usize, Vec<SampleMetrics>)>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let chunks = &chunks;
                scope.spawn(move || {
                    (t..chunks.len())
                        .step_by(threads)
                        .map(|ci| Ok((ci, evaluate_chunk(model, dataset, chunks[ci], step)?)))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });
    let mut done: Vec<(usize, Vec<SampleMetrics>)> =
        results.into_iter().collect::<Result<Vec<_>>>()?.concat();
    done.sort_by_key(|(ci, _)| *ci);
    Ok(done.into_iter().flat_map(|(_, m)| m).collect())
}

/// Full report: per-sample rows, summaries and the held-out consistency
/// loss (when the set holds at least one loss batch).
pub fn evaluate(
    model: &Model,
    dataset: &Dataset,
    settings: &EvalSettings,
    fingerprint: &str,
) -> Result<MetricsReport> {
    let per = sample_metrics(model, dataset, settings)?;
    let mut rows = Vec::with_capacity(per.len() * 4);
    let flag = |v: Option<f64>| if v.is_none() { "undefined" } else { "" }.to_string();
    for m in &per {
        let row = |metric: &str, value: Option<f64>| SampleRow {
            sample_id: m.id,
            metric: metric.to_string(),
            value,
            flags: flag(value),
        };
        rows.push(row(ACCURACY, Some(if m.correct { 1.0 } else { 0.0 })));
        rows.push(row(CONTENT_HEATMAP, m.content_heatmap));
        rows.push(row(ENTROPY, m.entropy));
        rows.push(row(INSERTION_AUC, Some(m.insertion_auc)));
    }
    let column = |f: fn(&SampleMetrics) -> Option<f64>| per.iter().map(f).collect::<Vec<_>>();
    let mut summaries = BTreeMap::new();
    summaries.insert(
        ACCURACY.to_string(),
        MetricSummary::of(&column(|m| Some(if m.correct { 1.0 } else { 0.0 }))),
    );
    let ch = MetricSummary::of(&column(|m| m.content_heatmap));
    summaries.insert(CONTENT_HEATMAP_PCT.to_string(), ch.scaled(100.0));
    summaries.insert(CONTENT_HEATMAP.to_string(), ch);
    summaries.insert(ENTROPY.to_string(), MetricSummary::of(&column(|m| m.entropy)));
    summaries.insert(
        INSERTION_AUC.to_string(),
        MetricSummary::of(&column(|m| Some(m.insertion_auc))),
    );
    let mut aggregates = BTreeMap::new();
    if dataset.len() >= EVAL_LOSS_BATCH {
        aggregates.insert(
            EVAL_CGC_LOSS.to_string(),
            eval_cgc_loss(model, dataset, &settings.aug, settings.temperature, settings.seed)?,
        );
    }
    Ok(MetricsReport {
        config_fingerprint: fingerprint.to_string(),
        seed: settings.seed,
        summaries,
        aggregates,
        rows,
    })
}
