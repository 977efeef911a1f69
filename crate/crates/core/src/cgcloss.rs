//! Contrastive heatmap consistency loss and the training step built on it.
//!
//! Query `i` compares the transformed heatmap of image `i` (the anchor)
//! against the heatmaps of every transformed image in the batch (the
//! candidates); its own candidate is the positive. Each query contributes
//! `logsumexp_j(s_ij / τ) - s_ii / τ`.

use std::collections::BTreeMap;

use cgc_autodiff::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::augment::{apply_batch, AugParams};
use crate::error::{Error, Result};
use crate::gradcam::{gradcam_from_forward, Heatmap};
use crate::nn::{cross_entropy, forward_with_activations, predictions, ModelConfig, ParamVars, Parameters};

/// Denominator guard in cosine similarity and normalization.
pub const EPS: f64 = 1e-8;

fn flat_rows<'g>(x: &Var<'g>) -> Result<Var<'g>> {
    let n = x.shape().first().copied().unwrap_or(1);
    let d = x.value().len() / n.max(1);
    Ok(x.reshape(&[n, d])?)
}

/// `dot(a, b) / (|a| |b| + EPS)` over flattened values.
pub fn cosine_sim<'g>(a: &Var<'g>, b: &Var<'g>) -> Result<Var<'g>> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!(
            "cannot compare heatmaps of shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let dot = a.mul(b)?.sum_all();
    let na = a.square().sum_all().sqrt()?;
    let nb = b.square().sum_all().sqrt()?;
    Ok(dot.div(&na.mul(&nb)?.add_scalar(EPS))?)
}

/// `n` anchors and `n` candidates, each stacked along the leading axis.
#[derive(Clone, Debug)]
pub struct CgcBatch<'g> {
    pub anchors: Var<'g>,
    pub candidates: Var<'g>,
    pub temperature: f64,
}

impl<'g> CgcBatch<'g> {
    pub fn new(anchors: Var<'g>, candidates: Var<'g>, temperature: f64) -> Result<Self> {
        if anchors.shape() != candidates.shape() || anchors.shape().len() < 2 {
            return Err(Error::invalid(format!(
                "anchors {:?} and candidates {:?} must be equal stacks",
                anchors.shape(),
                candidates.shape()
            )));
        }
        if anchors.shape()[0] == 0 {
            return Err(Error::invalid("a contrastive batch needs at least one query"));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
        }
        Ok(CgcBatch {
            anchors,
            candidates,
            temperature,
        })
    }

    pub fn from_heatmaps(
        anchors: &[Heatmap<'g>],
        candidates: &[Heatmap<'g>],
        temperature: f64,
    ) -> Result<Self> {
        if anchors.is_empty() || anchors.len() != candidates.len() {
            return Err(Error::invalid(format!(
                "{} anchors and {} candidates",
                anchors.len(),
                candidates.len()
            )));
        }
        let a: Vec<Var<'g>> = anchors.iter().map(|h| h.values.clone()).collect();
        let c: Vec<Var<'g>> = candidates.iter().map(|h| h.values.clone()).collect();
        Self::new(Var::stack(&a)?, Var::stack(&c)?, temperature)
    }

    pub fn len(&self) -> usize {
        self.anchors.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `s_ij = cosine_sim(anchor_i, candidate_j)` as an `[n, n]` matrix.
pub fn similarity_matrix<'g>(anchors: &Var<'g>, candidates: &Var<'g>) -> Result<Var<'g>> {
    let a = flat_rows(anchors)?;
    let c = flat_rows(candidates)?;
    let n = c.shape()[0];
    let dots = a.matmul(&c.t()?)?;
    let na = a.square().sum(&[1], true)?.sqrt()?;
    let nc = c.square().sum(&[1], true)?.sqrt()?.reshape(&[1, n])?;
    Ok(dots.div(&na.mul(&nc)?.add_scalar(EPS))?)
}

/// Per-query losses `[n]`, in the max-shifted form.
pub fn cgc_query_losses<'g>(batch: &CgcBatch<'g>) -> Result<Var<'g>> {
    let n = batch.len();
    let logits = similarity_matrix(&batch.anchors, &batch.candidates)?
        .scale(1.0 / batch.temperature);
    let m = logits.max(&[1], true)?.detach();
    let z = logits.sub(&m)?;
    let lse = z.exp().sum(&[1], false)?.log()?;
    let eye = logits
        .graph()
        .constant(Tensor::from_fn(vec![n, n], |i| if i / n == i % n { 1.0 } else { 0.0 }));
    let positive = z.mul(&eye)?.sum(&[1], false)?;
    Ok(lse.sub(&positive)?)
}

/// Sum of the per-query losses.
pub fn cgc_loss<'g>(batch: &CgcBatch<'g>) -> Result<Var<'g>> {
    Ok(cgc_query_losses(batch)?.sum_all())
}

/// `ce + λ cgc`.
pub fn combined_loss<'g>(ce: &Var<'g>, cgc: &Var<'g>, lambda: f64) -> Result<Var<'g>> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("lambda must be nonnegative, got {lambda}")));
    }
    Ok(ce.add(&cgc.scale(lambda))?)
}

/// `Σ_i |â_i - p̂_i|²` with `·̂` the ε-guarded unit-norm flattening.
pub fn l2_consistency_loss<'g>(anchors: &Var<'g>, positives: &Var<'g>) -> Result<Var<'g>> {
    if anchors.shape() != positives.shape() {
        return Err(Error::invalid(format!(
            "anchors {:?} and positives {:?} differ in shape",
            anchors.shape(),
            positives.shape()
        )));
    }
    let unit = |x: &Var<'g>| -> Result<Var<'g>> {
        let r = flat_rows(x)?;
        let norm = r.square().sum(&[1], true)?.sqrt()?.add_scalar(EPS);
        Ok(r.div(&norm)?)
    };
    Ok(unit(anchors)?.sub(&unit(positives)?)?.square().sum_all())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Cross-entropy only.
    Baseline,
    /// Cross-entropy plus the contrastive consistency loss.
    #[default]
    Cgc,
    /// Cross-entropy plus the positive-pair ℓ2 term, without negatives.
    CgcNoNeg,
}

/// Which forward pass the cross-entropy term uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CeOn {
    #[default]
    Original,
    Augmented,
    /// Mean of the two.
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSettings {
    pub variant: Variant,
    pub temperature: f64,
    pub lambda: f64,
    pub ce_on: CeOn,
}

/// Images `[N, C, H, W]` with labels and a per-sample labeled flag.
#[derive(Clone, Copy, Debug)]
pub struct TrainBatch<'a> {
    pub images: &'a Tensor,
    pub labels: &'a [usize],
    pub label_mask: &'a [bool],
}

/// The loss terms of one step, still on the tape.
#[derive(Clone, Debug)]
pub struct Objective<'g> {
    pub ce: Var<'g>,
    /// Zero for the baseline.
    pub cgc: Var<'g>,
    pub total: Var<'g>,
    /// Per-query mean of the consistency term.
    pub cgc_per_query: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub ce: f64,
    pub cgc: f64,
    pub cgc_per_query: f64,
    pub total: f64,
    pub grads: BTreeMap<String, Tensor>,
}

/// Builds the training objective for one batch on `params`' graph.
///
/// `transforms[i]` is applied to image `i` and, for the anchors, to its
/// heatmap. Each heatmap targets the class predicted on the original image.
pub fn training_objective<'g>(
    config: &ModelConfig,
    params: &ParamVars<'g>,
    batch: TrainBatch<'_>,
    transforms: &[AugParams],
    settings: &StepSettings,
) -> Result<Objective<'g>> {
    let n = batch.labels.len();
    let g = params.get("fc.weight")?.graph();
    if batch.images.shape().first() != Some(&n) || batch.label_mask.len() != n {
        return Err(Error::invalid(format!(
            "batch of shape {:?} with {n} labels and {} mask entries",
            batch.images.shape(),
            batch.label_mask.len()
        )));
    }
    if settings.variant == Variant::Cgc && n < 2 {
        return Err(Error::invalid("the contrastive loss needs a batch of at least 2"));
    }
    if !(settings.lambda >= 0.0) {
        return Err(Error::invalid(format!("lambda must be nonnegative, got {}", settings.lambda)));
    }
    let needs_aug = settings.variant != Variant::Baseline || settings.ce_on != CeOn::Original;
    if needs_aug {
        if transforms.len() != n {
            return Err(Error::invalid(format!("{} transforms for {n} images", transforms.len())));
        }
        if let Some(p) = transforms.iter().find(|p| p.out_size != config.input_size) {
            return Err(Error::invalid(format!(
                "transform output {} differs from the model input size {}",
                p.out_size, config.input_size
            )));
        }
    }

    let x = g.constant(batch.images.clone());
    let fwd = forward_with_activations(config, params, &x)?;
    let fwd_aug = if needs_aug {
        let xa = apply_batch(&x, transforms)?.detach();
        Some(forward_with_activations(config, params, &xa)?)
    } else {
        None
    };
    let mask = Some(batch.label_mask);
    let ce = match (settings.ce_on, &fwd_aug) {
        (CeOn::Original, _) | (_, None) => cross_entropy(&fwd.logits, batch.labels, mask)?,
        (CeOn::Augmented, Some(fa)) => cross_entropy(&fa.logits, batch.labels, mask)?,
        (CeOn::Both, Some(fa)) => cross_entropy(&fwd.logits, batch.labels, mask)?
            .add(&cross_entropy(&fa.logits, batch.labels, mask)?)?
            .scale(0.5),
    };

    let (cgc, per_query) = match (settings.variant, &fwd_aug) {
        (Variant::Baseline, _) | (_, None) => (g.constant(Tensor::scalar(0.0)), 0.0),
        (variant, Some(fa)) => {
            let targets = predictions(fwd.logits.value());
            let size = config.input_size;
            let original = gradcam_from_forward(&fwd, &targets, size, true)?;
            let anchors = apply_batch(&original.heatmaps, transforms)?;
            let candidates = gradcam_from_forward(fa, &targets, size, true)?.heatmaps;
            let loss = if variant == Variant::Cgc {
                cgc_loss(&CgcBatch::new(anchors, candidates, settings.temperature)?)?
            } else {
                l2_consistency_loss(&anchors, &candidates)?
            };
            let mean = loss.value().item()? / n as f64;
            (loss, mean)
        }
    };
    let total = if settings.variant == Variant::Baseline {
        ce.clone()
    } else {
        combined_loss(&ce, &cgc, settings.lambda)?
    };
    Ok(Objective {
        ce,
        cgc,
        total,
        cgc_per_query: per_query,
    })
}

/// One step: loss values and the gradient of the total loss with respect to
/// every parameter.
pub fn cgc_training_step(
    config: &ModelConfig,
    params: &Parameters,
    batch: TrainBatch<'_>,
    transforms: &[AugParams],
    settings: &StepSettings,
) -> Result<StepOutput> {
    let g = Graph::new();
    let pv = params.bind(&g);
    let obj = training_objective(config, &pv, batch, transforms, settings)?;
    let grads = pv.gradients(&obj.total)?;
    Ok(StepOutput {
        ce: obj.ce.item()?,
        cgc: obj.cgc.item()?,
        cgc_per_query: obj.cgc_per_query,
        total: obj.total.item()?,
        grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant<'g>(g: &'g Graph, shape: &[usize], data: &[f64]) -> Var<'g> {
        g.constant(Tensor::new(shape.to_vec(), data.to_vec()).unwrap())
    }

    #[test]
    fn cosine_examples() {
        let g = Graph::new();
        let a = constant(&g, &[2, 2], &[3.0, 4.0, 0.0, 2.0]);
        let sim = |x: &Var, y: &Var| cosine_sim(x, y).unwrap().item().unwrap();
        assert!((sim(&a, &a) - 1.0).abs() < 1e-6);
        assert!((sim(&a, &a.scale(7.5)) - sim(&a, &a)).abs() < 1e-9);
        let e1 = constant(&g, &[2, 2], &[1.0, 0.0, 0.0, 0.0]);
        let e2 = constant(&g, &[2, 2], &[0.0, 0.0, 1.0, 1.0]);
        assert!(sim(&e1, &e2).abs() < 1e-9);
        let z = constant(&g, &[2, 2], &[0.0; 4]);
        assert_eq!(sim(&z, &a), 0.0);
    }

    #[test]
    fn two_query_example() {
        let g = Graph::new();
        let anchors = constant(&g, &[2, 1, 2], &[1.0, 0.0, 0.0, 1.0]);
        let cands = constant(&g, &[2, 1, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = CgcBatch::new(anchors, cands, 0.5).unwrap();
        let per = cgc_query_losses(&b).unwrap();
        let want = -(2f64.exp() / (2f64.exp() + 1.0)).ln();
        assert!((per.value().data()[0] - want).abs() < 1e-8);
        assert!((want - 0.126928).abs() < 1e-6);
    }

    #[test]
    fn single_query_is_exactly_zero() {
        let g = Graph::new();
        let a = constant(&g, &[1, 2, 2], &[0.2, 0.5, 0.1, 0.9]);
        let c = constant(&g, &[1, 2, 2], &[0.7, 0.1, 0.0, 0.3]);
        let l = cgc_loss(&CgcBatch::new(a, c, 0.5).unwrap()).unwrap();
        assert_eq!(l.item().unwrap(), 0.0);
    }

    #[test]
    fn equal_similarities_give_ln_n() {
        let g = Graph::new();
        let a = constant(&g, &[4, 1, 3], &[1.0, 2.0, 0.5].repeat(4));
        let b = CgcBatch::new(a.clone(), a, 0.5).unwrap();
        let per = cgc_query_losses(&b).unwrap();
        for v in per.value().data() {
            assert!((v - 4f64.ln()).abs() < 1e-9);
        }
        assert!((4f64.ln() - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn invalid_batches() {
        let g = Graph::new();
        let a = constant(&g, &[0, 2, 2], &[]);
        assert!(CgcBatch::new(a.clone(), a, 0.5).is_err());
        let b = constant(&g, &[1, 2, 2], &[1.0; 4]);
        assert!(CgcBatch::new(b.clone(), b.clone(), 0.0).is_err());
        let c = constant(&g, &[1, 2, 1], &[1.0; 2]);
        assert!(CgcBatch::new(b, c, 0.5).is_err());
    }

    #[test]
    fn combined_examples() {
        let g = Graph::new();
        let ce = g.constant(Tensor::scalar(2.0));
        let cgc = g.constant(Tensor::scalar(4.0));
        let v = |l| combined_loss(&ce, &cgc, l).unwrap().item().unwrap();
        assert_eq!(v(0.0), 2.0);
        assert_eq!(v(0.5), 4.0);
        assert_eq!(v(1.0), 6.0);
        assert!(combined_loss(&ce, &cgc, -1.0).is_err());
    }

    #[test]
    fn l2_examples() {
        let g = Graph::new();
        let a = constant(&g, &[1, 2, 2], &[0.0, 1.0, 0.0, 0.0]);
        let p = constant(&g, &[1, 2, 2], &[0.0, 0.0, 0.6, 0.8]);
        assert_eq!(l2_consistency_loss(&a, &a).unwrap().item().unwrap(), 0.0);
        assert!((l2_consistency_loss(&a, &p).unwrap().item().unwrap() - 2.0).abs() < 1e-7);
    }
}
