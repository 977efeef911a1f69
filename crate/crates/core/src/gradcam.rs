//! Grad-CAM as a differentiable operator.
//!
//! For target class `t`, the channel weights are the spatial means of
//! `∂y_t/∂A`, the raw map is `relu(Σ_c α_c A_c)` and the heatmap is that map
//! resized to the model input size. With `create_graph` the heatmap stays on
//! the tape, so losses built on it can be differentiated with respect to the
//! parameters.

use cgc_autodiff::{Graph, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::{argmax_row, forward_with_activations, Classifier, Forward, ModelConfig, ParamVars};

/// A nonnegative `[H, W]` attribution map for one class.
#[derive(Clone, Debug)]
pub struct Heatmap<'g> {
    pub values: Var<'g>,
    pub target_class: usize,
}

impl<'g> Heatmap<'g> {
    pub fn resolution(&self) -> (usize, usize) {
        let s = self.values.shape();
        (s[s.len() - 2], s[s.len() - 1])
    }

    pub fn tensor(&self) -> &Tensor {
        self.values.value()
    }
}

/// Intermediate quantities of a batched Grad-CAM evaluation.
#[derive(Clone, Debug)]
pub struct GradCamContext<'g> {
    /// `[N, C, h, w]`.
    pub activations: Var<'g>,
    /// `[N, C]`.
    pub channel_weights: Var<'g>,
    /// `[N, h, w]`, before resizing.
    pub raw_map: Var<'g>,
}

/// Heatmaps `[N, H, W]` for a batch, one target class per sample.
#[derive(Clone, Debug)]
pub struct GradCamBatch<'g> {
    pub heatmaps: Var<'g>,
    pub targets: Vec<usize>,
    pub context: GradCamContext<'g>,
}

impl<'g> GradCamBatch<'g> {
    pub fn heatmap(&self, i: usize) -> Result<Heatmap<'g>> {
        Ok(Heatmap {
            values: self.heatmaps.select(i)?,
            target_class: self.targets[i],
        })
    }
}

/// Predicted class of a single `[C, H, W]` image.
pub fn top_class(model: &impl Classifier, image: &Tensor) -> Result<usize> {
    let s = image.shape().to_vec();
    let batch = image.reshape([&[1], s.as_slice()].concat())?;
    Ok(argmax_row(model.logits(&batch)?.data()))
}

/// Grad-CAM from an existing forward pass, resized to `out_size`.
///
/// All samples share one backward pass: the selected logits are summed, and
/// since samples do not interact, the gradient of that sum with respect to
/// sample `n`'s activations is the gradient of its own target logit.
pub fn gradcam_from_forward<'g>(
    fwd: &Forward<'g>,
    targets: &[usize],
    out_size: usize,
    create_graph: bool,
) -> Result<GradCamBatch<'g>> {
    let (n, k) = match fwd.logits.shape() {
        [n, k] => (*n, *k),
        s => return Err(Error::invalid(format!("logits must be [N, K], got {s:?}"))),
    };
    if targets.len() != n {
        return Err(Error::invalid(format!("{} targets for {n} samples", targets.len())));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::invalid(format!("target class {bad} out of range for {k} classes")));
    }
    if !fwd.activations.requires_grad() {
        return Err(Error::invalid(
            "activations are constant; bind the parameters or the images as leaves",
        ));
    }
    let g = fwd.logits.graph();
    let mut select = vec![0.0; n * k];
    for (i, &t) in targets.iter().enumerate() {
        select[i * k + t] = 1.0;
    }
    let select = g.constant(Tensor::new(vec![n, k], select)?);
    let score = fwd.logits.mul(&select)?.sum_all();
    let a = &fwd.activations;
    let grad = score.backward(&[a], create_graph)?.remove(0);
    let alpha = grad.mean(&[2, 3], true)?;
    let raw = alpha.mul(a)?.sum(&[1], false)?.relu();
    let heat = raw.bilinear_resize(out_size, out_size)?;
    let c = alpha.shape()[1];
    let mut context = GradCamContext {
        activations: a.clone(),
        channel_weights: alpha.reshape(&[n, c])?,
        raw_map: raw,
    };
    let mut heatmaps = heat;
    if !create_graph {
        heatmaps = heatmaps.detach();
        context = GradCamContext {
            activations: context.activations.detach(),
            channel_weights: context.channel_weights.detach(),
            raw_map: context.raw_map.detach(),
        };
    }
    Ok(GradCamBatch {
        heatmaps,
        targets: targets.to_vec(),
        context,
    })
}

/// Grad-CAM for a batch `[N, C, H, W]`, at the model input resolution.
pub fn gradcam_batch<'g>(
    config: &ModelConfig,
    params: &ParamVars<'g>,
    images: &Var<'g>,
    targets: &[usize],
    create_graph: bool,
) -> Result<GradCamBatch<'g>> {
    let fwd = forward_with_activations(config, params, images)?;
    gradcam_from_forward(&fwd, targets, config.input_size, create_graph)
}

/// Grad-CAM for a single `[C, H, W]` image.
pub fn gradcam<'g>(
    config: &ModelConfig,
    params: &ParamVars<'g>,
    image: &Var<'g>,
    target_class: usize,
    create_graph: bool,
) -> Result<Heatmap<'g>> {
    let s = image.shape().to_vec();
    let batch = image.reshape(&[&[1], s.as_slice()].concat())?;
    gradcam_batch(config, params, &batch, &[target_class], create_graph)?.heatmap(0)
}

/// Detached heatmaps `[N, H, W]` for an image batch; `targets` of `None`
/// uses each image's predicted class.
pub fn heatmaps_for(
    config: &ModelConfig,
    params: &crate::nn::Parameters,
    images: &Tensor,
    targets: Option<&[usize]>,
) -> Result<(Tensor, Vec<usize>)> {
    let g = Graph::new();
    let p = params.bind_constant(&g);
    let x = g.param(images.clone());
    let fwd = forward_with_activations(config, &p, &x)?;
    let targets = match targets {
        Some(t) => t.to_vec(),
        None => crate::nn::predictions(fwd.logits.value()),
    };
    let batch = gradcam_from_forward(&fwd, &targets, config.input_size, false)?;
    Ok((batch.heatmaps.into_value(), targets))
}
