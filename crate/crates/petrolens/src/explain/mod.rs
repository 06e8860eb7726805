//! Explanation operators: Grad-CAM and guided variants for convolutional
//! models, attention extraction for transformers, rotation-stability
//! analysis, and rendering.

mod render;
mod rotate;

use std::path::PathBuf;

use crate::data::{image_to_input, Image, Normalization};
use crate::model::{Model, ModelError, ModelSpec, Probe};
use crate::tensor::{ops, BackwardMode, Tape, Tensor, TensorError};

pub use render::{
    artifact_name, colormap, corpus_pointing_score, pointing_game, render, resize_plane,
    write_pointing_csv, PointingRow, RenderMode,
};
pub use rotate::{center_crop, rotate_reflect, rotation_stability, top_decile_mask, RotationReport};

#[derive(Debug, thiserror::Error)]
pub enum ExplainError {
    #[error("{op} does not support this architecture; use {instead}")]
    UnsupportedArch { op: &'static str, instead: &'static str },
    #[error("explain config error: {0}")]
    Config(String),
    #[error("model carries no normalization statistics; train or import first")]
    MissingNorm,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SaliencyMethod {
    GradCam,
    GuidedBp,
    GuidedGradCam,
}

impl std::fmt::Display for SaliencyMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SaliencyMethod::GradCam => "gradcam",
            SaliencyMethod::GuidedBp => "guided_bp",
            SaliencyMethod::GuidedGradCam => "guided_gradcam",
        })
    }
}

/// A per-pixel relevance map over the model's input frame, min-max
/// normalized to [0, 1]. A constant raw map (no signal) normalizes to all
/// zeros rather than dividing by zero.
#[derive(Clone, Debug)]
pub struct SaliencyMap {
    pub w: usize,
    pub h: usize,
    pub values: Vec<f32>,
    pub method: SaliencyMethod,
    pub target_class: usize,
}

impl SaliencyMap {
    /// First raster-order index of the maximum value.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate().skip(1) {
            if v > self.values[best] {
                best = i;
            }
        }
        best
    }
}

/// Min-max normalize in place; constant input maps to all zeros.
pub fn normalize_map(values: &mut [f32]) {
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if hi > lo {
        for v in values.iter_mut() {
            *v = (*v - lo) / (hi - lo);
        }
    } else {
        values.fill(0.0);
    }
}

fn model_norm(model: &Model) -> Result<Normalization, ExplainError> {
    model.norm.ok_or(ExplainError::MissingNorm)
}

fn check_class(model: &Model, target_class: usize) -> Result<(), ExplainError> {
    let k = model.spec.num_classes();
    if target_class >= k {
        return Err(ExplainError::Config(format!(
            "target class {target_class} out of range for {k} classes"
        )));
    }
    Ok(())
}

/// The un-normalized Grad-CAM map at input resolution: spatial-mean
/// weights over the retained last-stage feature gradients, ReLU of the
/// weighted channel sum, bilinear upsampling. Non-negative by
/// construction; [`guided_grad_cam`] multiplies these values before any
/// normalization.
pub fn grad_cam_raw(
    model: &Model,
    image: &Image,
    target_class: usize,
) -> Result<Vec<f32>, ExplainError> {
    if matches!(model.spec, ModelSpec::Vit { .. }) {
        return Err(ExplainError::UnsupportedArch { op: "grad_cam", instead: "attention_maps" });
    }
    check_class(model, target_class)?;
    let res = model.spec.input_resolution();
    let x = image_to_input(image, res, &model_norm(model)?)?;

    let tape = Tape::new();
    let out = model.eval_forward(&tape, &x, &[Probe::Features])?;
    let features = out.features.expect("resnet forward honors the features probe");
    let target = ops::slice(&tape, &out.logits, 1, target_class, 1)?;
    let grads = tape.backward(&target)?;
    let g = grads
        .wrt(&features)
        .ok_or_else(|| ExplainError::Config("no gradient reached the probe".into()))?;

    let &[_, c, hh, ww] = features.shape() else { unreachable!("probe shape is [1,c,h,w]") };
    let plane = hh * ww;
    let mut coarse = vec![0.0f32; plane];
    for k in 0..c {
        let alpha: f32 =
            g.data()[k * plane..(k + 1) * plane].iter().sum::<f32>() / plane as f32;
        for (o, &a) in coarse.iter_mut().zip(&features.data()[k * plane..(k + 1) * plane]) {
            *o += alpha * a;
        }
    }
    for v in &mut coarse {
        *v = v.max(0.0);
    }
    Ok(resize_plane(&coarse, ww, hh, res, res))
}

/// Coarse class-discriminative localization from the last convolutional
/// stage, upsampled to the input frame.
pub fn grad_cam(
    model: &Model,
    image: &Image,
    target_class: usize,
) -> Result<SaliencyMap, ExplainError> {
    let mut values = grad_cam_raw(model, image, target_class)?;
    normalize_map(&mut values);
    let res = model.spec.input_resolution();
    Ok(SaliencyMap {
        w: res,
        h: res,
        values,
        method: SaliencyMethod::GradCam,
        target_class,
    })
}

/// The un-normalized guided-backprop map: input gradient of the target
/// logit under the gated ReLU backward, channel-maxed and clamped to be
/// non-negative.
pub fn guided_backprop_raw(
    model: &Model,
    image: &Image,
    target_class: usize,
) -> Result<Vec<f32>, ExplainError> {
    check_class(model, target_class)?;
    let res = model.spec.input_resolution();
    let x = image_to_input(image, res, &model_norm(model)?)?.requires_grad(true);

    let tape = Tape::new();
    let out = model.eval_forward(&tape, &x, &[])?;
    let target = ops::slice(&tape, &out.logits, 1, target_class, 1)?;
    let grads = tape.backward_with_mode(&target, BackwardMode::Guided)?;
    let g = grads
        .wrt(&x)
        .ok_or_else(|| ExplainError::Config("no gradient reached the input".into()))?;

    let plane = res * res;
    let gd = g.data();
    let values = (0..plane)
        .map(|i| gd[i].max(gd[plane + i]).max(gd[2 * plane + i]).max(0.0))
        .collect();
    Ok(values)
}

/// Pixel-resolution relevance from gated input gradients. The gate exists
/// only on this tape's backward pass; training tapes use the standard
/// mode and are unaffected.
pub fn guided_backprop(
    model: &Model,
    image: &Image,
    target_class: usize,
) -> Result<SaliencyMap, ExplainError> {
    let mut values = guided_backprop_raw(model, image, target_class)?;
    normalize_map(&mut values);
    let res = model.spec.input_resolution();
    Ok(SaliencyMap {
        w: res,
        h: res,
        values,
        method: SaliencyMethod::GuidedBp,
        target_class,
    })
}

/// Elementwise product of the raw (pre-normalization) Grad-CAM and
/// guided-backprop maps, normalized once at the end. Its support is
/// contained in the Grad-CAM support by construction.
pub fn guided_grad_cam(
    model: &Model,
    image: &Image,
    target_class: usize,
) -> Result<SaliencyMap, ExplainError> {
    let cam = grad_cam_raw(model, image, target_class)?;
    let guided = guided_backprop_raw(model, image, target_class)?;
    let mut values: Vec<f32> = cam.iter().zip(&guided).map(|(&a, &b)| a * b).collect();
    normalize_map(&mut values);
    let res = model.spec.input_resolution();
    Ok(SaliencyMap {
        w: res,
        h: res,
        values,
        method: SaliencyMethod::GuidedGradCam,
        target_class,
    })
}

pub fn saliency(
    model: &Model,
    image: &Image,
    method: SaliencyMethod,
    target_class: usize,
) -> Result<SaliencyMap, ExplainError> {
    match method {
        SaliencyMethod::GradCam => grad_cam(model, image, target_class),
        SaliencyMethod::GuidedBp => guided_backprop(model, image, target_class),
        SaliencyMethod::GuidedGradCam => guided_grad_cam(model, image, target_class),
    }
}

/// Every layer's softmaxed attention from one forward pass, plus the
/// CLS-row readouts used for visualization and entropy analysis.
#[derive(Debug)]
pub struct AttentionStack {
    pub heads: usize,
    pub tokens: usize,
    pub grid_side: usize,
    /// One [1, heads, tokens, tokens] tensor per layer, in depth order.
    pub layers: Vec<Tensor>,
}

impl AttentionStack {
    /// CLS-to-patch attention of one head: the CLS query row without the
    /// CLS column, reshaped to the patch grid in raster order. Entries
    /// are non-negative softmax mass.
    pub fn cls_grid(&self, layer: usize, head: usize) -> Result<Vec<f32>, ExplainError> {
        if layer >= self.layers.len() || head >= self.heads {
            return Err(ExplainError::Config(format!(
                "layer {layer} head {head} out of range for {} layers x {} heads",
                self.layers.len(),
                self.heads
            )));
        }
        let t = self.tokens;
        let data = self.layers[layer].data();
        let row = &data[head * t * t..head * t * t + t];
        Ok(row[1..].to_vec())
    }

    /// Shannon entropy (nats) of one head's CLS-to-patch distribution,
    /// renormalized over the patches.
    pub fn cls_entropy(&self, layer: usize, head: usize) -> Result<f64, ExplainError> {
        let grid = self.cls_grid(layer, head)?;
        let total: f64 = grid.iter().map(|&v| v as f64).sum();
        if total <= 0.0 {
            return Ok(0.0);
        }
        let mut h = 0.0;
        for &v in &grid {
            let p = v as f64 / total;
            if p > 0.0 {
                h -= p * p.ln();
            }
        }
        Ok(h)
    }

    /// Mean CLS entropy over all heads of one layer.
    pub fn mean_entropy(&self, layer: usize) -> Result<f64, ExplainError> {
        let mut sum = 0.0;
        for head in 0..self.heads {
            sum += self.cls_entropy(layer, head)?;
        }
        Ok(sum / self.heads as f64)
    }

    /// One head's CLS grid as a normalized saliency map at the given
    /// resolution.
    pub fn cls_map(
        &self,
        layer: usize,
        head: usize,
        res: usize,
    ) -> Result<Vec<f32>, ExplainError> {
        let grid = self.cls_grid(layer, head)?;
        let mut values = resize_plane(&grid, self.grid_side, self.grid_side, res, res);
        normalize_map(&mut values);
        Ok(values)
    }

    /// Attention rollout: head-averaged attention blended half-and-half
    /// with identity (the residual path), multiplied across all layers,
    /// row-renormalized at every step. Returns the final CLS-to-patch
    /// distribution; an optional aggregate, not the per-head default.
    pub fn rollout_grid(&self) -> Result<Vec<f32>, ExplainError> {
        let t = self.tokens;
        // rollout starts as identity; each layer left-multiplies
        let mut r = vec![0.0f64; t * t];
        for i in 0..t {
            r[i * t + i] = 1.0;
        }
        let mut layer_avg = vec![0.0f64; t * t];
        let mut next = vec![0.0f64; t * t];
        for attn in &self.layers {
            let data = attn.data();
            layer_avg.iter_mut().for_each(|v| *v = 0.0);
            for head in 0..self.heads {
                let block = &data[head * t * t..(head + 1) * t * t];
                for (acc, &v) in layer_avg.iter_mut().zip(block) {
                    *acc += v as f64 / self.heads as f64;
                }
            }
            for i in 0..t {
                layer_avg[i * t + i] += 1.0;
                let row = &mut layer_avg[i * t..(i + 1) * t];
                let sum: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= sum);
            }
            for i in 0..t {
                for j in 0..t {
                    let mut acc = 0.0;
                    for k in 0..t {
                        acc += layer_avg[i * t + k] * r[k * t + j];
                    }
                    next[i * t + j] = acc;
                }
            }
            std::mem::swap(&mut r, &mut next);
        }
        Ok(r[1..t].iter().map(|&v| v as f32).collect())
    }

    /// The rollout grid as a normalized saliency map at the given
    /// resolution.
    pub fn rollout_map(&self, res: usize) -> Result<Vec<f32>, ExplainError> {
        let grid = self.rollout_grid()?;
        let mut values = resize_plane(&grid, self.grid_side, self.grid_side, res, res);
        normalize_map(&mut values);
        Ok(values)
    }
}

/// Capture the full attention stack of a transformer in one eval forward.
pub fn attention_maps(model: &Model, image: &Image) -> Result<AttentionStack, ExplainError> {
    let ModelSpec::Vit { heads, .. } = model.spec else {
        return Err(ExplainError::UnsupportedArch { op: "attention_maps", instead: "grad_cam" });
    };
    let res = model.spec.input_resolution();
    let x = image_to_input(image, res, &model_norm(model)?)?;
    let tape = Tape::inference();
    let out = model.eval_forward(&tape, &x, &[Probe::Attention])?;
    let tokens = out.attention[0].shape()[2];
    let grid_side = ((tokens - 1) as f64).sqrt() as usize;
    debug_assert_eq!(grid_side * grid_side + 1, tokens);
    Ok(AttentionStack { heads, tokens, grid_side, layers: out.attention })
}

/// The model's predicted class for one image (ties to the lowest index).
pub fn predict(model: &Model, image: &Image) -> Result<usize, ExplainError> {
    let res = model.spec.input_resolution();
    let x = image_to_input(image, res, &model_norm(model)?)?;
    let tape = Tape::inference();
    let logits = model.eval_forward(&tape, &x, &[])?.logits;
    let row = logits.data();
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    Ok(best)
}
