//! Model zoo: ResNet-18 and ViT with structural hyperparameters fixed at
//! build time, transfer-learning controls, and a bit-exact checkpoint
//! format.
//!
//! A [`Model`] is plain data: named parameter and buffer maps plus a
//! [`ModelSpec`]. Forward passes thread every op through a [`Tape`], so the
//! same code path serves training, evaluation, and explanation; train-mode
//! calls additionally commit updated batch-norm running estimates.

use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::data::Normalization;
use crate::tensor::ops::{self, Phase};
use crate::tensor::{Tape, Tensor, TensorError};

pub mod checkpoint;
mod init;
mod resnet;
mod vit;

pub use checkpoint::{
    export_named_tensors, identity_name_map, import_named_tensors, load_checkpoint,
    save_checkpoint,
};
pub use resnet::eval_block;

const BN_MOMENTUM: f32 = 0.1;
const BN_EPS: f32 = 1e-5;
const LN_EPS: f32 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("unknown probe point {0} for this architecture")]
    UnknownProbe(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint format error at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },
    #[error("import error: {0}")]
    Import(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Structural hyperparameters. Everything that determines parameter shapes
/// lives here; the spec is serialized into every checkpoint.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case")]
pub enum ModelSpec {
    Resnet18 {
        num_classes: usize,
        input_resolution: usize,
        stage_channels: [usize; 4],
        blocks_per_stage: [usize; 4],
    },
    Vit {
        num_classes: usize,
        input_resolution: usize,
        patch_size: usize,
        depth: usize,
        heads: usize,
        hidden_dim: usize,
        mlp_dim: usize,
    },
}

impl ModelSpec {
    /// The canonical 18-layer plan: stem + 2 blocks of two 3x3 convs per
    /// stage (16 convs) + fc head = 18 weight layers.
    pub fn resnet18(num_classes: usize) -> ModelSpec {
        ModelSpec::Resnet18 {
            num_classes,
            input_resolution: 224,
            stage_channels: [64, 128, 256, 512],
            blocks_per_stage: [2, 2, 2, 2],
        }
    }

    /// DeiT-Small geometry: 16px patches, 12 blocks, 6 heads of width 64.
    pub fn deit_small(num_classes: usize) -> ModelSpec {
        ModelSpec::Vit {
            num_classes,
            input_resolution: 224,
            patch_size: 16,
            depth: 12,
            heads: 6,
            hidden_dim: 384,
            mlp_dim: 1536,
        }
    }

    pub fn num_classes(&self) -> usize {
        match *self {
            ModelSpec::Resnet18 { num_classes, .. } | ModelSpec::Vit { num_classes, .. } => {
                num_classes
            }
        }
    }

    pub fn input_resolution(&self) -> usize {
        match *self {
            ModelSpec::Resnet18 { input_resolution, .. }
            | ModelSpec::Vit { input_resolution, .. } => input_resolution,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.num_classes() == 0 {
            return Err(ModelError::InvalidSpec("num_classes must be positive".into()));
        }
        match *self {
            ModelSpec::Resnet18 { input_resolution, stage_channels, blocks_per_stage, .. } => {
                if input_resolution < 32 || input_resolution % 32 != 0 {
                    return Err(ModelError::InvalidSpec(format!(
                        "resnet input resolution {input_resolution} must be a positive multiple of 32"
                    )));
                }
                if stage_channels.iter().any(|&c| c == 0) {
                    return Err(ModelError::InvalidSpec(format!(
                        "stage channels {stage_channels:?} must all be positive"
                    )));
                }
                if blocks_per_stage.iter().any(|&b| b == 0) {
                    return Err(ModelError::InvalidSpec(format!(
                        "blocks per stage {blocks_per_stage:?} must all be positive"
                    )));
                }
            }
            ModelSpec::Vit {
                input_resolution, patch_size, depth, heads, hidden_dim, mlp_dim, ..
            } => {
                if patch_size == 0 || input_resolution % patch_size != 0 {
                    return Err(ModelError::InvalidSpec(format!(
                        "resolution {input_resolution} is not divisible by patch size {patch_size}"
                    )));
                }
                if heads == 0 || hidden_dim % heads != 0 {
                    return Err(ModelError::InvalidSpec(format!(
                        "hidden dim {hidden_dim} is not divisible by {heads} heads"
                    )));
                }
                if depth == 0 || mlp_dim == 0 {
                    return Err(ModelError::InvalidSpec(
                        "depth and mlp_dim must be positive".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// What a forward pass should expose besides logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Probe {
    /// Last-stage convolutional feature maps (resnet only), with gradient
    /// retention enabled when the tape records.
    Features,
    /// Per-layer, per-head attention matrices (vit only).
    Attention,
}

pub struct ForwardOutput {
    pub logits: Tensor,
    /// Present iff [`Probe::Features`] was requested.
    pub features: Option<Tensor>,
    /// One `[n, heads, tokens, tokens]` tensor per block, in depth order,
    /// iff [`Probe::Attention`] was requested.
    pub attention: Vec<Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainPolicy {
    /// Only the classifier head trains; batch-norm layers run in eval mode
    /// so frozen backbones stay bit-identical.
    HeadOnly,
    /// Every parameter trains.
    Full,
}

#[derive(Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: BTreeMap<String, Tensor>,
    pub buffers: BTreeMap<String, Tensor>,
    pub trainable: BTreeMap<String, bool>,
    /// Input normalization the model was trained with; rides along in
    /// checkpoints so evaluation uses the training-time statistics.
    pub norm: Option<Normalization>,
}

impl Model {
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Model, ModelError> {
        spec.validate()?;
        match spec {
            ModelSpec::Resnet18 { .. } => resnet::build(spec, seed),
            ModelSpec::Vit { .. } => vit::build(spec, seed),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn param(&self, name: &str) -> &Tensor {
        &self.params[name]
    }

    /// Training forward: batch-norm layers whose parameters are trainable
    /// consume batch statistics and their running estimates are updated in
    /// place; frozen ones behave as in eval.
    pub fn train_forward(
        &mut self,
        tape: &Tape,
        x: &Tensor,
        capture: &[Probe],
    ) -> Result<ForwardOutput, ModelError> {
        let (out, updates) = self.forward_impl(tape, x, Phase::Train, capture)?;
        for (name, value) in updates {
            self.buffers.insert(name, value);
        }
        Ok(out)
    }

    /// Evaluation forward: running statistics only, no mutation, safe to
    /// share the model across threads.
    pub fn eval_forward(
        &self,
        tape: &Tape,
        x: &Tensor,
        capture: &[Probe],
    ) -> Result<ForwardOutput, ModelError> {
        let (out, updates) = self.forward_impl(tape, x, Phase::Eval, capture)?;
        debug_assert!(updates.is_empty());
        Ok(out)
    }

    fn forward_impl(
        &self,
        tape: &Tape,
        x: &Tensor,
        phase: Phase,
        capture: &[Probe],
    ) -> Result<(ForwardOutput, Vec<(String, Tensor)>), ModelError> {
        let res = self.spec.input_resolution();
        let n = *x.shape().first().unwrap_or(&0);
        if x.shape() != [n, 3, res, res] || n == 0 {
            return Err(ModelError::InvalidSpec(format!(
                "input shape {:?} does not match spec resolution [n, 3, {res}, {res}]",
                x.shape()
            )));
        }
        for probe in capture {
            let ok = match (probe, &self.spec) {
                (Probe::Features, ModelSpec::Resnet18 { .. }) => true,
                (Probe::Attention, ModelSpec::Vit { .. }) => true,
                _ => false,
            };
            if !ok {
                return Err(ModelError::UnknownProbe(format!("{probe:?}")));
            }
        }
        match &self.spec {
            ModelSpec::Resnet18 { .. } => resnet::forward(self, tape, x, phase, capture),
            ModelSpec::Vit { .. } => vit::forward(self, tape, x, capture),
        }
    }

    /// Re-initialize the classifier head for a new class count; every other
    /// parameter, buffer, and trainable flag is carried over untouched.
    pub fn replace_head(&self, new_num_classes: usize, seed: u64) -> Result<Model, ModelError> {
        if new_num_classes == 0 {
            return Err(ModelError::InvalidSpec("num_classes must be positive".into()));
        }
        let mut spec = self.spec.clone();
        match &mut spec {
            ModelSpec::Resnet18 { num_classes, .. } | ModelSpec::Vit { num_classes, .. } => {
                *num_classes = new_num_classes;
            }
        }
        let mut params = self.params.clone();
        let mut trainable = self.trainable.clone();
        let head = head_prefix(&self.spec);
        let feature_dim = self.params[&format!("{head}.weight")].shape()[0];
        let mut rng = init::param_stream(seed);
        let (w, b) = match self.spec {
            ModelSpec::Resnet18 { .. } => (
                init::he_normal(&mut rng, &[feature_dim, new_num_classes], feature_dim),
                Tensor::zeros(&[new_num_classes]),
            ),
            ModelSpec::Vit { .. } => (
                init::trunc_normal(&mut rng, &[feature_dim, new_num_classes], 0.02),
                Tensor::zeros(&[new_num_classes]),
            ),
        };
        for (suffix, tensor) in [("weight", w), ("bias", b)] {
            let name = format!("{head}.{suffix}");
            let flag = *trainable.get(&name).unwrap_or(&true);
            params.insert(name.clone(), tensor.requires_grad(flag));
            trainable.insert(name, flag);
        }
        Ok(Model {
            spec,
            params,
            buffers: self.buffers.clone(),
            trainable,
            norm: self.norm,
        })
    }

    /// Set the trainable mask and mirror it into each parameter's
    /// requires_grad flag, so backward skips frozen subgraphs entirely.
    pub fn set_trainable(&mut self, policy: TrainPolicy) {
        let head = head_prefix(&self.spec);
        let names: Vec<String> = self.params.keys().cloned().collect();
        for name in names {
            let flag = match policy {
                TrainPolicy::Full => true,
                TrainPolicy::HeadOnly => name.starts_with(&format!("{head}.")),
            };
            let t = self.params.remove(&name).unwrap().requires_grad(flag);
            self.params.insert(name.clone(), t);
            self.trainable.insert(name, flag);
        }
    }

    /// Names of parameters currently marked trainable, in map order.
    pub fn trainable_names(&self) -> Vec<String> {
        self.trainable
            .iter()
            .filter_map(|(n, &t)| t.then(|| n.clone()))
            .collect()
    }
}

fn head_prefix(spec: &ModelSpec) -> &'static str {
    match spec {
        ModelSpec::Resnet18 { .. } => "fc",
        ModelSpec::Vit { .. } => "head",
    }
}

/// y = x W + b for x `[rows, in]`, W `[in, out]`, b `[out]`.
fn linear(tape: &Tape, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let y = ops::matmul(tape, x, w)?;
    ops::add(tape, &y, b)
}

/// Batch norm through the model's named parameters and buffers. Returns
/// the output plus, when the layer actually ran in train phase, the
/// updated running stats keyed by buffer name.
#[allow(clippy::type_complexity)]
fn named_batch_norm(
    model: &Model,
    tape: &Tape,
    x: &Tensor,
    prefix: &str,
    phase: Phase,
) -> Result<(Tensor, Vec<(String, Tensor)>), ModelError> {
    let gamma_name = format!("{prefix}.gamma");
    let gamma = &model.params[&gamma_name];
    let beta = &model.params[&format!("{prefix}.beta")];
    let mean_name = format!("{prefix}.running_mean");
    let var_name = format!("{prefix}.running_var");
    let running = (&model.buffers[&mean_name], &model.buffers[&var_name]);

    // frozen batch norm runs in eval phase: running stats stay bit-identical
    let layer_phase = if phase == Phase::Train && model.trainable[&gamma_name] {
        Phase::Train
    } else {
        Phase::Eval
    };
    let out = ops::batch_norm2d(
        tape,
        x,
        gamma,
        beta,
        Some(running),
        layer_phase,
        BN_MOMENTUM,
        BN_EPS,
    )?;
    let mut updates = Vec::new();
    if let Some((mean, var)) = out.running {
        updates.push((mean_name, mean));
        updates.push((var_name, var));
    }
    Ok((out.output, updates))
}
