//! Run configuration: a flat `key=value` file with dotted keys.
//!
//! Every key has a default, unknown keys are rejected, and [`RunConfig::resolved`]
//! echoes the complete effective configuration (defaults included) in a form
//! that parses back to an identical config. That echo is written next to every
//! command's outputs so a run can always be reproduced from its artifacts.

use std::path::PathBuf;

use crate::data::{AugmentPolicy, DataError, SplitTag, SynthSpec};
use crate::model::{Model, ModelError, ModelSpec, TrainPolicy};
use crate::train::{Scheduler, TrainConfig};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("config key {key}: {reason}")]
    BadValue { key: String, reason: String },
    #[error("config line {line}: expected key=value, got {text:?}")]
    BadLine { line: usize, text: String },
    #[error("{0}")]
    Invalid(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    Dir,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthPreset {
    Demo4,
    Fabric10,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArchKind {
    Resnet18,
    Vit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExplainMethodKey {
    GradCam,
    GuidedBp,
    GuidedGradCam,
    Attention,
}

impl ExplainMethodKey {
    /// Config keyword, also the method tag in artifact names.
    pub fn key(self) -> &'static str {
        match self {
            ExplainMethodKey::GradCam => "gradcam",
            ExplainMethodKey::GuidedBp => "guided_bp",
            ExplainMethodKey::GuidedGradCam => "guided_gradcam",
            ExplainMethodKey::Attention => "attention",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExplainTarget {
    /// Explain the model's own prediction for each image.
    Predicted,
    Class(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RenderKind {
    Overlay,
    Masked,
    Raw,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SchedKind {
    None,
    Plateau,
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSel {
    /// The deepest transformer layer.
    Last,
    /// Zero-based layer index.
    Index(usize),
}

/// The complete, flat configuration of one run. Field groups mirror the
/// dotted key prefixes; see `apply` for the exhaustive key list.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub run_name: String,
    pub out_dir: String,
    pub threads: usize,
    pub deterministic: bool,

    pub data_source: DataSource,
    pub data_dir: String,
    pub split_fraction: f64,
    pub split_seed: u64,
    pub group_by_sample: bool,
    pub synth_preset: SynthPreset,
    pub synth_per_class: usize,
    /// 0 keeps the preset's native canvas size.
    pub synth_image_size: usize,
    pub synth_seed: u64,

    pub arch: ArchKind,
    /// 0 means "infer from the corpus".
    pub classes: usize,
    pub resolution: usize,
    pub model_seed: u64,
    pub resnet_channels: [usize; 4],
    pub resnet_blocks: [usize; 4],
    pub vit_patch: usize,
    pub vit_depth: usize,
    pub vit_heads: usize,
    pub vit_hidden: usize,
    pub vit_mlp: usize,
    /// Empty means "build fresh"; otherwise load this checkpoint.
    pub checkpoint: String,
    /// 0 keeps the loaded head; otherwise replace it for this many classes.
    pub replace_head: usize,

    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub scheduler: SchedKind,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub plateau_min_delta: f64,
    pub cosine_final_fraction: f64,
    pub policy: TrainPolicy,
    pub seeds: Vec<u64>,
    pub aug_hflip: f64,
    pub aug_vflip: f64,
    pub aug_jitter: f64,
    pub aug_crop_lo: f64,
    pub aug_crop_hi: f64,

    pub xval_k: usize,
    pub xval_lr_grid: Vec<f64>,
    pub xval_wd_grid: Vec<f64>,

    pub eval_split: SplitTag,

    pub explain_method: ExplainMethodKey,
    pub explain_target: ExplainTarget,
    pub explain_mode: RenderKind,
    pub explain_alpha: f64,
    pub explain_threshold: f64,
    pub explain_count: usize,
    pub explain_layer: LayerSel,
    pub explain_head: usize,
    pub explain_rollout: bool,
    pub explain_angles: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run_name: "run".into(),
            out_dir: "runs".into(),
            threads: 1,
            deterministic: true,

            data_source: DataSource::Synthetic,
            data_dir: String::new(),
            split_fraction: 0.8,
            split_seed: 17,
            group_by_sample: false,
            synth_preset: SynthPreset::Demo4,
            synth_per_class: 50,
            synth_image_size: 0,
            synth_seed: 7,

            arch: ArchKind::Resnet18,
            classes: 0,
            resolution: 224,
            model_seed: 1,
            resnet_channels: [64, 128, 256, 512],
            resnet_blocks: [2, 2, 2, 2],
            vit_patch: 16,
            vit_depth: 12,
            vit_heads: 6,
            vit_hidden: 384,
            vit_mlp: 1536,
            checkpoint: String::new(),
            replace_head: 0,

            epochs: 10,
            batch_size: 20,
            lr: 3e-4,
            weight_decay: 3e-4,
            scheduler: SchedKind::Plateau,
            plateau_factor: 0.1,
            plateau_patience: 5,
            plateau_min_delta: 1e-4,
            cosine_final_fraction: 0.0,
            policy: TrainPolicy::Full,
            seeds: vec![1],
            aug_hflip: 0.5,
            aug_vflip: 0.5,
            aug_jitter: 0.2,
            aug_crop_lo: 0.8,
            aug_crop_hi: 1.0,

            xval_k: 3,
            xval_lr_grid: vec![3e-4, 1e-4],
            xval_wd_grid: vec![3e-4, 1e-4, 1e-5],

            eval_split: SplitTag::Test,

            explain_method: ExplainMethodKey::GuidedGradCam,
            explain_target: ExplainTarget::Predicted,
            explain_mode: RenderKind::Overlay,
            explain_alpha: 0.5,
            explain_threshold: 0.5,
            explain_count: 8,
            explain_layer: LayerSel::Last,
            explain_head: 0,
            explain_rollout: false,
            explain_angles: Vec::new(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str, what: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        key: key.into(),
        reason: format!("{value:?} is not {what}"),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(ConfigError::BadValue {
            key: key.into(),
            reason: format!("{value:?} is not true|false"),
        }),
    }
}

fn parse_list<T: std::str::FromStr>(
    key: &str,
    value: &str,
    what: &str,
) -> Result<Vec<T>, ConfigError> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|part| parse_num(key, part.trim(), what)).collect()
}

fn parse_four(key: &str, value: &str) -> Result<[usize; 4], ConfigError> {
    let list: Vec<usize> = parse_list(key, value, "a positive integer")?;
    list.try_into().map_err(|_| ConfigError::BadValue {
        key: key.into(),
        reason: "expected exactly 4 comma-separated integers".into(),
    })
}

fn bad(key: &str, value: &str, options: &str) -> ConfigError {
    ConfigError::BadValue {
        key: key.into(),
        reason: format!("{value:?} is not one of {options}"),
    }
}

fn join<T: std::fmt::Display>(values: &[T]) -> String {
    values.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Set one dotted key. The match below is the single authority on the
    /// key namespace; `resolved` echoes exactly these keys.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "run.name" => self.run_name = value.into(),
            "run.out_dir" => self.out_dir = value.into(),
            "run.threads" => {
                self.threads = parse_num(key, value, "a positive integer")?;
                if self.threads == 0 {
                    return Err(ConfigError::BadValue {
                        key: key.into(),
                        reason: "thread count must be at least 1".into(),
                    });
                }
            }
            "run.deterministic" => self.deterministic = parse_bool(key, value)?,

            "data.source" => {
                self.data_source = match value {
                    "synthetic" => DataSource::Synthetic,
                    "dir" => DataSource::Dir,
                    _ => return Err(bad(key, value, "synthetic|dir")),
                }
            }
            "data.dir" => self.data_dir = value.into(),
            "data.split" => self.split_fraction = parse_num(key, value, "a fraction")?,
            "data.split_seed" => self.split_seed = parse_num(key, value, "an integer")?,
            "data.group_by_sample" => self.group_by_sample = parse_bool(key, value)?,
            "data.synth.preset" => {
                self.synth_preset = match value {
                    "demo4" => SynthPreset::Demo4,
                    "fabric10" => SynthPreset::Fabric10,
                    _ => return Err(bad(key, value, "demo4|fabric10")),
                }
            }
            "data.synth.per_class" => {
                self.synth_per_class = parse_num(key, value, "a positive integer")?
            }
            "data.synth.image_size" => {
                self.synth_image_size = parse_num(key, value, "a positive integer")?
            }
            "data.synth.seed" => self.synth_seed = parse_num(key, value, "an integer")?,

            "model.arch" => {
                self.arch = match value {
                    "resnet18" => ArchKind::Resnet18,
                    "vit" => ArchKind::Vit,
                    _ => return Err(bad(key, value, "resnet18|vit")),
                }
            }
            "model.classes" => self.classes = parse_num(key, value, "an integer")?,
            "model.resolution" => self.resolution = parse_num(key, value, "a positive integer")?,
            "model.seed" => self.model_seed = parse_num(key, value, "an integer")?,
            "model.resnet.channels" => self.resnet_channels = parse_four(key, value)?,
            "model.resnet.blocks" => self.resnet_blocks = parse_four(key, value)?,
            "model.vit.patch" => self.vit_patch = parse_num(key, value, "a positive integer")?,
            "model.vit.depth" => self.vit_depth = parse_num(key, value, "a positive integer")?,
            "model.vit.heads" => self.vit_heads = parse_num(key, value, "a positive integer")?,
            "model.vit.hidden" => self.vit_hidden = parse_num(key, value, "a positive integer")?,
            "model.vit.mlp" => self.vit_mlp = parse_num(key, value, "a positive integer")?,
            "model.checkpoint" => self.checkpoint = value.into(),
            "model.replace_head" => self.replace_head = parse_num(key, value, "an integer")?,

            "train.epochs" => self.epochs = parse_num(key, value, "an integer")?,
            "train.batch_size" => self.batch_size = parse_num(key, value, "a positive integer")?,
            "train.lr" => self.lr = parse_num(key, value, "a number")?,
            "train.weight_decay" => self.weight_decay = parse_num(key, value, "a number")?,
            "train.scheduler" => {
                self.scheduler = match value {
                    "none" => SchedKind::None,
                    "plateau" => SchedKind::Plateau,
                    "cosine" => SchedKind::Cosine,
                    _ => return Err(bad(key, value, "none|plateau|cosine")),
                }
            }
            "train.plateau.factor" => self.plateau_factor = parse_num(key, value, "a number")?,
            "train.plateau.patience" => {
                self.plateau_patience = parse_num(key, value, "an integer")?
            }
            "train.plateau.min_delta" => {
                self.plateau_min_delta = parse_num(key, value, "a number")?
            }
            "train.cosine.final_fraction" => {
                self.cosine_final_fraction = parse_num(key, value, "a number")?
            }
            "train.policy" => {
                self.policy = match value {
                    "full" => TrainPolicy::Full,
                    "head_only" => TrainPolicy::HeadOnly,
                    _ => return Err(bad(key, value, "full|head_only")),
                }
            }
            "train.seeds" => {
                let seeds: Vec<u64> = parse_list(key, value, "an integer")?;
                if seeds.is_empty() {
                    return Err(ConfigError::BadValue {
                        key: key.into(),
                        reason: "at least one seed is required".into(),
                    });
                }
                self.seeds = seeds;
            }
            "train.augment.hflip" => self.aug_hflip = parse_num(key, value, "a probability")?,
            "train.augment.vflip" => self.aug_vflip = parse_num(key, value, "a probability")?,
            "train.augment.jitter" => self.aug_jitter = parse_num(key, value, "a number")?,
            "train.augment.crop_lo" => self.aug_crop_lo = parse_num(key, value, "a fraction")?,
            "train.augment.crop_hi" => self.aug_crop_hi = parse_num(key, value, "a fraction")?,

            "xval.k" => self.xval_k = parse_num(key, value, "an integer")?,
            "xval.lr_grid" => {
                self.xval_lr_grid = parse_list(key, value, "a number")?;
                if self.xval_lr_grid.is_empty() {
                    return Err(ConfigError::BadValue {
                        key: key.into(),
                        reason: "the learning-rate grid cannot be empty".into(),
                    });
                }
            }
            "xval.wd_grid" => {
                self.xval_wd_grid = parse_list(key, value, "a number")?;
                if self.xval_wd_grid.is_empty() {
                    return Err(ConfigError::BadValue {
                        key: key.into(),
                        reason: "the weight-decay grid cannot be empty".into(),
                    });
                }
            }

            "eval.split" => {
                self.eval_split = match value {
                    "test" => SplitTag::Test,
                    "train" => SplitTag::Train,
                    _ => return Err(bad(key, value, "test|train")),
                }
            }

            "explain.method" => {
                self.explain_method = match value {
                    "gradcam" => ExplainMethodKey::GradCam,
                    "guided_bp" => ExplainMethodKey::GuidedBp,
                    "guided_gradcam" => ExplainMethodKey::GuidedGradCam,
                    "attention" => ExplainMethodKey::Attention,
                    _ => return Err(bad(key, value, "gradcam|guided_bp|guided_gradcam|attention")),
                }
            }
            "explain.target" => {
                self.explain_target = if value == "predicted" {
                    ExplainTarget::Predicted
                } else {
                    ExplainTarget::Class(parse_num(key, value, "predicted|a class index")?)
                }
            }
            "explain.mode" => {
                self.explain_mode = match value {
                    "overlay" => RenderKind::Overlay,
                    "masked" => RenderKind::Masked,
                    "raw" => RenderKind::Raw,
                    _ => return Err(bad(key, value, "overlay|masked|raw")),
                }
            }
            "explain.alpha" => self.explain_alpha = parse_num(key, value, "a number")?,
            "explain.threshold" => self.explain_threshold = parse_num(key, value, "a number")?,
            "explain.count" => self.explain_count = parse_num(key, value, "an integer")?,
            "explain.layer" => {
                self.explain_layer = if value == "last" {
                    LayerSel::Last
                } else {
                    LayerSel::Index(parse_num(key, value, "last|a layer index")?)
                }
            }
            "explain.head" => self.explain_head = parse_num(key, value, "an integer")?,
            "explain.rollout" => self.explain_rollout = parse_bool(key, value)?,
            "explain.angles" => self.explain_angles = parse_list(key, value, "a number")?,

            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// Apply a whole `key=value` document on top of the current values.
    /// Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::BadLine { line: i + 1, text: raw.into() });
            };
            self.apply(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let mut config = RunConfig::default();
        config.apply_text(&text)?;
        Ok(config)
    }

    /// The complete effective configuration, one key per line, in the fixed
    /// namespace order. Parsing this text onto defaults reproduces `self`.
    pub fn resolved(&self) -> String {
        let target = match self.explain_target {
            ExplainTarget::Predicted => "predicted".to_string(),
            ExplainTarget::Class(c) => c.to_string(),
        };
        let layer = match self.explain_layer {
            LayerSel::Last => "last".to_string(),
            LayerSel::Index(i) => i.to_string(),
        };
        let lines: Vec<(&str, String)> = vec![
            ("run.name", self.run_name.clone()),
            ("run.out_dir", self.out_dir.clone()),
            ("run.threads", self.threads.to_string()),
            ("run.deterministic", self.deterministic.to_string()),
            (
                "data.source",
                match self.data_source {
                    DataSource::Synthetic => "synthetic".into(),
                    DataSource::Dir => "dir".into(),
                },
            ),
            ("data.dir", self.data_dir.clone()),
            ("data.split", self.split_fraction.to_string()),
            ("data.split_seed", self.split_seed.to_string()),
            ("data.group_by_sample", self.group_by_sample.to_string()),
            (
                "data.synth.preset",
                match self.synth_preset {
                    SynthPreset::Demo4 => "demo4".into(),
                    SynthPreset::Fabric10 => "fabric10".into(),
                },
            ),
            ("data.synth.per_class", self.synth_per_class.to_string()),
            ("data.synth.image_size", self.synth_image_size.to_string()),
            ("data.synth.seed", self.synth_seed.to_string()),
            (
                "model.arch",
                match self.arch {
                    ArchKind::Resnet18 => "resnet18".into(),
                    ArchKind::Vit => "vit".into(),
                },
            ),
            ("model.classes", self.classes.to_string()),
            ("model.resolution", self.resolution.to_string()),
            ("model.seed", self.model_seed.to_string()),
            ("model.resnet.channels", join(&self.resnet_channels)),
            ("model.resnet.blocks", join(&self.resnet_blocks)),
            ("model.vit.patch", self.vit_patch.to_string()),
            ("model.vit.depth", self.vit_depth.to_string()),
            ("model.vit.heads", self.vit_heads.to_string()),
            ("model.vit.hidden", self.vit_hidden.to_string()),
            ("model.vit.mlp", self.vit_mlp.to_string()),
            ("model.checkpoint", self.checkpoint.clone()),
            ("model.replace_head", self.replace_head.to_string()),
            ("train.epochs", self.epochs.to_string()),
            ("train.batch_size", self.batch_size.to_string()),
            ("train.lr", self.lr.to_string()),
            ("train.weight_decay", self.weight_decay.to_string()),
            (
                "train.scheduler",
                match self.scheduler {
                    SchedKind::None => "none".into(),
                    SchedKind::Plateau => "plateau".into(),
                    SchedKind::Cosine => "cosine".into(),
                },
            ),
            ("train.plateau.factor", self.plateau_factor.to_string()),
            ("train.plateau.patience", self.plateau_patience.to_string()),
            ("train.plateau.min_delta", self.plateau_min_delta.to_string()),
            ("train.cosine.final_fraction", self.cosine_final_fraction.to_string()),
            (
                "train.policy",
                match self.policy {
                    TrainPolicy::Full => "full".into(),
                    TrainPolicy::HeadOnly => "head_only".into(),
                },
            ),
            ("train.seeds", join(&self.seeds)),
            ("train.augment.hflip", self.aug_hflip.to_string()),
            ("train.augment.vflip", self.aug_vflip.to_string()),
            ("train.augment.jitter", self.aug_jitter.to_string()),
            ("train.augment.crop_lo", self.aug_crop_lo.to_string()),
            ("train.augment.crop_hi", self.aug_crop_hi.to_string()),
            ("xval.k", self.xval_k.to_string()),
            ("xval.lr_grid", join(&self.xval_lr_grid)),
            ("xval.wd_grid", join(&self.xval_wd_grid)),
            (
                "eval.split",
                match self.eval_split {
                    SplitTag::Test => "test".into(),
                    SplitTag::Train => "train".into(),
                },
            ),
            ("explain.method", self.explain_method.key().into()),
            ("explain.target", target),
            (
                "explain.mode",
                match self.explain_mode {
                    RenderKind::Overlay => "overlay".into(),
                    RenderKind::Masked => "masked".into(),
                    RenderKind::Raw => "raw".into(),
                },
            ),
            ("explain.alpha", self.explain_alpha.to_string()),
            ("explain.threshold", self.explain_threshold.to_string()),
            ("explain.count", self.explain_count.to_string()),
            ("explain.layer", layer),
            ("explain.head", self.explain_head.to_string()),
            ("explain.rollout", self.explain_rollout.to_string()),
            ("explain.angles", join(&self.explain_angles)),
        ];
        let mut out = String::new();
        for (key, value) in lines {
            out.push_str(key);
            out.push('=');
            out.push_str(&value);
            out.push('\n');
        }
        out
    }

    /// The synthetic-corpus spec this config describes.
    pub fn synth_spec(&self) -> SynthSpec {
        let mut spec = match self.synth_preset {
            SynthPreset::Demo4 => SynthSpec::demo4(self.synth_per_class, self.synth_seed),
            SynthPreset::Fabric10 => SynthSpec::fabric10(self.synth_per_class, self.synth_seed),
        };
        if self.synth_image_size != 0 {
            spec.image_size = self.synth_image_size;
        }
        spec
    }

    /// The model spec for `classes` output classes.
    pub fn model_spec(&self, classes: usize) -> ModelSpec {
        match self.arch {
            ArchKind::Resnet18 => ModelSpec::Resnet18 {
                num_classes: classes,
                input_resolution: self.resolution,
                stage_channels: self.resnet_channels,
                blocks_per_stage: self.resnet_blocks,
            },
            ArchKind::Vit => ModelSpec::Vit {
                num_classes: classes,
                input_resolution: self.resolution,
                patch_size: self.vit_patch,
                depth: self.vit_depth,
                heads: self.vit_heads,
                hidden_dim: self.vit_hidden,
                mlp_dim: self.vit_mlp,
            },
        }
    }

    /// The training configuration for one seed.
    pub fn train_config(&self, seed: u64) -> Result<TrainConfig, ConfigError> {
        let scheduler = match self.scheduler {
            SchedKind::None => Scheduler::None,
            SchedKind::Plateau => Scheduler::Plateau {
                factor: self.plateau_factor as f32,
                patience: self.plateau_patience,
                min_delta: self.plateau_min_delta,
            },
            SchedKind::Cosine => Scheduler::Cosine {
                final_fraction: self.cosine_final_fraction as f32,
            },
        };
        let augment = AugmentPolicy::new(
            self.aug_hflip as f32,
            self.aug_vflip as f32,
            self.aug_jitter as f32,
            (self.aug_crop_lo as f32, self.aug_crop_hi as f32),
            self.resolution,
        )
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let mut config = TrainConfig::new(self.epochs, self.lr as f32, seed, self.resolution);
        config.batch_size = self.batch_size;
        config.weight_decay = self.weight_decay as f32;
        config.scheduler = scheduler;
        config.policy = self.policy;
        config.augment = augment;
        config.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(config)
    }

    /// Cross-command validation that individual setters cannot see.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.deterministic && self.threads != 1 {
            return Err(ConfigError::Invalid(format!(
                "deterministic mode requires run.threads=1, got {}",
                self.threads
            )));
        }
        if self.data_source == DataSource::Dir && self.data_dir.is_empty() {
            return Err(ConfigError::Invalid(
                "data.source=dir requires data.dir to be set".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.split_fraction) {
            return Err(ConfigError::Invalid(format!(
                "data.split {} outside [0, 1]",
                self.split_fraction
            )));
        }
        if self.run_name.is_empty()
            || self.run_name.contains('/')
            || self.run_name.contains("..")
        {
            return Err(ConfigError::Invalid(format!(
                "run.name {:?} must be a plain directory name",
                self.run_name
            )));
        }
        Ok(())
    }
}

/// Build or load the model a config describes, for a corpus with
/// `corpus_classes` classes. `model.classes` overrides inference; a loaded
/// checkpoint keeps its own head unless `model.replace_head` is set.
pub fn instantiate_model(config: &RunConfig, corpus_classes: usize) -> Result<Model, ModelError> {
    if !config.checkpoint.is_empty() {
        let model = crate::model::load_checkpoint(std::path::Path::new(&config.checkpoint))?;
        if config.replace_head != 0 {
            return model.replace_head(config.replace_head, config.model_seed);
        }
        return Ok(model);
    }
    let classes = if config.classes != 0 { config.classes } else { corpus_classes };
    Model::build(&config.model_spec(classes), config.model_seed)
}

/// Materialize the corpus a config describes, split tags included.
pub fn load_corpus(config: &RunConfig) -> Result<crate::data::Corpus, DataError> {
    let mut corpus = match config.data_source {
        DataSource::Synthetic => crate::data::generate_synthetic(&config.synth_spec())?,
        DataSource::Dir => {
            let root = std::path::Path::new(&config.data_dir);
            if !root.is_dir() {
                return Err(DataError::InvalidSpec(format!(
                    "data directory {} does not exist",
                    root.display()
                )));
            }
            let outcome = crate::data::scan_corpus(root)?;
            for (path, reason) in &outcome.rejects {
                eprintln!("rejected {}: {reason}", path.display());
            }
            outcome.corpus
        }
    };
    crate::data::stratified_split(
        &mut corpus,
        config.split_fraction,
        config.split_seed,
        config.group_by_sample,
    )?;
    Ok(corpus)
}
