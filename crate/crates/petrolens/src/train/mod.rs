//! The optimization loop and everything it reports: schedulers, metrics,
//! seed aggregation, cross-validation, and misclassification analysis.

mod metrics;
mod optim;
mod xval;

use std::path::{Path, PathBuf};

use std::collections::BTreeMap;

use crate::data::{augment, compute_normalization, rng, to_batch, AugmentPolicy, Corpus, Sample, SplitTag};
use crate::model::{Model, ModelError, TrainPolicy};
use crate::tensor::{ops, Tape, TensorError};

pub use metrics::{
    aggregate_seeds, evaluate, misclassification_report, write_confusion_csv, write_metrics_csv,
    ClassMetrics, ConsistencyEntry, MetricsReport, MisclassGroup, MisclassReport, SeedAggregate,
};
pub use optim::{cosine_lr, AdamW, LrScheduler};
pub use xval::{cross_validate, GridPoint, GridResult};

/// Epoch-keyed batch shuffle stream.
const SHUFFLE_LANE: u64 = 0x7e;
/// Per-sample augmentation stream; indexed by (epoch, corpus index).
const AUGMENT_LANE: u64 = 0xa6;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("config error: {0}")]
    Config(String),
    #[error("NaN gradient for parameter {param}; aborting the step")]
    NanGradient { param: String },
    #[error("loss became non-finite at epoch {epoch}, batch {batch}")]
    NanLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scheduler {
    None,
    Plateau { factor: f32, patience: usize, min_delta: f64 },
    Cosine { final_fraction: f32 },
}

impl Scheduler {
    /// Reduce-on-plateau with the conventional defaults.
    pub fn plateau() -> Scheduler {
        Scheduler::Plateau { factor: 0.1, patience: 5, min_delta: 1e-4 }
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub weight_decay: f32,
    pub scheduler: Scheduler,
    pub seed: u64,
    pub policy: TrainPolicy,
    pub augment: AugmentPolicy,
}

impl TrainConfig {
    /// Sensible defaults for the synthetic tasks; callers override the
    /// fields they care about.
    pub fn new(epochs: usize, learning_rate: f32, seed: u64, resolution: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 20,
            learning_rate,
            weight_decay: 0.0,
            scheduler: Scheduler::None,
            seed,
            policy: TrainPolicy::Full,
            augment: AugmentPolicy::identity(resolution),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(TrainError::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be at least 1".into()));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(TrainError::Config(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// One line of the training history; serialized to CSV as
/// `epoch,train_acc,test_acc,lr,loss`. `test_acc` is NaN when the corpus
/// has no test split; it is recorded for visualization only and never
/// feeds back into training.
#[derive(Clone, Copy, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_acc: f64,
    pub test_acc: f64,
    pub lr: f32,
    pub loss: f64,
}

pub fn write_history_csv(history: &[EpochRecord], path: &Path) -> Result<(), TrainError> {
    let mut out = String::from("epoch,train_acc,test_acc,lr,loss\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.train_acc, r.test_acc, r.lr, r.loss
        ));
    }
    std::fs::write(path, out)
        .map_err(|source| TrainError::Io { path: path.to_path_buf(), source })
}

fn fisher_yates(items: &mut [usize], rng: &mut rand_chacha::ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        items.swap(i, rng::uniform_int(rng, 0, i));
    }
}

/// Argmax with ties resolved to the lowest index.
fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

const EVAL_BATCH: usize = 32;

/// Predicted class per requested corpus index, running the model in eval
/// mode without augmentation. Batch composition cannot affect results:
/// every per-sample computation is independent in eval mode.
pub(crate) fn predict_batches(
    model: &Model,
    corpus: &Corpus,
    indices: &[usize],
) -> Result<Vec<usize>, TrainError> {
    let norm = model
        .norm
        .or(corpus.norm)
        .ok_or_else(|| TrainError::Config("no normalization statistics available".into()))?;
    let res = model.spec.input_resolution();
    let classes = corpus.class_names.len();
    if classes != model.spec.num_classes() {
        return Err(TrainError::Config(format!(
            "corpus has {classes} classes but the model head has {}",
            model.spec.num_classes()
        )));
    }
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(EVAL_BATCH) {
        let refs: Vec<&Sample> = chunk.iter().map(|&i| &corpus.samples[i]).collect();
        let (x, _) = to_batch(&refs, res, &norm)?;
        let tape = Tape::inference();
        let logits = model.eval_forward(&tape, &x, &[])?.logits;
        for row in logits.data().chunks(classes) {
            out.push(argmax(row));
        }
    }
    Ok(out)
}

fn split_accuracy(model: &Model, corpus: &Corpus, tag: SplitTag) -> Result<f64, TrainError> {
    let indices = match tag {
        SplitTag::Train => corpus.train_indices(),
        SplitTag::Test => corpus.test_indices(),
    };
    if indices.is_empty() {
        return Ok(f64::NAN);
    }
    let predictions = predict_batches(model, corpus, &indices)?;
    let hits = indices
        .iter()
        .zip(&predictions)
        .filter(|(&i, &p)| corpus.samples[i].label == p)
        .count();
    Ok(hits as f64 / indices.len() as f64)
}

/// Train `model` in place over the corpus's train split and return the
/// per-epoch history.
///
/// Each epoch reshuffles the train indices from an epoch-keyed stream and
/// walks them in batches (the last short batch included). Augmentation
/// draws come from a per-(epoch, sample) stream, so results are
/// reproducible bit for bit regardless of batch composition. The reported
/// train accuracy is measured on the augmented training batches
/// themselves; test accuracy is measured after the epoch in eval mode.
pub fn train(
    model: &mut Model,
    corpus: &Corpus,
    config: &TrainConfig,
) -> Result<Vec<EpochRecord>, TrainError> {
    config.validate()?;
    let train_indices = corpus.train_indices();
    if train_indices.is_empty() {
        return Err(TrainError::Config("corpus has no train-tagged samples".into()));
    }
    let res = model.spec.input_resolution();
    if config.augment.out_res != res {
        return Err(TrainError::Config(format!(
            "augmentation emits {} px but the model expects {res} px",
            config.augment.out_res
        )));
    }
    if corpus.class_names.len() != model.spec.num_classes() {
        return Err(TrainError::Config(format!(
            "corpus has {} classes but the model head has {}",
            corpus.class_names.len(),
            model.spec.num_classes()
        )));
    }

    let norm = corpus.norm.unwrap_or_else(|| {
        let images: Vec<&crate::data::Image> =
            train_indices.iter().map(|&i| &corpus.samples[i].image).collect();
        compute_normalization(&images, res)
    });
    model.norm = Some(norm);
    model.set_trainable(config.policy);

    let mut opt = AdamW::new(config.learning_rate, config.weight_decay);
    let mut sched = LrScheduler::new(config.scheduler, config.learning_rate);
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let lr = sched.epoch_lr(epoch, config.epochs);
        opt.lr = lr;

        let mut order = train_indices.clone();
        fisher_yates(&mut order, &mut rng::stream(config.seed, SHUFFLE_LANE, epoch as u64));

        let mut loss_sum = 0.0f64;
        let mut hits = 0usize;
        for (batch_no, chunk) in order.chunks(config.batch_size).enumerate() {
            let augmented: Vec<Sample> = chunk
                .iter()
                .map(|&i| {
                    let s = &corpus.samples[i];
                    let mut draw = rng::stream(
                        config.seed,
                        AUGMENT_LANE,
                        ((epoch as u64) << 32) | i as u64,
                    );
                    let (image, _) = augment(&s.image, None, &config.augment, &mut draw);
                    Sample { image, mask: None, ..s.clone() }
                })
                .collect();
            let refs: Vec<&Sample> = augmented.iter().collect();
            let (x, labels) = to_batch(&refs, res, &norm)?;

            let tape = Tape::new();
            let out = model.train_forward(&tape, &x, &[])?;
            let loss = ops::cross_entropy_loss(&tape, &out.logits, &labels)?;
            let loss_value = loss.data()[0] as f64;
            if !loss_value.is_finite() {
                return Err(TrainError::NanLoss { epoch: epoch + 1, batch: batch_no + 1 });
            }
            loss_sum += loss_value * labels.len() as f64;

            let classes = corpus.class_names.len();
            for (row, &label) in out.logits.data().chunks(classes).zip(&labels) {
                if argmax(row) == label {
                    hits += 1;
                }
            }

            let grads = tape.backward(&loss)?;
            let mut grad_map = BTreeMap::new();
            for name in model.trainable_names() {
                if let Some(g) = grads.wrt(model.param(&name)) {
                    grad_map.insert(name, g.clone());
                }
            }
            opt.step(&mut model.params, &grad_map)?;
        }

        let loss = loss_sum / order.len() as f64;
        sched.observe(loss);
        history.push(EpochRecord {
            epoch: epoch + 1,
            train_acc: hits as f64 / order.len() as f64,
            test_acc: split_accuracy(model, corpus, SplitTag::Test)?,
            lr,
            loss,
        });
    }
    Ok(history)
}
