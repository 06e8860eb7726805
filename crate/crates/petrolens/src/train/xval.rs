//! K-fold cross-validation over a hyperparameter grid. Validation runs on
//! held-out folds of the train split; the test split never participates.

use crate::data::{kfold, Corpus, SplitTag};
use crate::model::{Model, ModelError};

use super::{evaluate, train, TrainConfig, TrainError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridPoint {
    pub learning_rate: f32,
    pub weight_decay: f32,
}

#[derive(Clone, Debug)]
pub struct GridResult {
    pub point: GridPoint,
    /// Held-out-fold validation accuracy, one entry per fold.
    pub fold_accuracies: Vec<f64>,
    pub mean_accuracy: f64,
}

/// Re-tag the corpus so the given fold is the validation (test) split and
/// the remaining train-tagged samples stay train. Samples outside the
/// original train split are dropped entirely.
fn fold_corpus(corpus: &Corpus, fold: &[usize]) -> Corpus {
    let mut sub = Corpus {
        samples: Vec::new(),
        class_names: corpus.class_names.clone(),
        split: Vec::new(),
        norm: None,
    };
    for &i in &corpus.train_indices() {
        sub.samples.push(corpus.samples[i].clone());
        sub.split.push(if fold.contains(&i) { SplitTag::Test } else { SplitTag::Train });
    }
    sub
}

/// Train every grid point on each of the k folds and rank by mean
/// validation accuracy. `build` makes a fresh model for a fold index, so
/// each grid point starts from identical initializations and the
/// comparison isolates the hyperparameters.
///
/// Ties go to the lower learning rate, then the lower weight decay.
pub fn cross_validate(
    build: &dyn Fn(usize) -> Result<Model, ModelError>,
    corpus: &Corpus,
    k: usize,
    grid: &[GridPoint],
    base: &TrainConfig,
) -> Result<(Vec<GridResult>, GridPoint), TrainError> {
    if grid.is_empty() {
        return Err(TrainError::Config("empty hyperparameter grid".into()));
    }
    let folds = kfold(corpus, k, base.seed)
        .map_err(|e| TrainError::Config(format!("kfold: {e}")))?;

    let mut results = Vec::with_capacity(grid.len());
    for &point in grid {
        let mut fold_accuracies = Vec::with_capacity(k);
        for (f, fold) in folds.iter().enumerate() {
            let sub = fold_corpus(corpus, fold);
            let mut model = build(f)?;
            let config = TrainConfig {
                learning_rate: point.learning_rate,
                weight_decay: point.weight_decay,
                ..base.clone()
            };
            train(&mut model, &sub, &config)?;
            fold_accuracies.push(evaluate(&model, &sub, SplitTag::Test)?.accuracy);
        }
        let mean_accuracy = fold_accuracies.iter().sum::<f64>() / k as f64;
        results.push(GridResult { point, fold_accuracies, mean_accuracy });
    }

    let best = results
        .iter()
        .map(|r| {
            (
                -r.mean_accuracy,
                r.point.learning_rate,
                r.point.weight_decay,
                r.point,
            )
        })
        .min_by(|a, b| {
            (a.0, a.1, a.2)
                .partial_cmp(&(b.0, b.1, b.2))
                .expect("accuracies and grid values are finite")
        })
        .map(|(_, _, _, p)| p)
        .expect("grid is non-empty");
    Ok((results, best))
}
