//! Confusion-matrix metrics, seed aggregation, and the misclassification
//! report, plus the CSV emitters the command-line tools write.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use crate::data::{Corpus, SplitTag};
use crate::model::Model;

use super::{predict_batches, TrainError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub class_names: Vec<String>,
    /// confusion[true][predicted], raw counts.
    pub confusion: Vec<Vec<usize>>,
    pub total: usize,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

impl MetricsReport {
    /// Build every derived metric from a raw confusion matrix. Division by
    /// an empty row or column yields 0, as does F1 of two zeros.
    pub fn from_confusion(class_names: &[String], confusion: Vec<Vec<usize>>) -> MetricsReport {
        let k = class_names.len();
        assert!(confusion.len() == k && confusion.iter().all(|r| r.len() == k));
        let total: usize = confusion.iter().flatten().sum();
        let trace: usize = (0..k).map(|i| confusion[i][i]).sum();
        let accuracy = if total == 0 { 0.0 } else { trace as f64 / total as f64 };

        let per_class: Vec<ClassMetrics> = (0..k)
            .map(|c| {
                let tp = confusion[c][c];
                let col: usize = (0..k).map(|r| confusion[r][c]).sum();
                let row: usize = confusion[c].iter().sum();
                let precision = if col == 0 { 0.0 } else { tp as f64 / col as f64 };
                let recall = if row == 0 { 0.0 } else { tp as f64 / row as f64 };
                let f1 = if precision + recall == 0.0 {
                    0.0
                } else {
                    2.0 * precision * recall / (precision + recall)
                };
                ClassMetrics { precision, recall, f1 }
            })
            .collect();

        let mean = |f: &dyn Fn(&ClassMetrics) -> f64| {
            per_class.iter().map(|c| f(c)).sum::<f64>() / k as f64
        };
        MetricsReport {
            class_names: class_names.to_vec(),
            total,
            accuracy,
            macro_precision: mean(&|c| c.precision),
            macro_recall: mean(&|c| c.recall),
            macro_f1: mean(&|c| c.f1),
            per_class,
            confusion,
        }
    }
}

/// Run the model over one split in eval mode (no augmentation) and count
/// the full confusion matrix. Ties in the logits go to the lowest class
/// index.
pub fn evaluate(model: &Model, corpus: &Corpus, tag: SplitTag) -> Result<MetricsReport, TrainError> {
    let indices = match tag {
        SplitTag::Train => corpus.train_indices(),
        SplitTag::Test => corpus.test_indices(),
    };
    if indices.is_empty() {
        return Err(TrainError::Config(format!("no samples tagged {tag:?}")));
    }
    let k = corpus.class_names.len();
    let mut confusion = vec![vec![0usize; k]; k];
    for (index, predicted) in indices.iter().zip(predict_batches(model, corpus, &indices)?) {
        confusion[corpus.samples[*index].label][predicted] += 1;
    }
    Ok(MetricsReport::from_confusion(&corpus.class_names, confusion))
}

/// Mean and sample (n-1) standard deviation over repeated runs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeedAggregate {
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
    /// A single run has no spread to report; std is 0 and this flag warns
    /// the reader not to read precision into it.
    pub single_run: bool,
}

impl SeedAggregate {
    pub fn from_values(values: &[f64]) -> SeedAggregate {
        assert!(!values.is_empty(), "aggregate of zero runs");
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        // identical runs have exactly zero spread; the general formula
        // would round the mean and report ~1e-16
        let std = if n < 2 || values.iter().all(|v| *v == values[0]) {
            0.0
        } else {
            let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
            (ss / (n - 1) as f64).sqrt()
        };
        SeedAggregate { mean, std, runs: n, single_run: n == 1 }
    }
}

impl fmt::Display for SeedAggregate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} \u{b1} {:.2}", self.mean, self.std)?;
        if self.single_run {
            write!(f, " (single run)")?;
        }
        Ok(())
    }
}

/// Aggregate the headline metrics of several same-shaped reports.
///
/// Values are scaled to percent so the `mean ± std` summaries read like
/// results tables (92.11 ± 0.44); per-run reports stay in fractions.
pub fn aggregate_seeds(reports: &[MetricsReport]) -> BTreeMap<String, SeedAggregate> {
    let collect = |f: &dyn Fn(&MetricsReport) -> f64| {
        SeedAggregate::from_values(&reports.iter().map(|r| 100.0 * f(r)).collect::<Vec<_>>())
    };
    let mut out = BTreeMap::new();
    out.insert("accuracy".into(), collect(&|r| r.accuracy));
    out.insert("macro_precision".into(), collect(&|r| r.macro_precision));
    out.insert("macro_recall".into(), collect(&|r| r.macro_recall));
    out.insert("macro_f1".into(), collect(&|r| r.macro_f1));
    out
}

#[derive(Clone, Debug)]
pub struct MisclassGroup {
    pub true_class: usize,
    pub predicted: usize,
    /// Filename stems of every misclassified image, in corpus order.
    pub stems: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct ConsistencyEntry {
    pub sample_id: String,
    /// Images of this sample id in the evaluated split.
    pub images: usize,
    /// The (true, predicted) error most of its images share.
    pub dominant_error: (usize, usize),
    /// How many images share that exact error.
    pub consistent: usize,
}

/// Errors grouped by (true, predicted), and per-sample-id consistency:
/// a physical section whose images all fail the same way points at the
/// section, not the model.
#[derive(Clone, Debug)]
pub struct MisclassReport {
    pub groups: Vec<MisclassGroup>,
    /// Sorted by consistent count descending, then sample id.
    pub consistency: Vec<ConsistencyEntry>,
}

pub fn misclassification_report(
    model: &Model,
    corpus: &Corpus,
    tag: SplitTag,
) -> Result<MisclassReport, TrainError> {
    let indices = match tag {
        SplitTag::Train => corpus.train_indices(),
        SplitTag::Test => corpus.test_indices(),
    };
    if indices.is_empty() {
        return Err(TrainError::Config(format!("no samples tagged {tag:?}")));
    }
    let predictions = predict_batches(model, corpus, &indices)?;

    let mut by_pair: BTreeMap<(usize, usize), Vec<String>> = BTreeMap::new();
    let mut by_id: BTreeMap<String, (usize, BTreeMap<(usize, usize), usize>)> = BTreeMap::new();
    for (&index, &predicted) in indices.iter().zip(&predictions) {
        let s = &corpus.samples[index];
        let seen = by_id.entry(s.sample_id.clone()).or_default();
        seen.0 += 1;
        if predicted != s.label {
            by_pair.entry((s.label, predicted)).or_default().push(s.stem());
            *seen.1.entry((s.label, predicted)).or_default() += 1;
        }
    }

    let groups = by_pair
        .into_iter()
        .map(|((true_class, predicted), stems)| MisclassGroup { true_class, predicted, stems })
        .collect();

    let mut consistency: Vec<ConsistencyEntry> = by_id
        .into_iter()
        .filter_map(|(sample_id, (images, errors))| {
            let (&dominant_error, &consistent) =
                errors.iter().max_by_key(|&(pair, &n)| (n, std::cmp::Reverse(*pair)))?;
            Some(ConsistencyEntry { sample_id, images, dominant_error, consistent })
        })
        .collect();
    consistency.sort_by(|a, b| {
        b.consistent.cmp(&a.consistent).then_with(|| a.sample_id.cmp(&b.sample_id))
    });
    Ok(MisclassReport { groups, consistency })
}

fn write(path: &Path, text: String) -> Result<(), TrainError> {
    std::fs::write(path, text)
        .map_err(|source| TrainError::Io { path: path.to_path_buf(), source })
}

/// `metric,class,value,run_seed` rows: accuracy and macro rows carry an
/// empty class field.
pub fn write_metrics_csv(
    report: &MetricsReport,
    seed: u64,
    path: &Path,
) -> Result<(), TrainError> {
    let mut out = String::from("metric,class,value,run_seed\n");
    out.push_str(&format!("accuracy,,{},{seed}\n", report.accuracy));
    for (name, m) in report.class_names.iter().zip(&report.per_class) {
        out.push_str(&format!("precision,{name},{},{seed}\n", m.precision));
        out.push_str(&format!("recall,{name},{},{seed}\n", m.recall));
        out.push_str(&format!("f1,{name},{},{seed}\n", m.f1));
    }
    out.push_str(&format!("macro_precision,,{},{seed}\n", report.macro_precision));
    out.push_str(&format!("macro_recall,,{},{seed}\n", report.macro_recall));
    out.push_str(&format!("macro_f1,,{},{seed}\n", report.macro_f1));
    write(path, out)
}

/// Confusion matrix as a grid: header row of predicted class names, one
/// row per true class.
pub fn write_confusion_csv(report: &MetricsReport, path: &Path) -> Result<(), TrainError> {
    let mut out = String::from("true\\predicted");
    for name in &report.class_names {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (name, row) in report.class_names.iter().zip(&report.confusion) {
        out.push_str(name);
        for count in row {
            out.push_str(&format!(",{count}"));
        }
        out.push('\n');
    }
    write(path, out)
}
