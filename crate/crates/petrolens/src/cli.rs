//! Command-line driver: synth, train, xval, eval, and explain subcommands
//! over one [`RunConfig`].
//!
//! Every command writes its fully-resolved configuration to
//! `<out_dir>/<run_name>/config.resolved` before doing anything else, so any
//! output tree documents the exact run that produced it. Exit codes are
//! stable: 0 success, 2 configuration errors, 3 data errors, 4 numeric
//! aborts, 1 everything else.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::{
    instantiate_model, load_corpus, ConfigError, ExplainMethodKey, ExplainTarget, LayerSel,
    RenderKind, RunConfig,
};
use crate::data::{
    resize_mask_nearest, resize_rgb, write_corpus, write_rgb_png, Corpus, DataError, Image,
    SplitTag,
};
use crate::explain::{
    artifact_name, attention_maps, pointing_game, render, rotation_stability, saliency,
    write_pointing_csv, ExplainError, PointingRow, RenderMode, SaliencyMap, SaliencyMethod,
};
use crate::model::{save_checkpoint, ModelError};
use crate::train::{
    aggregate_seeds, cross_validate, evaluate, misclassification_report, train, write_confusion_csv,
    write_history_csv, write_metrics_csv, GridPoint, TrainError,
};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Other(String),
}

pub fn exit_code(err: &CliError) -> i32 {
    match err {
        CliError::Config(_) => 2,
        CliError::Data(_) => 3,
        CliError::Numeric(_) => 4,
        CliError::Io { .. } | CliError::Other(_) => 1,
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { path, source } => CliError::Io { path, source },
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { path, source } => CliError::Io { path, source },
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidSpec(_) | ModelError::UnknownProbe(_) => {
                CliError::Config(e.to_string())
            }
            ModelError::Format { .. } | ModelError::Import(_) => CliError::Data(e.to_string()),
            ModelError::Io { path, source } => CliError::Io { path, source },
            ModelError::Tensor(_) => CliError::Other(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NanGradient { .. } | TrainError::NanLoss { .. } => {
                CliError::Numeric(e.to_string())
            }
            TrainError::Config(msg) => CliError::Config(msg),
            TrainError::Io { path, source } => CliError::Io { path, source },
            TrainError::Model(m) => m.into(),
            TrainError::Tensor(_) => CliError::Other(e.to_string()),
        }
    }
}

impl From<ExplainError> for CliError {
    fn from(e: ExplainError) -> Self {
        match e {
            ExplainError::UnsupportedArch { .. }
            | ExplainError::Config(_)
            | ExplainError::MissingNorm => CliError::Config(e.to_string()),
            ExplainError::Io { path, source } => CliError::Io { path, source },
            ExplainError::Model(m) => m.into(),
            ExplainError::Tensor(_) => CliError::Other(e.to_string()),
        }
    }
}

/// Train and explain thin-section image classifiers.
#[derive(Debug, Parser)]
#[command(name = "petrolens", version, about)]
pub struct Cli {
    /// Configuration file: key=value lines with dotted keys.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. --set train.lr=1e-4. Repeatable, applied in
    /// order after --config.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Worker threads for the matrix kernels. Outputs are bit-identical at
    /// any count; more than 1 turns deterministic mode off in the config.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    /// Force single-threaded deterministic mode.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus: class-labeled PNGs, ground-truth masks,
    /// and a manifest CSV.
    Synth,
    /// Train one model per seed; write checkpoints, history, per-seed
    /// metrics, and the seed aggregate.
    Train,
    /// Grid-search hyperparameters with k-fold cross-validation over the
    /// train split.
    Xval,
    /// Evaluate a checkpoint: metrics, confusion matrix, misclassification
    /// report.
    Eval,
    /// Render explanation maps for a checkpoint; pointing-game and rotation
    /// analyses where configured.
    Explain,
}

/// Assemble the effective config from file, --set overrides, and flags.
pub fn effective_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for item in &cli.set {
        let Some((key, value)) = item.split_once('=') else {
            return Err(CliError::Config(format!("--set {item:?}: expected key=value")));
        };
        config.apply(key.trim(), value.trim())?;
    }
    if let Some(threads) = cli.threads {
        config.threads = threads;
        if threads > 1 {
            config.deterministic = false;
        }
    }
    if cli.deterministic {
        config.deterministic = true;
        config.threads = 1;
    }
    config.validate()?;
    Ok(config)
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let config = effective_config(cli)?;
    if config.threads > 1 {
        rayon::ThreadPoolBuilder::new().num_threads(config.threads).build_global().ok();
    }
    crate::tensor::ops::set_parallel(config.threads > 1);
    match cli.command {
        Command::Synth => cmd_synth(&config),
        Command::Train => cmd_train(&config),
        Command::Xval => cmd_xval(&config),
        Command::Eval => cmd_eval(&config),
        Command::Explain => cmd_explain(&config),
    }
}

struct RunDirs {
    root: PathBuf,
    checkpoints: PathBuf,
    metrics: PathBuf,
    explain: PathBuf,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

/// Create the output tree and write the resolved-config echo.
fn prepare_dirs(config: &RunConfig) -> Result<RunDirs, CliError> {
    let root = Path::new(&config.out_dir).join(&config.run_name);
    let dirs = RunDirs {
        checkpoints: root.join("checkpoints"),
        metrics: root.join("metrics"),
        explain: root.join("explain"),
        root,
    };
    fs::create_dir_all(&dirs.root).map_err(io_err(&dirs.root))?;
    let echo = dirs.root.join("config.resolved");
    fs::write(&echo, config.resolved()).map_err(io_err(&echo))?;
    Ok(dirs)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(io_err(path))
}

pub fn cmd_synth(config: &RunConfig) -> Result<(), CliError> {
    let dirs = prepare_dirs(config)?;
    let spec = config.synth_spec();
    let corpus = crate::data::generate_synthetic(&spec)?;
    let corpus_dir = dirs.root.join("corpus");
    fs::create_dir_all(&corpus_dir).map_err(io_err(&corpus_dir))?;
    write_corpus(&corpus, &corpus_dir)?;

    let mut manifest = String::from("path,class,sample_id,polarization,magnification,mask\n");
    for sample in &corpus.samples {
        let class = &corpus.class_names[sample.label];
        let stem = sample.stem();
        let mask = if sample.mask.is_some() {
            format!("_masks/{stem}.png")
        } else {
            String::new()
        };
        writeln!(
            manifest,
            "{class}/{stem}.png,{class},{},{},{},{mask}",
            sample.sample_id, sample.polarization, sample.magnification
        )
        .expect("string write");
    }
    write_text(&corpus_dir.join("manifest.csv"), &manifest)?;
    println!(
        "wrote {} images across {} classes to {}",
        corpus.samples.len(),
        corpus.class_names.len(),
        corpus_dir.display()
    );
    Ok(())
}

pub fn cmd_train(config: &RunConfig) -> Result<(), CliError> {
    let dirs = prepare_dirs(config)?;
    fs::create_dir_all(&dirs.checkpoints).map_err(io_err(&dirs.checkpoints))?;
    fs::create_dir_all(&dirs.metrics).map_err(io_err(&dirs.metrics))?;
    let corpus = load_corpus(config)?;
    let has_test = !corpus.test_indices().is_empty();

    let mut reports = Vec::new();
    for &seed in &config.seeds {
        let mut model = instantiate_model(config, corpus.class_names.len())?;
        let train_config = config.train_config(seed)?;
        let history = train(&mut model, &corpus, &train_config)?;
        save_checkpoint(&model, &dirs.checkpoints.join(format!("seed{seed}.ckpt")))?;
        write_history_csv(&history, &dirs.metrics.join(format!("history_seed{seed}.csv")))?;
        if has_test {
            let report = evaluate(&model, &corpus, SplitTag::Test)?;
            write_metrics_csv(&report, seed, &dirs.metrics.join(format!("metrics_seed{seed}.csv")))?;
            write_confusion_csv(&report, &dirs.metrics.join(format!("confusion_seed{seed}.csv")))?;
            println!("seed {seed}: test accuracy {:.4}", report.accuracy);
            reports.push(report);
        } else {
            println!("seed {seed}: trained (no test split to evaluate)");
        }
    }

    if !reports.is_empty() {
        let aggregate = aggregate_seeds(&reports);
        let mut csv = String::from("metric,mean_pct,std_pct,runs,summary\n");
        for (metric, agg) in &aggregate {
            writeln!(csv, "{metric},{},{},{},{agg}", agg.mean, agg.std, agg.runs)
                .expect("string write");
        }
        write_text(&dirs.metrics.join("aggregate.csv"), &csv)?;
        let acc = &aggregate["accuracy"];
        let note = if acc.single_run { " (single run)" } else { "" };
        println!(
            "accuracy over {} seed(s): {:.2} ± {:.2}%{note}",
            reports.len(),
            acc.mean,
            acc.std
        );
    }
    Ok(())
}

pub fn cmd_xval(config: &RunConfig) -> Result<(), CliError> {
    let dirs = prepare_dirs(config)?;
    fs::create_dir_all(&dirs.metrics).map_err(io_err(&dirs.metrics))?;
    let corpus = load_corpus(config)?;

    let mut grid = Vec::new();
    for &lr in &config.xval_lr_grid {
        for &wd in &config.xval_wd_grid {
            grid.push(GridPoint { learning_rate: lr as f32, weight_decay: wd as f32 });
        }
    }
    let classes = corpus.class_names.len();
    let build = |_fold: usize| instantiate_model(config, classes);
    let base = config.train_config(config.seeds[0])?;
    let (results, best) = cross_validate(&build, &corpus, config.xval_k, &grid, &base)?;

    let mut csv = String::from("learning_rate,weight_decay,fold,accuracy\n");
    for result in &results {
        for (fold, acc) in result.fold_accuracies.iter().enumerate() {
            writeln!(
                csv,
                "{},{},{fold},{acc}",
                result.point.learning_rate, result.point.weight_decay
            )
            .expect("string write");
        }
        writeln!(
            csv,
            "{},{},mean,{}",
            result.point.learning_rate, result.point.weight_decay, result.mean_accuracy
        )
        .expect("string write");
    }
    write_text(&dirs.metrics.join("xval_grid.csv"), &csv)?;

    let fragment = format!(
        "train.lr={}\ntrain.weight_decay={}\n",
        best.learning_rate, best.weight_decay
    );
    write_text(&dirs.metrics.join("best_config.txt"), &fragment)?;
    println!(
        "best of {} grid points: lr={} wd={}",
        results.len(),
        best.learning_rate,
        best.weight_decay
    );
    Ok(())
}

fn split_indices(corpus: &Corpus, tag: SplitTag) -> Result<Vec<usize>, CliError> {
    let indices = match tag {
        SplitTag::Test => corpus.test_indices(),
        SplitTag::Train => corpus.train_indices(),
    };
    if indices.is_empty() {
        let name = if tag == SplitTag::Test { "test" } else { "train" };
        return Err(CliError::Data(format!("the {name} split is empty")));
    }
    Ok(indices)
}

pub fn cmd_eval(config: &RunConfig) -> Result<(), CliError> {
    if config.checkpoint.is_empty() {
        return Err(CliError::Config("eval requires model.checkpoint".into()));
    }
    let dirs = prepare_dirs(config)?;
    fs::create_dir_all(&dirs.metrics).map_err(io_err(&dirs.metrics))?;
    let corpus = load_corpus(config)?;
    split_indices(&corpus, config.eval_split)?;
    let model = instantiate_model(config, corpus.class_names.len())?;

    let report = evaluate(&model, &corpus, config.eval_split)?;
    write_metrics_csv(&report, config.seeds[0], &dirs.metrics.join("eval_metrics.csv"))?;
    write_confusion_csv(&report, &dirs.metrics.join("eval_confusion.csv"))?;

    let mis = misclassification_report(&model, &corpus, config.eval_split)?;
    let mut grouped = String::from("true_class,predicted_class,stem\n");
    for group in &mis.groups {
        for stem in &group.stems {
            writeln!(
                grouped,
                "{},{},{stem}",
                corpus.class_names[group.true_class], corpus.class_names[group.predicted]
            )
            .expect("string write");
        }
    }
    write_text(&dirs.metrics.join("misclassified.csv"), &grouped)?;

    let mut consistency = String::from("sample_id,images,true_class,predicted_class,consistent\n");
    for entry in &mis.consistency {
        writeln!(
            consistency,
            "{},{},{},{},{}",
            entry.sample_id,
            entry.images,
            corpus.class_names[entry.dominant_error.0],
            corpus.class_names[entry.dominant_error.1],
            entry.consistent
        )
        .expect("string write");
    }
    write_text(&dirs.metrics.join("consistency.csv"), &consistency)?;

    println!(
        "accuracy {:.4}, macro F1 {:.4}, {} misclassified",
        report.accuracy,
        report.macro_f1,
        mis.groups.iter().map(|g| g.stems.len()).sum::<usize>()
    );
    Ok(())
}

fn render_kind(config: &RunConfig) -> RenderMode {
    match config.explain_mode {
        RenderKind::Overlay => RenderMode::Overlay { alpha: config.explain_alpha as f32 },
        RenderKind::Masked => RenderMode::Masked { threshold: config.explain_threshold as f32 },
        RenderKind::Raw => RenderMode::Raw,
    }
}

fn save_map(
    dir: &Path,
    name: &str,
    image: &Image,
    map: &SaliencyMap,
    mode: RenderMode,
) -> Result<(), CliError> {
    let base = resize_rgb(image, map.w, map.h);
    let rendered = render(&base, map, mode)?;
    write_rgb_png(&rendered, &dir.join(name))?;
    Ok(())
}

pub fn cmd_explain(config: &RunConfig) -> Result<(), CliError> {
    if config.checkpoint.is_empty() {
        return Err(CliError::Config("explain requires model.checkpoint".into()));
    }
    let dirs = prepare_dirs(config)?;
    fs::create_dir_all(&dirs.explain).map_err(io_err(&dirs.explain))?;
    let corpus = load_corpus(config)?;
    let indices = split_indices(&corpus, config.eval_split)?;
    let model = instantiate_model(config, corpus.class_names.len())?;
    let res = model.spec.input_resolution();
    let mode = render_kind(config);
    let chosen: Vec<usize> = indices.into_iter().take(config.explain_count).collect();

    let mut sidecar = String::new();
    writeln!(sidecar, "method={}", config.explain_method.key()).expect("string write");
    writeln!(sidecar, "mode={}", mode.tag()).expect("string write");
    writeln!(sidecar, "alpha={}", config.explain_alpha).expect("string write");
    writeln!(sidecar, "threshold={}", config.explain_threshold).expect("string write");
    writeln!(sidecar, "normalization=per-map min-max; constant maps render as zeros")
        .expect("string write");
    if let Some(norm) = &model.norm {
        writeln!(sidecar, "input_mean={:?}", norm.mean).expect("string write");
        writeln!(sidecar, "input_std={:?}", norm.std).expect("string write");
    }
    writeln!(sidecar, "images={}", chosen.len()).expect("string write");

    if config.explain_method == ExplainMethodKey::Attention {
        let mut entropy = String::from("stem,layer,head,entropy\n");
        for &i in &chosen {
            let sample = &corpus.samples[i];
            let stack = attention_maps(&model, &sample.image)?;
            let predicted = crate::explain::predict(&model, &sample.image)?;
            let layer = match config.explain_layer {
                LayerSel::Last => stack.layers.len() - 1,
                LayerSel::Index(idx) => idx,
            };
            let values = stack.cls_map(layer, config.explain_head, res)?;
            let map = SaliencyMap {
                w: res,
                h: res,
                values,
                method: SaliencyMethod::GradCam,
                target_class: predicted,
            };
            let name = artifact_name(
                &sample.stem(),
                "attention",
                predicted,
                Some((layer, config.explain_head)),
                None,
                mode.tag(),
            );
            save_map(&dirs.explain, &name, &sample.image, &map, mode)?;
            if config.explain_rollout {
                let values = stack.rollout_map(res)?;
                let map = SaliencyMap { values, ..map };
                let name = artifact_name(
                    &sample.stem(),
                    "rollout",
                    predicted,
                    None,
                    None,
                    mode.tag(),
                );
                save_map(&dirs.explain, &name, &sample.image, &map, mode)?;
            }
            for l in 0..stack.layers.len() {
                for h in 0..stack.heads {
                    writeln!(entropy, "{},{l},{h},{}", sample.stem(), stack.cls_entropy(l, h)?)
                        .expect("string write");
                }
            }
        }
        write_text(&dirs.explain.join("attention_entropy.csv"), &entropy)?;
        writeln!(sidecar, "layer={:?} head={}", config.explain_layer, config.explain_head)
            .expect("string write");
        write_text(&dirs.explain.join("params.txt"), &sidecar)?;
        println!("wrote attention maps for {} image(s)", chosen.len());
        return Ok(());
    }

    let method = match config.explain_method {
        ExplainMethodKey::GradCam => SaliencyMethod::GradCam,
        ExplainMethodKey::GuidedBp => SaliencyMethod::GuidedBp,
        ExplainMethodKey::GuidedGradCam => SaliencyMethod::GuidedGradCam,
        ExplainMethodKey::Attention => unreachable!("handled above"),
    };

    if !config.explain_angles.is_empty() {
        let mut rotation = String::from("stem,stability,invariant_fraction\n");
        for &i in &chosen {
            let sample = &corpus.samples[i];
            let report =
                rotation_stability(&model, &sample.image, &config.explain_angles, method)?;
            for (deg, map) in report.angles.iter().zip(&report.maps) {
                let name = artifact_name(
                    &sample.stem(),
                    &method.to_string(),
                    map.target_class,
                    None,
                    Some(deg.round() as i32),
                    mode.tag(),
                );
                save_map(&dirs.explain, &name, &sample.image, map, mode)?;
            }
            writeln!(
                rotation,
                "{},{},{}",
                sample.stem(),
                report.stability,
                report.invariant_fraction
            )
            .expect("string write");
        }
        write_text(&dirs.explain.join("rotation.csv"), &rotation)?;
        writeln!(sidecar, "angles={:?}", config.explain_angles).expect("string write");
        write_text(&dirs.explain.join("params.txt"), &sidecar)?;
        println!("wrote rotation analyses for {} image(s)", chosen.len());
        return Ok(());
    }

    let mut pointing = Vec::new();
    for &i in &chosen {
        let sample = &corpus.samples[i];
        let target = match config.explain_target {
            ExplainTarget::Predicted => crate::explain::predict(&model, &sample.image)?,
            ExplainTarget::Class(c) => c,
        };
        let map = saliency(&model, &sample.image, method, target)?;
        let name = artifact_name(
            &sample.stem(),
            &method.to_string(),
            target,
            None,
            None,
            mode.tag(),
        );
        save_map(&dirs.explain, &name, &sample.image, &map, mode)?;
        if let Some(mask) = &sample.mask {
            let mask = if mask.w == map.w && mask.h == map.h {
                mask.clone()
            } else {
                resize_mask_nearest(mask, map.w, map.h)
            };
            pointing.push(PointingRow {
                stem: sample.stem(),
                method: method.to_string(),
                hit: pointing_game(&map, &mask)?,
            });
        }
    }
    if !pointing.is_empty() {
        write_pointing_csv(&pointing, &dirs.explain.join("pointing.csv"))?;
        let score = crate::explain::corpus_pointing_score(
            &pointing.iter().map(|r| r.hit).collect::<Vec<_>>(),
        );
        writeln!(sidecar, "pointing_score={score}").expect("string write");
    }
    write_text(&dirs.explain.join("params.txt"), &sidecar)?;
    println!("wrote {} saliency map(s)", chosen.len());
    Ok(())
}

