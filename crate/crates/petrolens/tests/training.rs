//! Optimizer and scheduler contracts against closed-form oracles, the
//! training loop's reproducibility guarantees, and metric exactness
//! against independent counting.

mod common;

use std::collections::BTreeMap;

use petrolens::data::{
    generate_synthetic, stratified_split, Recipe, ShapeFamily, SplitTag, SynthSpec,
};
use petrolens::model::{Model, ModelSpec, TrainPolicy};
use petrolens::tensor::Tensor;
use petrolens::train::{
    aggregate_seeds, cosine_lr, cross_validate, evaluate, misclassification_report, train,
    write_history_csv, AdamW, GridPoint, LrScheduler, MetricsReport, Scheduler, SeedAggregate,
    TrainConfig, TrainError,
};

fn scalar_params(value: f32) -> BTreeMap<String, Tensor> {
    let mut params = BTreeMap::new();
    params.insert("w".to_string(), Tensor::from_vec(vec![1], vec![value]).unwrap());
    params
}

fn scalar_grad(value: f32) -> BTreeMap<String, Tensor> {
    let mut grads = BTreeMap::new();
    grads.insert("w".to_string(), Tensor::from_vec(vec![1], vec![value]).unwrap());
    grads
}

#[test]
fn adamw_first_step_matches_the_closed_form() {
    // theta1 = -lr * m_hat / (sqrt(v_hat) + eps) with m_hat = v_hat = 1
    // after bias correction: -0.1 / (1 + 1e-8) = -0.09999999900...
    let mut params = scalar_params(0.0);
    let mut opt = AdamW::new(0.1, 0.0);
    opt.step(&mut params, &scalar_grad(1.0)).unwrap();
    let got = params["w"].data()[0] as f64;
    assert!(
        (got - (-0.099999999)).abs() < 1e-7,
        "first step gave {got}, closed form -0.099999999"
    );
}

#[test]
fn adamw_zero_gradient_zero_decay_changes_nothing() {
    let mut params = scalar_params(0.7);
    let before = params["w"].data().to_vec();
    let mut opt = AdamW::new(0.1, 0.0);
    for _ in 0..3 {
        opt.step(&mut params, &scalar_grad(0.0)).unwrap();
    }
    assert_eq!(params["w"].data(), &before[..]);
}

#[test]
fn adamw_decay_only_is_geometric() {
    // g = 0 keeps the adaptive term at zero, so theta_t = theta0*(1-lr*wd)^t.
    let theta0 = 2.0f64;
    let (lr, wd) = (0.1f64, 0.5f64);
    let mut params = scalar_params(theta0 as f32);
    let mut opt = AdamW::new(lr as f32, wd as f32);
    for t in 1..=6 {
        opt.step(&mut params, &scalar_grad(0.0)).unwrap();
        let want = theta0 * (1.0 - lr * wd).powi(t);
        let got = params["w"].data()[0] as f64;
        assert!(
            (got - want).abs() < 1e-6 * want.abs(),
            "step {t}: got {got}, closed form {want}"
        );
    }
}

#[test]
fn adamw_rejects_nan_gradients_by_name() {
    let mut params = scalar_params(0.0);
    let before = params["w"].data().to_vec();
    let mut opt = AdamW::new(0.1, 0.0);
    match opt.step(&mut params, &scalar_grad(f32::NAN)).unwrap_err() {
        TrainError::NanGradient { param } => assert_eq!(param, "w"),
        other => panic!("expected NaN-gradient error, got {other:?}"),
    }
    assert_eq!(params["w"].data(), &before[..], "aborted step must not move parameters");
    assert_eq!(opt.step_count(), 0, "aborted step must not advance time");
}

#[test]
fn adamw_touches_only_parameters_with_gradients() {
    let mut params = scalar_params(0.5);
    params.insert("frozen".to_string(), Tensor::from_vec(vec![2], vec![1.0, -1.0]).unwrap());
    let frozen_before = params["frozen"].data().to_vec();
    let mut opt = AdamW::new(0.1, 0.3);
    for _ in 0..4 {
        opt.step(&mut params, &scalar_grad(1.0)).unwrap();
    }
    assert_eq!(
        params["frozen"].data(),
        &frozen_before[..],
        "parameters absent from the gradient map stay bit-identical"
    );
    assert_ne!(params["w"].data()[0], 0.5);
}

#[test]
fn cosine_schedule_hits_its_endpoints() {
    let (lr0, lr_final) = (3e-4f32, 3e-6f32);
    assert_eq!(cosine_lr(lr0, lr_final, 0, 25), lr0);
    let end = cosine_lr(lr0, lr_final, 25, 25);
    assert!((end - lr_final).abs() < 1e-12, "t=T gave {end}");
    let mid = cosine_lr(lr0, lr_final, 25, 50) as f64;
    let want = (lr0 as f64 + lr_final as f64) / 2.0;
    assert!((mid - want).abs() < 1e-9, "midpoint gave {mid}, want {want}");
}

#[test]
fn plateau_holds_while_improving_and_cuts_after_patience() {
    let spec = Scheduler::Plateau { factor: 0.1, patience: 2, min_delta: 1e-4 };
    let mut sched = LrScheduler::new(spec, 1.0);

    for step in 0..6 {
        assert_eq!(sched.epoch_lr(step, 10), 1.0, "improving metric must hold the rate");
        sched.observe(1.0 - step as f64 * 0.1);
    }

    // improvements below min_delta count as stale
    sched.observe(1.0 - 5.0 * 0.1 - 5e-5);
    assert_eq!(sched.epoch_lr(6, 10), 1.0, "one stale epoch is within patience");
    sched.observe(0.9);
    let cut = sched.epoch_lr(7, 10);
    assert!((cut - 0.1).abs() < 1e-9, "second stale epoch must cut to {}", 0.1);
}

#[test]
fn plateau_with_strictly_improving_metric_never_changes() {
    let mut sched = LrScheduler::new(Scheduler::plateau(), 3e-4);
    for epoch in 0..30 {
        assert_eq!(sched.epoch_lr(epoch, 30), 3e-4);
        sched.observe(10.0 / (epoch + 1) as f64);
    }
}

/// Two visually distinct families at a small canvas: enough signal for a
/// few epochs of the reduced network to separate.
fn two_class_spec(per_class: usize, seed: u64) -> SynthSpec {
    SynthSpec {
        classes: vec![
            (
                "rhombs".to_string(),
                Recipe {
                    shape: ShapeFamily::Rhomb,
                    color_lo: [188, 168, 148],
                    color_hi: [226, 210, 190],
                    xpl_palette: vec![[168, 148, 196], [196, 170, 120], [120, 150, 190]],
                    density: (6, 10),
                    size: (5.0, 9.0),
                },
            ),
            (
                "vesicles".to_string(),
                Recipe {
                    shape: ShapeFamily::Vesicular,
                    color_lo: [30, 26, 24],
                    color_hi: [58, 50, 46],
                    xpl_palette: vec![[22, 20, 26], [30, 26, 34], [26, 30, 38]],
                    density: (6, 10),
                    size: (5.0, 9.0),
                },
            ),
        ],
        per_class,
        image_size: 64,
        seed,
    }
}

fn tiny_resnet(classes: usize) -> ModelSpec {
    ModelSpec::Resnet18 {
        num_classes: classes,
        input_resolution: 32,
        stage_channels: [4, 8, 16, 32],
        blocks_per_stage: [2, 2, 2, 2],
    }
}

fn small_corpus(per_class: usize, seed: u64) -> petrolens::data::Corpus {
    let mut corpus = generate_synthetic(&two_class_spec(per_class, seed)).unwrap();
    stratified_split(&mut corpus, 0.8, seed, false).unwrap();
    corpus
}

#[test]
fn zero_epochs_returns_the_initial_model_and_empty_history() {
    let corpus = small_corpus(4, 11);
    let mut model = Model::build(&tiny_resnet(2), 1).unwrap();
    let before: BTreeMap<String, Vec<f32>> =
        model.params.iter().map(|(k, v)| (k.clone(), v.data().to_vec())).collect();
    let history = train(&mut model, &corpus, &TrainConfig::new(0, 1e-2, 7, 32)).unwrap();
    assert!(history.is_empty());
    for (name, data) in before {
        assert_eq!(model.params[&name].data(), &data[..], "{name}");
    }
}

#[test]
fn train_rejects_bad_configs() {
    let corpus = small_corpus(2, 12);
    let mut model = Model::build(&tiny_resnet(2), 1).unwrap();

    let bad_lr = TrainConfig { learning_rate: 0.0, ..TrainConfig::new(1, 1e-2, 7, 32) };
    assert!(matches!(train(&mut model, &corpus, &bad_lr), Err(TrainError::Config(_))));

    let bad_batch = TrainConfig { batch_size: 0, ..TrainConfig::new(1, 1e-2, 7, 32) };
    assert!(matches!(train(&mut model, &corpus, &bad_batch), Err(TrainError::Config(_))));

    let wrong_res = TrainConfig::new(1, 1e-2, 7, 64);
    assert!(matches!(train(&mut model, &corpus, &wrong_res), Err(TrainError::Config(_))));

    let mut empty = corpus.clone();
    for tag in &mut empty.split {
        *tag = SplitTag::Test;
    }
    let ok = TrainConfig::new(1, 1e-2, 7, 32);
    assert!(matches!(train(&mut model, &empty, &ok), Err(TrainError::Config(_))));

    let mut three = Model::build(&tiny_resnet(3), 1).unwrap();
    assert!(matches!(train(&mut three, &corpus, &ok), Err(TrainError::Config(_))));
}

#[test]
fn training_reduces_loss_and_reproduces_bit_for_bit() {
    let corpus = small_corpus(16, 13);
    let config = TrainConfig { batch_size: 16, ..TrainConfig::new(5, 3e-3, 21, 32) };

    let mut first = Model::build(&tiny_resnet(2), 5).unwrap();
    let history = train(&mut first, &corpus, &config).unwrap();
    assert_eq!(history.len(), 5);
    assert!(
        history[4].loss < history[0].loss,
        "loss should trend down: first {} last {}",
        history[0].loss,
        history[4].loss
    );
    for r in &history {
        assert!(r.loss.is_finite());
        assert!((0.0..=1.0).contains(&r.train_acc));
        assert!((0.0..=1.0).contains(&r.test_acc));
        assert_eq!(r.lr, 3e-3, "no scheduler: rate must be constant");
    }

    let mut second = Model::build(&tiny_resnet(2), 5).unwrap();
    let replay = train(&mut second, &corpus, &config).unwrap();
    for (name, t) in &first.params {
        let a: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = second.params[name].data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b, "{name} must match bit for bit across identical runs");
    }
    for (name, t) in &first.buffers {
        assert_eq!(t.data(), second.buffers[name].data(), "{name}");
    }
    for (a, b) in history.iter().zip(&replay) {
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert_eq!(a.train_acc, b.train_acc);
        assert_eq!(a.test_acc, b.test_acc);
    }
}

#[test]
fn head_only_training_leaves_the_backbone_bit_identical() {
    let corpus = small_corpus(8, 14);
    let mut model = Model::build(&tiny_resnet(2), 6).unwrap();
    let before: BTreeMap<String, Vec<u32>> = model
        .params
        .iter()
        .map(|(k, v)| (k.clone(), v.data().iter().map(|x| x.to_bits()).collect()))
        .collect();
    let buffers_before: BTreeMap<String, Vec<u32>> = model
        .buffers
        .iter()
        .map(|(k, v)| (k.clone(), v.data().iter().map(|x| x.to_bits()).collect()))
        .collect();

    let config = TrainConfig {
        policy: TrainPolicy::HeadOnly,
        batch_size: 16,
        ..TrainConfig::new(2, 1e-2, 9, 32)
    };
    train(&mut model, &corpus, &config).unwrap();

    let mut head_moved = false;
    for (name, bits) in &before {
        let after: Vec<u32> = model.params[name].data().iter().map(|x| x.to_bits()).collect();
        if name.starts_with("fc.") {
            head_moved |= after != *bits;
        } else {
            assert_eq!(after, *bits, "{name} is frozen and must not move");
        }
    }
    assert!(head_moved, "the head must actually train");
    for (name, bits) in &buffers_before {
        let after: Vec<u32> = model.buffers[name].data().iter().map(|x| x.to_bits()).collect();
        assert_eq!(after, *bits, "{name}: frozen batch norms must not update running stats");
    }
}

#[test]
fn history_csv_has_the_documented_shape() {
    let corpus = small_corpus(4, 15);
    let mut model = Model::build(&tiny_resnet(2), 2).unwrap();
    let history = train(&mut model, &corpus, &TrainConfig::new(2, 1e-3, 3, 32)).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("history.csv");
    write_history_csv(&history, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "epoch,train_acc,test_acc,lr,loss");
    assert_eq!(lines.len(), 3);
    for (i, line) in lines[1..].iter().enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 5);
        assert_eq!(fields[0], (i + 1).to_string());
        for v in &fields[1..] {
            v.parse::<f64>().unwrap_or_else(|_| panic!("unparsable field {v}"));
        }
    }
}

#[test]
fn missing_test_split_records_nan_test_accuracy() {
    let mut corpus = small_corpus(4, 16);
    for tag in &mut corpus.split {
        *tag = SplitTag::Train;
    }
    let mut model = Model::build(&tiny_resnet(2), 2).unwrap();
    let history = train(&mut model, &corpus, &TrainConfig::new(1, 1e-3, 3, 32)).unwrap();
    assert!(history[0].test_acc.is_nan());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("history.csv");
    write_history_csv(&history, &path).unwrap();
    assert!(std::fs::read_to_string(&path).unwrap().contains("NaN"));
}

/// Zero the head weights and pin the bias so every input lands on class 0.
fn always_class_zero(classes: usize) -> Model {
    let mut model = Model::build(&tiny_resnet(classes), 3).unwrap();
    model.norm = Some(petrolens::data::Normalization { mean: [0.5; 3], std: [0.25; 3] });
    let feat = model.param("fc.weight").shape()[0];
    model
        .params
        .insert("fc.weight".into(), Tensor::zeros(&[feat, classes]).requires_grad(true));
    let mut bias = vec![0.0f32; classes];
    bias[0] = 1.0;
    model
        .params
        .insert("fc.bias".into(), Tensor::from_vec(vec![classes], bias).unwrap().requires_grad(true));
    model
}

#[test]
fn degenerate_classifier_metrics_are_exact() {
    let corpus = small_corpus(10, 17);
    let model = always_class_zero(2);
    let report = evaluate(&model, &corpus, SplitTag::Test).unwrap();

    let test = corpus.test_indices();
    let class0: usize =
        test.iter().filter(|&&i| corpus.samples[i].label == 0).count();
    assert_eq!(report.total, test.len());
    assert_eq!(report.accuracy, class0 as f64 / test.len() as f64);
    assert_eq!(report.per_class[0].recall, 1.0);
    assert_eq!(report.per_class[1].recall, 0.0);
    assert_eq!(report.per_class[1].precision, 0.0, "0/0 precision reads as 0");
    assert_eq!(report.per_class[1].f1, 0.0);
    assert_eq!(
        report.confusion[0][0] + report.confusion[1][0],
        test.len(),
        "every prediction lands in column 0"
    );
}

/// Independent counting oracle over a synthetic prediction list: the
/// report must match plain tallies exactly.
#[test]
fn metrics_match_a_counting_oracle_exactly() {
    let names: Vec<String> = (0..4).map(|c| format!("class{c}")).collect();
    let mut sampler = common::Sampler::new(40);
    let pairs: Vec<(usize, usize)> = (0..30)
        .map(|_| ((sampler.next_u64() % 4) as usize, (sampler.next_u64() % 4) as usize))
        .collect();

    let mut confusion = vec![vec![0usize; 4]; 4];
    for &(t, p) in &pairs {
        confusion[t][p] += 1;
    }
    let report = MetricsReport::from_confusion(&names, confusion);

    let correct = pairs.iter().filter(|(t, p)| t == p).count();
    assert_eq!(report.accuracy, correct as f64 / 30.0);
    for c in 0..4 {
        let tp = pairs.iter().filter(|&&(t, p)| t == c && p == c).count();
        let predicted = pairs.iter().filter(|&&(_, p)| p == c).count();
        let actual = pairs.iter().filter(|&&(t, _)| t == c).count();
        let precision = if predicted == 0 { 0.0 } else { tp as f64 / predicted as f64 };
        let recall = if actual == 0 { 0.0 } else { tp as f64 / actual as f64 };
        assert_eq!(report.per_class[c].precision, precision, "precision class {c}");
        assert_eq!(report.per_class[c].recall, recall, "recall class {c}");
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        assert_eq!(report.per_class[c].f1, f1, "f1 class {c}");
    }
    let macro_f1: f64 = report.per_class.iter().map(|m| m.f1).sum::<f64>() / 4.0;
    assert_eq!(report.macro_f1, macro_f1);
    let max = report.per_class.iter().map(|m| m.f1).fold(f64::MIN, f64::max);
    let min = report.per_class.iter().map(|m| m.f1).fold(f64::MAX, f64::min);
    assert!(report.macro_f1 <= max && report.macro_f1 >= min);
}

#[test]
fn seed_aggregation_matches_hand_computation() {
    let agg = SeedAggregate::from_values(&[92.0, 92.5, 91.8]);
    assert!((agg.mean - 92.1).abs() < 1e-9);
    assert!((agg.std - 0.36055512754639896).abs() < 1e-9, "sample std of the three");
    assert_eq!(agg.runs, 3);
    assert!(!agg.single_run);
    assert_eq!(format!("{agg}"), "92.10 \u{b1} 0.36");

    let same = SeedAggregate::from_values(&[5.0, 5.0, 5.0]);
    assert_eq!(same.std, 0.0);

    let one = SeedAggregate::from_values(&[88.0]);
    assert_eq!(one.std, 0.0);
    assert!(one.single_run);
    assert!(format!("{one}").contains("(single run)"));
}

#[test]
fn aggregating_identical_reports_gives_zero_spread() {
    let names = vec!["a".to_string(), "b".to_string()];
    let confusion = vec![vec![7, 1], vec![2, 6]];
    let report = MetricsReport::from_confusion(&names, confusion);
    let agg = aggregate_seeds(&[report.clone(), report.clone(), report]);
    for (metric, a) in &agg {
        assert_eq!(a.std, 0.0, "{metric}");
        assert_eq!(a.runs, 3);
    }
    // aggregates are reported in percent
    assert!((agg["accuracy"].mean - 100.0 * 13.0 / 16.0).abs() < 1e-10);
}

#[test]
fn cross_validation_counts_folds_and_picks_the_trained_config() {
    let corpus = small_corpus(16, 18);
    // head-only keeps batch norms frozen, so train- and eval-mode
    // behavior match even after very few steps and the comparison
    // reduces to fitted-vs-random linear probes
    let base = TrainConfig {
        batch_size: 16,
        policy: TrainPolicy::HeadOnly,
        ..TrainConfig::new(8, 1e-2, 31, 32)
    };
    let build = |fold: usize| Model::build(&tiny_resnet(2), 100 + fold as u64);

    // a grid of one point is trivially the best point
    let single = [GridPoint { learning_rate: 1e-2, weight_decay: 0.0 }];
    let (results, best) = cross_validate(&build, &corpus, 3, &single, &base).unwrap();
    assert_eq!(results.len(), 1);
    assert_eq!(best, single[0]);
    assert_eq!(results[0].fold_accuracies.len(), 3, "k=3 means three trainings per point");
    let mean = results[0].fold_accuracies.iter().sum::<f64>() / 3.0;
    assert_eq!(results[0].mean_accuracy, mean);

    // a vanishing learning rate leaves the model untrained; on a learnable
    // task it must lose to a real rate even though ties would favor it
    let grid = [
        GridPoint { learning_rate: 1e-12, weight_decay: 0.0 },
        GridPoint { learning_rate: 1e-2, weight_decay: 0.0 },
    ];
    let (results, best) = cross_validate(&build, &corpus, 3, &grid, &base).unwrap();
    assert!(
        results[1].mean_accuracy > results[0].mean_accuracy,
        "trained {} vs untrained {}",
        results[1].mean_accuracy,
        results[0].mean_accuracy
    );
    assert_eq!(best, grid[1], "the trained configuration must win");
}

#[test]
fn cross_validation_breaks_ties_toward_lower_rates() {
    let corpus = small_corpus(6, 19);
    // zero epochs: every grid point evaluates the identical fresh model,
    // forcing exact ties
    let base = TrainConfig::new(0, 1e-2, 31, 32);
    let build = |fold: usize| Model::build(&tiny_resnet(2), 200 + fold as u64);
    let grid = [
        GridPoint { learning_rate: 3e-3, weight_decay: 1e-4 },
        GridPoint { learning_rate: 1e-3, weight_decay: 1e-2 },
        GridPoint { learning_rate: 1e-3, weight_decay: 1e-4 },
    ];
    let (results, best) = cross_validate(&build, &corpus, 2, &grid, &base).unwrap();
    assert!(results.windows(2).all(|w| w[0].mean_accuracy == w[1].mean_accuracy));
    assert_eq!(best, grid[2], "ties resolve to lower lr, then lower wd");
}

#[test]
fn misclassification_report_groups_errors_and_ranks_consistency() {
    let corpus = small_corpus(6, 20);
    let model = always_class_zero(2);
    let report = misclassification_report(&model, &corpus, SplitTag::Test).unwrap();

    let test = corpus.test_indices();
    let wrong: Vec<usize> =
        test.iter().copied().filter(|&i| corpus.samples[i].label == 1).collect();
    assert_eq!(report.groups.len(), 1, "every error is class 1 read as class 0");
    assert_eq!(report.groups[0].true_class, 1);
    assert_eq!(report.groups[0].predicted, 0);
    assert_eq!(report.groups[0].stems.len(), wrong.len());

    // ppl/xpl pairs share a sample id, so a wrong section fails twice in
    // the same way and tops the consistency ranking
    assert!(!report.consistency.is_empty());
    let top = &report.consistency[0];
    assert_eq!(top.dominant_error, (1, 0));
    assert_eq!(top.consistent, top.images, "all images of the section share the error");
    for pair in report.consistency.windows(2) {
        assert!(pair[0].consistent >= pair[1].consistent, "ranking must be descending");
    }

    // a model that is right everywhere produces an empty report: evaluate
    // on a test split containing only class 0
    let mut zeros_only = corpus.clone();
    for (i, tag) in zeros_only.split.iter_mut().enumerate() {
        if *tag == SplitTag::Test && zeros_only.samples[i].label == 1 {
            *tag = SplitTag::Train;
        }
    }
    let clean = misclassification_report(&model, &zeros_only, SplitTag::Test).unwrap();
    assert!(clean.groups.is_empty());
    assert!(clean.consistency.is_empty());
}

#[test]
fn cosine_schedule_drives_the_recorded_rate() {
    let corpus = small_corpus(4, 22);
    let mut model = Model::build(&tiny_resnet(2), 8).unwrap();
    let config = TrainConfig {
        scheduler: Scheduler::Cosine { final_fraction: 0.01 },
        ..TrainConfig::new(4, 1e-3, 5, 32)
    };
    let history = train(&mut model, &corpus, &config).unwrap();
    let lr0 = 1e-3f32;
    let lr_final = lr0 * 0.01;
    for (e, r) in history.iter().enumerate() {
        assert_eq!(r.lr, cosine_lr(lr0, lr_final, e, 4), "epoch {e}");
    }
    assert_eq!(history[0].lr, lr0);
    assert!(history[3].lr < lr0 && history[3].lr > lr_final);
}
