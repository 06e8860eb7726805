//! Explanation-operator contracts: hand-derived guided gradients, map
//! normalization and support rules, attention readouts, rotation
//! machinery, rendering, and the pointing game.

mod common;

use petrolens::data::{
    generate_synthetic, Image, Mask, Normalization, Recipe, ShapeFamily, SynthSpec,
};
use petrolens::explain::{
    artifact_name, attention_maps, center_crop, colormap, corpus_pointing_score, grad_cam,
    grad_cam_raw, guided_backprop, guided_grad_cam, normalize_map, pointing_game, render,
    resize_plane, rotate_reflect, rotation_stability, top_decile_mask, write_pointing_csv,
    AttentionStack, ExplainError, PointingRow, RenderMode, SaliencyMap, SaliencyMethod,
};
use petrolens::model::{Model, ModelSpec, Probe};
use petrolens::tensor::{ops, tape, BackwardMode, Tape, Tensor};

const NORM: Normalization = Normalization { mean: [0.45; 3], std: [0.22; 3] };

fn tiny_resnet(classes: usize, res: usize) -> Model {
    let spec = ModelSpec::Resnet18 {
        num_classes: classes,
        input_resolution: res,
        stage_channels: [4, 8, 16, 32],
        blocks_per_stage: [2, 2, 2, 2],
    };
    let mut model = Model::build(&spec, 9).unwrap();
    model.norm = Some(NORM);
    model
}

fn tiny_vit(classes: usize) -> Model {
    let spec = ModelSpec::Vit {
        num_classes: classes,
        input_resolution: 32,
        patch_size: 16,
        depth: 2,
        heads: 2,
        hidden_dim: 16,
        mlp_dim: 32,
    };
    let mut model = Model::build(&spec, 9).unwrap();
    model.norm = Some(NORM);
    model
}

/// A deterministic non-trivial test image.
fn test_image(side: usize, seed: u64) -> Image {
    let mut sampler = common::Sampler::new(seed);
    let mut img = Image::new(side, side);
    for y in 0..side {
        for x in 0..side {
            let r = (sampler.next_u64() % 200 + 30) as u8;
            let g = ((x * 255) / side) as u8;
            let b = ((y * 255) / side) as u8;
            img.set_px(x, y, [r, g, b]);
        }
    }
    img
}

/// The guided gate, derived by hand on a 2x2 case: for L = sum(w * relu(x)),
/// dL/dx passes only where x > 0 (forward gate) and w > 0 (upstream gate).
#[test]
fn guided_backward_matches_the_hand_derived_gate() {
    let x = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, -3.0, 4.0])
        .unwrap()
        .requires_grad(true);
    let w = Tensor::from_vec(vec![2, 2], vec![1.0, -1.0, -1.0, 1.0]).unwrap();

    let standard = {
        let tape = Tape::new();
        let h = ops::relu(&tape, &x).unwrap();
        let prod = ops::mul(&tape, &h, &w).unwrap();
        let loss = ops::sum_all(&tape, &prod).unwrap();
        tape.backward(&loss).unwrap().wrt(&x).unwrap().data().to_vec()
    };
    assert_eq!(standard, vec![1.0, -1.0, 0.0, 1.0], "plain chain rule");

    let guided = {
        let tape = Tape::new();
        let h = ops::relu(&tape, &x).unwrap();
        let prod = ops::mul(&tape, &h, &w).unwrap();
        let loss = ops::sum_all(&tape, &prod).unwrap();
        tape.backward_with_mode(&loss, BackwardMode::Guided)
            .unwrap()
            .wrt(&x)
            .unwrap()
            .data()
            .to_vec()
    };
    assert_eq!(guided, vec![1.0, 0.0, 0.0, 1.0], "negative upstream is gated away");
}

#[test]
fn normalize_map_contract() {
    let mut values = vec![2.0, 6.0, 4.0];
    normalize_map(&mut values);
    assert_eq!(values, vec![0.0, 1.0, 0.5]);

    let mut constant = vec![3.3; 5];
    normalize_map(&mut constant);
    assert_eq!(constant, vec![0.0; 5], "constant maps normalize to zeros");
}

#[test]
fn grad_cam_with_a_dead_head_row_is_all_zeros() {
    let mut model = tiny_resnet(3, 32);
    // zero class 1's weight column and bias: its logit is constant in the
    // input, so the map must carry no signal
    let feat = model.param("fc.weight").shape()[0];
    let mut w = model.param("fc.weight").data().to_vec();
    for row in 0..feat {
        w[row * 3 + 1] = 0.0;
    }
    let mut b = model.param("fc.bias").data().to_vec();
    b[1] = 0.0;
    model.params.insert(
        "fc.weight".into(),
        Tensor::from_vec(vec![feat, 3], w).unwrap().requires_grad(true),
    );
    model.params.insert(
        "fc.bias".into(),
        Tensor::from_vec(vec![3], b).unwrap().requires_grad(true),
    );

    let map = grad_cam(&model, &test_image(32, 1), 1).unwrap();
    assert!(map.values.iter().all(|&v| v == 0.0));
}

/// With a single last-stage channel and a positive head weight, the
/// Grad-CAM map is exactly the min-max-normalized upsampled activation.
#[test]
fn single_channel_grad_cam_reduces_to_the_activation_map() {
    let spec = ModelSpec::Resnet18 {
        num_classes: 2,
        input_resolution: 64,
        stage_channels: [4, 4, 4, 1],
        blocks_per_stage: [2, 2, 2, 2],
    };
    let mut model = Model::build(&spec, 4).unwrap();
    model.norm = Some(NORM);
    model.params.insert(
        "fc.weight".into(),
        Tensor::from_vec(vec![1, 2], vec![2.0, -1.0]).unwrap().requires_grad(true),
    );
    let image = test_image(64, 2);

    let map = grad_cam(&model, &image, 0).unwrap();

    let x = petrolens::data::image_to_input(&image, 64, &NORM).unwrap();
    let tape = Tape::inference();
    let out = model.eval_forward(&tape, &x, &[Probe::Features]).unwrap();
    let features = out.features.unwrap();
    assert_eq!(features.shape(), &[1, 1, 2, 2]);
    let mut expected = resize_plane(features.data(), 2, 2, 64, 64);
    normalize_map(&mut expected);

    assert!(
        map.values.iter().zip(&expected).all(|(&a, &b)| (a - b).abs() < 1e-5),
        "positive single-channel weighting must reproduce the activation"
    );
}

#[test]
fn grad_cam_is_invariant_to_scaling_the_target_head_row() {
    let model = tiny_resnet(3, 32);
    let image = test_image(32, 3);
    let before = grad_cam(&model, &image, 2).unwrap();

    let mut scaled = tiny_resnet(3, 32);
    let feat = scaled.param("fc.weight").shape()[0];
    let mut w = scaled.param("fc.weight").data().to_vec();
    for row in 0..feat {
        w[row * 3 + 2] *= 3.7;
    }
    let mut b = scaled.param("fc.bias").data().to_vec();
    b[2] *= 3.7;
    scaled
        .params
        .insert("fc.weight".into(), Tensor::from_vec(vec![feat, 3], w).unwrap().requires_grad(true));
    scaled
        .params
        .insert("fc.bias".into(), Tensor::from_vec(vec![3], b).unwrap().requires_grad(true));
    let after = grad_cam(&scaled, &image, 2).unwrap();

    for (a, b) in before.values.iter().zip(&after.values) {
        assert!((a - b).abs() < 1e-4, "normalization must absorb the scale: {a} vs {b}");
    }
}

#[test]
fn grad_cam_rejects_transformers_and_bad_classes() {
    let vit = tiny_vit(3);
    match grad_cam(&vit, &test_image(32, 4), 0).unwrap_err() {
        ExplainError::UnsupportedArch { instead, .. } => assert_eq!(instead, "attention_maps"),
        other => panic!("expected unsupported-arch, got {other:?}"),
    }
    let resnet = tiny_resnet(3, 32);
    assert!(matches!(
        grad_cam(&resnet, &test_image(32, 4), 3),
        Err(ExplainError::Config(_))
    ));
    let mut unnormed = tiny_resnet(3, 32);
    unnormed.norm = None;
    assert!(matches!(
        grad_cam(&unnormed, &test_image(32, 4), 0),
        Err(ExplainError::MissingNorm)
    ));
}

#[test]
fn guided_backprop_maps_are_non_negative_and_normalized() {
    let model = tiny_resnet(3, 32);
    let map = guided_backprop(&model, &test_image(32, 5), 1).unwrap();
    assert!(map.values.iter().all(|&v| (0.0..=1.0).contains(&v) && v.is_finite()));
    let max = map.values.iter().copied().fold(f32::MIN, f32::max);
    assert!(max == 1.0 || map.values.iter().all(|&v| v == 0.0));
}

#[test]
fn dead_first_layer_yields_a_zero_guided_map() {
    let mut model = tiny_resnet(2, 32);
    // a hugely negative stem shift kills every first-stage activation, so
    // no gradient can reach the input
    let c = model.buffers["stem.bn.running_mean"].numel();
    model.params.insert(
        "stem.bn.beta".into(),
        Tensor::from_vec(vec![c], vec![-1e6; c]).unwrap().requires_grad(true),
    );
    let map = guided_backprop(&model, &test_image(32, 6), 0).unwrap();
    assert!(map.values.iter().all(|&v| v == 0.0));
}

#[test]
fn guided_grad_cam_support_stays_inside_grad_cam_support() {
    let model = tiny_resnet(3, 32);
    let image = test_image(32, 7);
    let cam_raw = grad_cam_raw(&model, &image, 0).unwrap();
    let combined = guided_grad_cam(&model, &image, 0).unwrap();
    for (i, (&c, &g)) in cam_raw.iter().zip(&combined.values).enumerate() {
        if c == 0.0 {
            assert_eq!(g, 0.0, "pixel {i}: product must vanish where grad_cam does");
        }
    }

    // either factor all-zero forces an all-zero product
    let mut dead = tiny_resnet(3, 32);
    let feat = dead.param("fc.weight").shape()[0];
    let mut w = dead.param("fc.weight").data().to_vec();
    for row in 0..feat {
        w[row * 3] = 0.0;
    }
    let mut b = dead.param("fc.bias").data().to_vec();
    b[0] = 0.0;
    dead.params
        .insert("fc.weight".into(), Tensor::from_vec(vec![feat, 3], w).unwrap().requires_grad(true));
    dead.params
        .insert("fc.bias".into(), Tensor::from_vec(vec![3], b).unwrap().requires_grad(true));
    let zero = guided_grad_cam(&dead, &image, 0).unwrap();
    assert!(zero.values.iter().all(|&v| v == 0.0));
}

#[test]
fn guided_gate_never_fires_during_training() {
    // res 64 keeps the last stage at 2x2 so train-mode batch norm has
    // batch statistics to consume even with a single image
    let model = tiny_resnet(2, 64);
    let image = test_image(64, 8);
    let before = tape::guided_gate_invocations();

    // a full training-style forward/backward uses the standard mode
    let x = petrolens::data::image_to_input(&image, 64, &NORM).unwrap();
    let tp = Tape::new();
    let out = {
        let mut m = tiny_resnet(2, 64);
        m.train_forward(&tp, &x, &[]).unwrap()
    };
    let loss = ops::cross_entropy_loss(&tp, &out.logits, &[0]).unwrap();
    tp.backward(&loss).unwrap();
    assert_eq!(
        tape::guided_gate_invocations(),
        before,
        "training backward must never touch the guided gate"
    );

    guided_backprop(&model, &image, 0).unwrap();
    assert!(
        tape::guided_gate_invocations() > before,
        "the explanation path must actually use the gate"
    );
}

#[test]
fn attention_stack_geometry_and_entropy() {
    // canonical geometry at reduced width: 224/16 -> 14x14 grid, 197 tokens
    let spec = ModelSpec::Vit {
        num_classes: 2,
        input_resolution: 224,
        patch_size: 16,
        depth: 2,
        heads: 2,
        hidden_dim: 16,
        mlp_dim: 32,
    };
    let mut model = Model::build(&spec, 10).unwrap();
    model.norm = Some(NORM);
    let stack = attention_maps(&model, &test_image(224, 9)).unwrap();
    assert_eq!(stack.tokens, 197);
    assert_eq!(stack.grid_side, 14);
    assert_eq!(stack.layers.len(), 2);

    let grid = stack.cls_grid(0, 0).unwrap();
    assert_eq!(grid.len(), 196, "CLS grid drops the CLS column");
    assert!(grid.iter().all(|&v| v >= 0.0));
    let h = stack.cls_entropy(0, 0).unwrap();
    assert!(h >= 0.0 && h <= (196f64).ln() + 1e-9, "entropy bounded by ln(patches)");

    assert!(stack.cls_grid(2, 0).is_err());
    assert!(stack.cls_grid(0, 2).is_err());

    match attention_maps(&tiny_resnet(2, 32), &test_image(32, 10)).unwrap_err() {
        ExplainError::UnsupportedArch { instead, .. } => assert_eq!(instead, "grad_cam"),
        other => panic!("expected unsupported-arch, got {other:?}"),
    }
}

#[test]
fn cls_entropy_matches_a_hand_computed_distribution() {
    // one layer, one head, 5 tokens: CLS row mass [0.4, 0.1, 0.2, 0.3]
    // over the patches after dropping the CLS column
    let t = 5;
    let mut data = vec![0.0f32; t * t];
    data[0] = 0.0;
    data[1] = 0.4;
    data[2] = 0.1;
    data[3] = 0.2;
    data[4] = 0.3;
    let stack = AttentionStack {
        heads: 1,
        tokens: t,
        grid_side: 2,
        layers: vec![Tensor::from_vec(vec![1, 1, t, t], data).unwrap()],
    };
    let p = [0.4f64, 0.1, 0.2, 0.3];
    let want: f64 = -p.iter().map(|&x| x * x.ln()).sum::<f64>();
    let got = stack.cls_entropy(0, 0).unwrap();
    assert!((got - want).abs() < 1e-6, "got {got}, hand value {want}");
    assert_eq!(stack.mean_entropy(0).unwrap(), got);
}

#[test]
fn attention_rollout_matches_a_hand_computed_product() {
    // one head, 3 tokens; rows already sum to 1 so the residual blend is
    // exactly 0.5(A + I)
    let a = vec![0.2f32, 0.3, 0.5, 0.1, 0.8, 0.1, 0.4, 0.4, 0.2];
    let layer = Tensor::from_vec(vec![1, 1, 3, 3], a).unwrap();

    let one = AttentionStack {
        heads: 1,
        tokens: 3,
        grid_side: 1,
        layers: vec![layer.clone()],
    };
    let got = one.rollout_grid().unwrap();
    assert!((got[0] - 0.15).abs() < 1e-6 && (got[1] - 0.25).abs() < 1e-6, "{got:?}");

    // two identical layers: CLS row of M @ M with M = 0.5(A + I)
    let two = AttentionStack {
        heads: 1,
        tokens: 3,
        grid_side: 1,
        layers: vec![layer.clone(), layer],
    };
    let got = two.rollout_grid().unwrap();
    assert!((got[0] - 0.275).abs() < 1e-6 && (got[1] - 0.3075).abs() < 1e-6, "{got:?}");
}

#[test]
fn rollout_runs_on_a_real_transformer() {
    let model = {
        let spec = ModelSpec::Vit {
            num_classes: 2,
            input_resolution: 32,
            patch_size: 16,
            depth: 2,
            heads: 2,
            hidden_dim: 16,
            mlp_dim: 32,
        };
        let mut m = Model::build(&spec, 11).unwrap();
        m.norm = Some(NORM);
        m
    };
    let stack = attention_maps(&model, &test_image(32, 15)).unwrap();
    let grid = stack.rollout_grid().unwrap();
    assert_eq!(grid.len(), 4);
    assert!(grid.iter().all(|&v| v >= 0.0 && v.is_finite()));
    let map = stack.rollout_map(32).unwrap();
    assert_eq!(map.len(), 32 * 32);
    assert!(map.iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn rotation_by_zero_is_the_identity_and_crop_is_centered() {
    let img = test_image(48, 11);
    assert_eq!(rotate_reflect(&img, 0.0), img);

    let crop = center_crop(&img, 32).unwrap();
    assert_eq!((crop.w, crop.h), (32, 32));
    assert_eq!(crop.px(0, 0), img.px(8, 8), "crop anchors at the centered offset");
    assert!(center_crop(&img, 64).is_err());
}

#[test]
fn top_decile_masks_and_iou_behave() {
    let values: Vec<f32> = (0..100).map(|i| i as f32).collect();
    let mask = top_decile_mask(&values);
    assert_eq!(mask.iter().filter(|&&m| m).count(), 10);
    assert!(mask[90..].iter().all(|&m| m));

    let tiny = top_decile_mask(&[0.5, 0.1]);
    assert_eq!(tiny.iter().filter(|&&m| m).count(), 1, "always at least one pixel");
}

#[test]
fn rotation_stability_degenerate_cases() {
    let model = tiny_resnet(2, 32);
    let image = test_image(32, 12);

    let single =
        rotation_stability(&model, &image, &[0.0], SaliencyMethod::GradCam).unwrap();
    assert_eq!(single.stability, 1.0);
    assert_eq!(single.invariant_fraction, 1.0);
    assert_eq!(single.maps.len(), 1);

    let dup =
        rotation_stability(&model, &image, &[0.0, 0.0, 0.0], SaliencyMethod::GradCam).unwrap();
    assert_eq!(dup.stability, 1.0, "identical angles give identical masks");
    assert_eq!(dup.invariant_fraction, 1.0);

    assert!(rotation_stability(&model, &image, &[], SaliencyMethod::GradCam).is_err());
    assert!(
        rotation_stability(&model, &image, &[90.0], SaliencyMethod::GradCam).is_err(),
        "the angle list must include the base frame"
    );
}

#[test]
fn rotation_stability_reports_each_angle() {
    let model = tiny_resnet(2, 32);
    let image = test_image(32, 13);
    let angles = [0.0, 90.0, 180.0];
    let report =
        rotation_stability(&model, &image, &angles, SaliencyMethod::GradCam).unwrap();
    assert_eq!(report.maps.len(), 3);
    assert_eq!(report.predictions.len(), 3);
    assert!((0.0..=1.0).contains(&report.stability));
    assert!((0.0..=1.0).contains(&report.invariant_fraction));
    for map in &report.maps {
        assert!(map.values.iter().all(|&v| v.is_finite() && (0.0..=1.0).contains(&v)));
    }
}

fn flat_map(side: usize, values: Vec<f32>) -> SaliencyMap {
    SaliencyMap {
        w: side,
        h: side,
        values,
        method: SaliencyMethod::GradCam,
        target_class: 0,
    }
}

#[test]
fn render_modes_honor_their_contracts() {
    let img = test_image(8, 14);
    let mut values: Vec<f32> = (0..64).map(|i| i as f32 / 63.0).collect();
    values[10] = 0.5;
    let map = flat_map(8, values);

    let untouched = render(&img, &map, RenderMode::Overlay { alpha: 0.0 }).unwrap();
    assert_eq!(untouched, img, "alpha 0 is the original image");

    let all = render(&img, &map, RenderMode::Masked { threshold: 0.0 }).unwrap();
    assert_eq!(all, img, "threshold 0 keeps everything");

    let none = render(&img, &map, RenderMode::Masked { threshold: 1.1 }).unwrap();
    assert!(none.data.iter().all(|&b| b == 0), "threshold above 1 blanks the image");

    let raw = render(&img, &map, RenderMode::Raw).unwrap();
    assert_eq!(raw.px(0, 0), colormap(map.values[0]));

    let wrong = flat_map(4, vec![0.0; 16]);
    assert!(render(&img, &wrong, RenderMode::Raw).is_err());
}

#[test]
fn colormap_endpoints_are_fixed() {
    assert_eq!(colormap(0.0), [0, 0, 255], "cold end is blue");
    assert_eq!(colormap(1.0), [255, 0, 0], "hot end is red");
    assert_eq!(colormap(0.5), [128, 255, 128], "midpoint is green-dominant");
    assert_eq!(colormap(-3.0), colormap(0.0), "inputs clamp below");
    assert_eq!(colormap(7.0), colormap(1.0), "inputs clamp above");
}

#[test]
fn pointing_game_follows_the_raster_argmax() {
    let mut mask = Mask::new(4, 4);
    mask.set(2, 1, true);

    let mut hit_values = vec![0.0f32; 16];
    hit_values[6] = 1.0;
    assert!(pointing_game(&flat_map(4, hit_values), &mask).unwrap());

    let mut miss_values = vec![0.0f32; 16];
    miss_values[5] = 1.0;
    assert!(!pointing_game(&flat_map(4, miss_values), &mask).unwrap());

    // uniform map: the first raster pixel wins, deterministically
    let uniform = flat_map(4, vec![0.25; 16]);
    assert!(!pointing_game(&uniform, &mask).unwrap());
    let mut corner = Mask::new(4, 4);
    corner.set(0, 0, true);
    assert!(pointing_game(&uniform, &corner).unwrap());

    let wrong = Mask::new(3, 3);
    assert!(pointing_game(&uniform, &wrong).is_err());

    let hits = [true, true, true, true, true, true, true, false, false, false];
    assert_eq!(corpus_pointing_score(&hits), 0.7);
}

#[test]
fn pointing_csv_and_artifact_names() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pointing.csv");
    let rows = vec![
        PointingRow { stem: "a__ppl__2.5x".into(), method: "gradcam".into(), hit: true },
        PointingRow { stem: "b__xpl__2.5x".into(), method: "gradcam".into(), hit: false },
    ];
    write_pointing_csv(&rows, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text, "stem,method,hit\na__ppl__2.5x,gradcam,1\nb__xpl__2.5x,gradcam,0\n");

    assert_eq!(
        artifact_name("s01__ppl__2.5x", "gradcam", 2, None, None, "overlay"),
        "s01__ppl__2.5x__gradcam__c2__overlay.png"
    );
    assert_eq!(
        artifact_name("s01__ppl__2.5x", "attention", 1, Some((11, 3)), Some(30), "raw"),
        "s01__ppl__2.5x__attention__c1__L11H3__rot30__raw.png"
    );
}

/// End-to-end sanity on synthetic data: maps on a real corpus image are
/// finite, normalized, and the pointing pipeline runs.
#[test]
fn saliency_pipeline_runs_on_synthetic_samples() {
    let spec = SynthSpec {
        classes: vec![
            (
                "dark_grains".to_string(),
                Recipe {
                    shape: ShapeFamily::Angular,
                    color_lo: [25, 22, 20],
                    color_hi: [60, 52, 48],
                    xpl_palette: vec![[160, 140, 190], [190, 165, 120]],
                    density: (4, 7),
                    size: (4.0, 8.0),
                },
            ),
            (
                "pale_rhombs".to_string(),
                Recipe {
                    shape: ShapeFamily::Rhomb,
                    color_lo: [180, 165, 150],
                    color_hi: [220, 205, 190],
                    xpl_palette: vec![[210, 200, 150], [150, 170, 210]],
                    density: (4, 7),
                    size: (4.0, 8.0),
                },
            ),
        ],
        per_class: 2,
        image_size: 64,
        seed: 77,
    };
    let corpus = generate_synthetic(&spec).unwrap();
    let model = tiny_resnet(2, 64);

    for sample in &corpus.samples {
        for method in [
            SaliencyMethod::GradCam,
            SaliencyMethod::GuidedBp,
            SaliencyMethod::GuidedGradCam,
        ] {
            let map = petrolens::explain::saliency(&model, &sample.image, method, 0).unwrap();
            assert!(map.values.iter().all(|&v| v.is_finite() && (0.0..=1.0).contains(&v)));
            let mask = sample.mask.as_ref().unwrap();
            pointing_game(&map, mask).unwrap();
        }
    }
}
