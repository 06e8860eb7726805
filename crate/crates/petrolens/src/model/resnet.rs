//! ResNet-18: 7x7 stem, four stages of basic blocks, global average pool,
//! linear head. Convolutions carry no bias (batch norm follows each), so
//! the canonical plan has 17 conv weight layers + 1 fully connected.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use crate::tensor::ops::{self, Phase};
use crate::tensor::{Tape, Tensor};

use super::{
    init, named_batch_norm, ForwardOutput, Model, ModelError, ModelSpec, Probe,
};

fn plan(spec: &ModelSpec) -> ([usize; 4], [usize; 4]) {
    let ModelSpec::Resnet18 { stage_channels, blocks_per_stage, .. } = *spec else {
        unreachable!("resnet builder called with non-resnet spec");
    };
    (stage_channels, blocks_per_stage)
}

pub(super) fn build(spec: &ModelSpec, seed: u64) -> Result<Model, ModelError> {
    let (channels, blocks) = plan(spec);
    let mut rng = init::param_stream(seed);
    let mut params = BTreeMap::new();
    let mut buffers = BTreeMap::new();

    let conv = |params: &mut BTreeMap<String, Tensor>,
                    rng: &mut ChaCha8Rng,
                    name: &str,
                    o: usize,
                    i: usize,
                    k: usize| {
        let fan_in = i * k * k;
        params.insert(format!("{name}.weight"), init::he_normal(rng, &[o, i, k, k], fan_in));
    };
    let bn = |params: &mut BTreeMap<String, Tensor>,
                  buffers: &mut BTreeMap<String, Tensor>,
                  name: &str,
                  c: usize| {
        params.insert(format!("{name}.gamma"), Tensor::ones(&[c]));
        params.insert(format!("{name}.beta"), Tensor::zeros(&[c]));
        buffers.insert(format!("{name}.running_mean"), Tensor::zeros(&[c]));
        buffers.insert(format!("{name}.running_var"), Tensor::ones(&[c]));
    };

    conv(&mut params, &mut rng, "stem.conv", channels[0], 3, 7);
    bn(&mut params, &mut buffers, "stem.bn", channels[0]);

    let mut in_c = channels[0];
    for (s, (&out_c, &n_blocks)) in channels.iter().zip(&blocks).enumerate() {
        for b in 0..n_blocks {
            let prefix = format!("layer{}.{b}", s + 1);
            let stride = if s > 0 && b == 0 { 2 } else { 1 };
            conv(&mut params, &mut rng, &format!("{prefix}.conv1"), out_c, in_c, 3);
            bn(&mut params, &mut buffers, &format!("{prefix}.bn1"), out_c);
            conv(&mut params, &mut rng, &format!("{prefix}.conv2"), out_c, out_c, 3);
            bn(&mut params, &mut buffers, &format!("{prefix}.bn2"), out_c);
            if stride != 1 || in_c != out_c {
                conv(&mut params, &mut rng, &format!("{prefix}.down.conv"), out_c, in_c, 1);
                bn(&mut params, &mut buffers, &format!("{prefix}.down.bn"), out_c);
            }
            in_c = out_c;
        }
    }

    let feat = channels[3];
    params.insert(
        "fc.weight".into(),
        init::he_normal(&mut rng, &[feat, spec.num_classes()], feat),
    );
    params.insert("fc.bias".into(), Tensor::zeros(&[spec.num_classes()]));

    let params: BTreeMap<String, Tensor> =
        params.into_iter().map(|(k, v)| (k, v.requires_grad(true))).collect();
    let trainable = params.keys().map(|k| (k.clone(), true)).collect();
    Ok(Model { spec: spec.clone(), params, buffers, trainable, norm: None })
}

/// One basic block: two 3x3 conv+bn stages with a ReLU between, an
/// identity (or strided 1x1 projection) skip, and a final ReLU.
fn block_forward(
    model: &Model,
    tape: &Tape,
    prefix: &str,
    x: &Tensor,
    stride: usize,
    phase: Phase,
    updates: &mut Vec<(String, Tensor)>,
) -> Result<Tensor, ModelError> {
    let w1 = &model.params[&format!("{prefix}.conv1.weight")];
    let h = ops::conv2d(tape, x, w1, None, (stride, stride), (1, 1))?;
    let (h, up) = named_batch_norm(model, tape, &h, &format!("{prefix}.bn1"), phase)?;
    updates.extend(up);
    let h = ops::relu(tape, &h)?;
    let w2 = &model.params[&format!("{prefix}.conv2.weight")];
    let h = ops::conv2d(tape, &h, w2, None, (1, 1), (1, 1))?;
    let (h, up) = named_batch_norm(model, tape, &h, &format!("{prefix}.bn2"), phase)?;
    updates.extend(up);

    let down_name = format!("{prefix}.down.conv.weight");
    let skip = if model.params.contains_key(&down_name) {
        let s = ops::conv2d(tape, x, &model.params[&down_name], None, (stride, stride), (0, 0))?;
        let (s, up) = named_batch_norm(model, tape, &s, &format!("{prefix}.down.bn"), phase)?;
        updates.extend(up);
        s
    } else {
        x.clone()
    };
    let sum = ops::add(tape, &h, &skip)?;
    Ok(ops::relu(tape, &sum)?)
}

pub(super) fn forward(
    model: &Model,
    tape: &Tape,
    x: &Tensor,
    phase: Phase,
    capture: &[Probe],
) -> Result<(ForwardOutput, Vec<(String, Tensor)>), ModelError> {
    let (_, blocks) = plan(&model.spec);
    let mut updates = Vec::new();

    let h = ops::conv2d(tape, x, &model.params["stem.conv.weight"], None, (2, 2), (3, 3))?;
    let (h, up) = named_batch_norm(model, tape, &h, "stem.bn", phase)?;
    updates.extend(up);
    let h = ops::relu(tape, &h)?;
    let mut h = ops::max_pool2d(tape, &h, (3, 3), (2, 2), (1, 1))?;

    for (s, &n_blocks) in blocks.iter().enumerate() {
        for b in 0..n_blocks {
            let stride = if s > 0 && b == 0 { 2 } else { 1 };
            h = block_forward(model, tape, &format!("layer{}.{b}", s + 1), &h, stride, phase, &mut updates)?;
        }
    }

    let features = if capture.contains(&Probe::Features) {
        if tape.is_recording() {
            tape.retain_grad(&h)?;
        }
        Some(h.clone())
    } else {
        None
    };

    let pooled = ops::global_avg_pool(tape, &h)?;
    let logits = super::linear(tape, &pooled, &model.params["fc.weight"], &model.params["fc.bias"])?;
    Ok((ForwardOutput { logits, features, attention: Vec::new() }, updates))
}

/// Run a single named residual block in eval mode: the public window for
/// the skip-connection identity invariant (a block whose conv weights and
/// batch-norm gammas are all zero maps non-negative inputs to themselves).
pub fn eval_block(model: &Model, tape: &Tape, prefix: &str, x: &Tensor) -> Result<Tensor, ModelError> {
    let ModelSpec::Resnet18 { .. } = model.spec else {
        return Err(ModelError::InvalidSpec("eval_block needs a resnet model".into()));
    };
    if !model.params.contains_key(&format!("{prefix}.conv1.weight")) {
        return Err(ModelError::InvalidSpec(format!("no residual block named {prefix}")));
    }
    let stride = if model.params.contains_key(&format!("{prefix}.down.conv.weight")) {
        2
    } else {
        1
    };
    // the only stride-1 projection is layer1.0 when the stem width differs,
    // which the canonical plans never produce
    let mut updates = Vec::new();
    let out = block_forward(model, tape, prefix, x, stride, Phase::Eval, &mut updates)?;
    debug_assert!(updates.is_empty());
    Ok(out)
}
