//! Vision transformer: non-overlapping patch embedding, learnable class
//! token and positional embeddings, pre-norm blocks (attention then MLP,
//! residuals around each), class-token readout.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use crate::tensor::ops;
use crate::tensor::{Tape, Tensor};

use super::{init, linear, ForwardOutput, Model, ModelError, ModelSpec, Probe, LN_EPS};

struct Geom {
    patch: usize,
    depth: usize,
    heads: usize,
    hidden: usize,
    mlp: usize,
    tokens: usize,
}

fn geom(spec: &ModelSpec) -> Geom {
    let ModelSpec::Vit {
        input_resolution, patch_size, depth, heads, hidden_dim, mlp_dim, ..
    } = *spec
    else {
        unreachable!("vit builder called with non-vit spec");
    };
    let grid = input_resolution / patch_size;
    Geom {
        patch: patch_size,
        depth,
        heads,
        hidden: hidden_dim,
        mlp: mlp_dim,
        tokens: grid * grid + 1,
    }
}

pub(super) fn build(spec: &ModelSpec, seed: u64) -> Result<Model, ModelError> {
    let g = geom(spec);
    let mut rng = init::param_stream(seed);
    let mut params = BTreeMap::new();

    let lin = |params: &mut BTreeMap<String, Tensor>,
                   rng: &mut ChaCha8Rng,
                   name: &str,
                   i: usize,
                   o: usize| {
        params.insert(format!("{name}.weight"), init::trunc_normal(rng, &[i, o], 0.02));
        params.insert(format!("{name}.bias"), Tensor::zeros(&[o]));
    };
    let ln = |params: &mut BTreeMap<String, Tensor>, name: &str, d: usize| {
        params.insert(format!("{name}.gamma"), Tensor::ones(&[d]));
        params.insert(format!("{name}.beta"), Tensor::zeros(&[d]));
    };

    params.insert(
        "patch.weight".into(),
        init::trunc_normal(&mut rng, &[g.hidden, 3, g.patch, g.patch], 0.02),
    );
    params.insert("patch.bias".into(), Tensor::zeros(&[g.hidden]));
    params.insert("cls_token".into(), init::trunc_normal(&mut rng, &[1, 1, g.hidden], 0.02));
    params.insert(
        "pos_embed".into(),
        init::trunc_normal(&mut rng, &[1, g.tokens, g.hidden], 0.02),
    );

    for i in 0..g.depth {
        let p = format!("blocks.{i}");
        ln(&mut params, &format!("{p}.ln1"), g.hidden);
        lin(&mut params, &mut rng, &format!("{p}.attn.qkv"), g.hidden, 3 * g.hidden);
        lin(&mut params, &mut rng, &format!("{p}.attn.proj"), g.hidden, g.hidden);
        ln(&mut params, &format!("{p}.ln2"), g.hidden);
        lin(&mut params, &mut rng, &format!("{p}.mlp.fc1"), g.hidden, g.mlp);
        lin(&mut params, &mut rng, &format!("{p}.mlp.fc2"), g.mlp, g.hidden);
    }

    ln(&mut params, "norm", g.hidden);
    lin(&mut params, &mut rng, "head", g.hidden, spec.num_classes());

    let params: BTreeMap<String, Tensor> =
        params.into_iter().map(|(k, v)| (k, v.requires_grad(true))).collect();
    let trainable = params.keys().map(|k| (k.clone(), true)).collect();
    Ok(Model {
        spec: spec.clone(),
        params,
        buffers: BTreeMap::new(),
        trainable,
        norm: None,
    })
}

pub(super) fn forward(
    model: &Model,
    tape: &Tape,
    x: &Tensor,
    capture: &[Probe],
) -> Result<(ForwardOutput, Vec<(String, Tensor)>), ModelError> {
    let g = geom(&model.spec);
    let n = x.shape()[0];
    let (t, hd, heads) = (g.tokens, g.hidden, g.heads);
    let dh = hd / heads;
    let p = |name: &str| &model.params[name];

    // patches to tokens
    let h = ops::conv2d(
        tape,
        x,
        p("patch.weight"),
        Some(p("patch.bias")),
        (g.patch, g.patch),
        (0, 0),
    )?;
    let h = ops::reshape(tape, &h, vec![n, hd, t - 1])?;
    let tokens = ops::permute(tape, &h, &[0, 2, 1])?;

    // class token broadcast to the batch, then positions
    let anchor = Tensor::ones(&[n, 1, 1]);
    let cls = ops::mul(tape, &anchor, p("cls_token"))?;
    let h = ops::concat(tape, &[&cls, &tokens], 1)?;
    let mut h = ops::add(tape, &h, p("pos_embed"))?;

    let mut attention = Vec::new();
    let want_attention = capture.contains(&Probe::Attention);
    let scale = 1.0 / (dh as f32).sqrt();

    for i in 0..g.depth {
        let pre = format!("blocks.{i}");

        // attention sublayer
        let y = ops::layer_norm(tape, &h, p(&format!("{pre}.ln1.gamma")), p(&format!("{pre}.ln1.beta")), LN_EPS)?;
        let flat = ops::reshape(tape, &y, vec![n * t, hd])?;
        let qkv = linear(tape, &flat, p(&format!("{pre}.attn.qkv.weight")), p(&format!("{pre}.attn.qkv.bias")))?;
        let qkv = ops::reshape(tape, &qkv, vec![n, t, 3 * hd])?;

        let to_heads = |part: usize| -> Result<Tensor, ModelError> {
            let s = ops::slice(tape, &qkv, 2, part * hd, hd)?;
            let s = ops::reshape(tape, &s, vec![n, t, heads, dh])?;
            let s = ops::permute(tape, &s, &[0, 2, 1, 3])?;
            Ok(ops::reshape(tape, &s, vec![n * heads, t, dh])?)
        };
        let q = to_heads(0)?;
        let v = to_heads(2)?;
        let k = ops::slice(tape, &qkv, 2, hd, hd)?;
        let k = ops::reshape(tape, &k, vec![n, t, heads, dh])?;
        let k = ops::permute(tape, &k, &[0, 2, 3, 1])?;
        let k_t = ops::reshape(tape, &k, vec![n * heads, dh, t])?;

        let logits = ops::matmul(tape, &q, &k_t)?;
        let logits = ops::scale(tape, &logits, scale)?;
        let attn = ops::softmax(tape, &logits, 2)?;
        if want_attention {
            attention.push(ops::reshape(tape, &attn, vec![n, heads, t, t])?);
        }

        let ctx = ops::matmul(tape, &attn, &v)?;
        let ctx = ops::reshape(tape, &ctx, vec![n, heads, t, dh])?;
        let ctx = ops::permute(tape, &ctx, &[0, 2, 1, 3])?;
        let ctx = ops::reshape(tape, &ctx, vec![n * t, hd])?;
        let proj = linear(tape, &ctx, p(&format!("{pre}.attn.proj.weight")), p(&format!("{pre}.attn.proj.bias")))?;
        let proj = ops::reshape(tape, &proj, vec![n, t, hd])?;
        h = ops::add(tape, &h, &proj)?;

        // mlp sublayer
        let y = ops::layer_norm(tape, &h, p(&format!("{pre}.ln2.gamma")), p(&format!("{pre}.ln2.beta")), LN_EPS)?;
        let flat = ops::reshape(tape, &y, vec![n * t, hd])?;
        let m = linear(tape, &flat, p(&format!("{pre}.mlp.fc1.weight")), p(&format!("{pre}.mlp.fc1.bias")))?;
        let m = ops::gelu(tape, &m)?;
        let m = linear(tape, &m, p(&format!("{pre}.mlp.fc2.weight")), p(&format!("{pre}.mlp.fc2.bias")))?;
        let m = ops::reshape(tape, &m, vec![n, t, hd])?;
        h = ops::add(tape, &h, &m)?;
    }

    let h = ops::layer_norm(tape, &h, p("norm.gamma"), p("norm.beta"), LN_EPS)?;
    let cls_out = ops::slice(tape, &h, 1, 0, 1)?;
    let cls_out = ops::reshape(tape, &cls_out, vec![n, hd])?;
    let logits = linear(tape, &cls_out, p("head.weight"), p("head.bias"))?;

    Ok((ForwardOutput { logits, features: None, attention }, Vec::new()))
}
