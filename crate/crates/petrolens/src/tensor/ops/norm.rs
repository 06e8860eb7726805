//! Batch and layer normalization.

use super::Op;
use crate::tensor::tape::Node;
use crate::tensor::{Tape, Tensor, TensorError};

/// Whether batch norm consumes batch statistics or running estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Result of [`batch_norm2d`]: the normalized activations plus, in train
/// phase, the updated running estimates to store back into the model.
#[derive(Debug)]
pub struct BatchNormOutput {
    pub output: Tensor,
    pub running: Option<(Tensor, Tensor)>,
}

/// Channel-wise batch normalization of `x [n, c, h, w]`.
///
/// Train phase normalizes with biased batch variance and folds unbiased
/// variance into the running estimates at rate `momentum`. Eval phase
/// normalizes with the provided running estimates and is differentiable
/// as a per-channel affine map; it errors if no estimates exist yet.
pub fn batch_norm2d(
    tape: &Tape,
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running: Option<(&Tensor, &Tensor)>,
    phase: Phase,
    momentum: f32,
    eps: f32,
) -> Result<BatchNormOutput, TensorError> {
    let &[n, c, h, w] = x.shape() else {
        return Err(TensorError::ShapeMismatch(format!(
            "batch_norm2d: expected [n,c,h,w], got {:?}",
            x.shape()
        )));
    };
    for (name, t) in [("gamma", gamma), ("beta", beta)] {
        if t.shape() != [c] {
            return Err(TensorError::ShapeMismatch(format!(
                "batch_norm2d: {name} shape {:?} does not match {c} channels",
                t.shape()
            )));
        }
    }
    if let Some((rm, rv)) = running {
        if rm.shape() != [c] || rv.shape() != [c] {
            return Err(TensorError::ShapeMismatch(format!(
                "batch_norm2d: running stats {:?}/{:?} do not match {c} channels",
                rm.shape(),
                rv.shape()
            )));
        }
    }

    let m = n * h * w;
    let (mean, var, new_running) = match phase {
        Phase::Train => {
            if m < 2 {
                return Err(TensorError::InvalidConfig(format!(
                    "batch_norm2d: train phase needs at least 2 values per channel, got {m}"
                )));
            }
            let (mean, var) = channel_moments(x.data(), n, c, h * w);
            let new_running = running.map(|(rm, rv)| {
                let bessel = m as f32 / (m - 1) as f32;
                let nm: Vec<f32> = rm
                    .data()
                    .iter()
                    .zip(&mean)
                    .map(|(&r, &b)| (1.0 - momentum) * r + momentum * b)
                    .collect();
                let nv: Vec<f32> = rv
                    .data()
                    .iter()
                    .zip(&var)
                    .map(|(&r, &b)| (1.0 - momentum) * r + momentum * b * bessel)
                    .collect();
                (
                    Tensor::from_vec(vec![c], nm).expect("stat shape fixed"),
                    Tensor::from_vec(vec![c], nv).expect("stat shape fixed"),
                )
            });
            (mean, var, new_running)
        }
        Phase::Eval => {
            let Some((rm, rv)) = running else {
                return Err(TensorError::UninitializedStats);
            };
            (rm.data().to_vec(), rv.data().to_vec(), None)
        }
    };

    let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let (gd, bd) = (gamma.data(), beta.data());
    let hw = h * w;
    let mut out = vec![0.0f32; x.numel()];
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * hw;
            let (mu, is, ga, be) = (mean[ch], inv_std[ch], gd[ch], bd[ch]);
            for (o, &v) in out[base..base + hw].iter_mut().zip(&x.data()[base..base + hw]) {
                *o = (v - mu) * is * ga + be;
            }
        }
    }
    let out = Tensor::from_vec(x.shape().to_vec(), out)?;
    tape.record(Op::BatchNorm { phase, mean, inv_std }, &[x, gamma, beta], &out);
    Ok(BatchNormOutput { output: out, running: new_running })
}

/// Per-channel biased mean and variance over the `n * hw` reduce set,
/// accumulated in f64.
fn channel_moments(data: &[f32], n: usize, c: usize, hw: usize) -> (Vec<f32>, Vec<f32>) {
    let m = (n * hw) as f64;
    let mut mean = vec![0.0f64; c];
    let mut sq = vec![0.0f64; c];
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * hw;
            for &v in &data[base..base + hw] {
                mean[ch] += v as f64;
                sq[ch] += (v as f64) * (v as f64);
            }
        }
    }
    let mean_f32: Vec<f32> = mean.iter().map(|&s| (s / m) as f32).collect();
    let var: Vec<f32> = sq
        .iter()
        .zip(&mean)
        .map(|(&s, &mu)| ((s / m - (mu / m) * (mu / m)).max(0.0)) as f32)
        .collect();
    (mean_f32, var)
}

pub(super) fn backward_batch_norm(
    phase: Phase,
    mean: &[f32],
    inv_std: &[f32],
    inputs: &[&Node],
    grad_out: &[f32],
    want: &[bool],
) -> Vec<Option<Vec<f32>>> {
    let (x, gamma) = (inputs[0], inputs[1]);
    let (n, c, hw) = (x.shape[0], x.shape[1], x.shape[2] * x.shape[3]);
    let m = (n * hw) as f32;

    // Per-channel sums of dy and dy*xhat feed every formula below.
    let mut sum_dy = vec![0.0f64; c];
    let mut sum_dy_xhat = vec![0.0f64; c];
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * hw;
            let (mu, is) = (mean[ch], inv_std[ch]);
            for (&g, &v) in grad_out[base..base + hw].iter().zip(&x.data[base..base + hw]) {
                sum_dy[ch] += g as f64;
                sum_dy_xhat[ch] += (g * (v - mu) * is) as f64;
            }
        }
    }

    let gx = want[0].then(|| {
        let mut gx = vec![0.0f32; x.data.len()];
        for img in 0..n {
            for ch in 0..c {
                let base = (img * c + ch) * hw;
                let (mu, is, ga) = (mean[ch], inv_std[ch], gamma.data[ch]);
                match phase {
                    Phase::Train => {
                        let mean_dy = (sum_dy[ch] / m as f64) as f32;
                        let mean_dy_xhat = (sum_dy_xhat[ch] / m as f64) as f32;
                        for ((o, &g), &v) in gx[base..base + hw]
                            .iter_mut()
                            .zip(&grad_out[base..base + hw])
                            .zip(&x.data[base..base + hw])
                        {
                            let xhat = (v - mu) * is;
                            *o = ga * is * (g - mean_dy - xhat * mean_dy_xhat);
                        }
                    }
                    Phase::Eval => {
                        for (o, &g) in gx[base..base + hw].iter_mut().zip(&grad_out[base..base + hw])
                        {
                            *o = ga * is * g;
                        }
                    }
                }
            }
        }
        gx
    });
    let gg = want[1].then(|| sum_dy_xhat.iter().map(|&s| s as f32).collect());
    let gb = want[2].then(|| sum_dy.iter().map(|&s| s as f32).collect());
    vec![gx, gg, gb]
}

/// Normalize `x [..., d]` over its last axis, then scale and shift with
/// `gamma`/`beta` `[d]`.
pub fn layer_norm(
    tape: &Tape,
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f32,
) -> Result<Tensor, TensorError> {
    let d = *x.shape().last().ok_or_else(|| {
        TensorError::ShapeMismatch("layer_norm: input must have at least 1 axis".into())
    })?;
    for (name, t) in [("gamma", gamma), ("beta", beta)] {
        if t.shape() != [d] {
            return Err(TensorError::ShapeMismatch(format!(
                "layer_norm: {name} shape {:?} does not match last axis {d}",
                t.shape()
            )));
        }
    }
    let rows = x.numel() / d;
    let (gd, bd) = (gamma.data(), beta.data());
    let mut mean = vec![0.0f32; rows];
    let mut inv_std = vec![0.0f32; rows];
    let mut out = vec![0.0f32; x.numel()];
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        let mu = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v as f64 - mu) * (v as f64 - mu)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps as f64).sqrt();
        mean[r] = mu as f32;
        inv_std[r] = is as f32;
        for (o, (&v, (&ga, &be))) in
            out[r * d..(r + 1) * d].iter_mut().zip(row.iter().zip(gd.iter().zip(bd)))
        {
            *o = ((v as f64 - mu) * is) as f32 * ga + be;
        }
    }
    let out = Tensor::from_vec(x.shape().to_vec(), out)?;
    tape.record(Op::LayerNorm { mean, inv_std }, &[x, gamma, beta], &out);
    Ok(out)
}

pub(super) fn backward_layer_norm(
    mean: &[f32],
    inv_std: &[f32],
    inputs: &[&Node],
    grad_out: &[f32],
    want: &[bool],
) -> Vec<Option<Vec<f32>>> {
    let (x, gamma) = (inputs[0], inputs[1]);
    let d = *x.shape.last().expect("recorded op had valid shapes");
    let rows = x.data.len() / d;

    let mut gx = want[0].then(|| vec![0.0f32; x.data.len()]);
    let mut gg = want[1].then(|| vec![0.0f32; d]);
    let mut gb = want[2].then(|| vec![0.0f32; d]);
    for r in 0..rows {
        let row = &x.data[r * d..(r + 1) * d];
        let dy = &grad_out[r * d..(r + 1) * d];
        let (mu, is) = (mean[r], inv_std[r]);
        if let Some(gx) = gx.as_mut() {
            // dxhat = dy * gamma; dx = is*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
            let mut s1 = 0.0f64;
            let mut s2 = 0.0f64;
            for ((&g, &v), &ga) in dy.iter().zip(row).zip(gamma.data.iter()) {
                let dxhat = (g * ga) as f64;
                s1 += dxhat;
                s2 += dxhat * ((v - mu) * is) as f64;
            }
            let (m1, m2) = ((s1 / d as f64) as f32, (s2 / d as f64) as f32);
            for ((o, (&g, &v)), &ga) in gx[r * d..(r + 1) * d]
                .iter_mut()
                .zip(dy.iter().zip(row))
                .zip(gamma.data.iter())
            {
                let xhat = (v - mu) * is;
                *o = is * (g * ga - m1 - xhat * m2);
            }
        }
        if let Some(gg) = gg.as_mut() {
            for ((go, &g), &v) in gg.iter_mut().zip(dy).zip(row) {
                *go += g * (v - mu) * is;
            }
        }
        if let Some(gb) = gb.as_mut() {
            for (bo, &g) in gb.iter_mut().zip(dy) {
                *bo += g;
            }
        }
    }
    vec![gx, gg, gb]
}
