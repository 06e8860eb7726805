//! Spatial pooling.

use super::Op;
use crate::tensor::tape::Node;
use crate::tensor::{Tape, Tensor, TensorError};

/// Max pooling over `kernel` windows of `x [n, c, h, w]` with zero padding.
///
/// Padded positions never win the max (they are treated as -inf). Ties go
/// to the earliest input index, so backward routing is deterministic.
pub fn max_pool2d(
    tape: &Tape,
    x: &Tensor,
    kernel: (usize, usize),
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<Tensor, TensorError> {
    let &[n, c, h, w] = x.shape() else {
        return Err(TensorError::ShapeMismatch(format!(
            "max_pool2d: expected [n,c,h,w], got {:?}",
            x.shape()
        )));
    };
    let (kh, kw) = kernel;
    let (sh, sw) = stride;
    let (ph, pw) = padding;
    if sh == 0 || sw == 0 || kh == 0 || kw == 0 {
        return Err(TensorError::InvalidConfig(
            "max_pool2d: kernel and stride must be positive".into(),
        ));
    }
    if h + 2 * ph < kh || w + 2 * pw < kw {
        return Err(TensorError::ShapeMismatch(format!(
            "max_pool2d: window {kh}x{kw} exceeds padded input {}x{}",
            h + 2 * ph,
            w + 2 * pw
        )));
    }
    let out_h = (h + 2 * ph - kh) / sh + 1;
    let out_w = (w + 2 * pw - kw) / sw + 1;

    let mut out = vec![0.0f32; n * c * out_h * out_w];
    let mut argmax = vec![0u32; out.len()];
    let data = x.data();
    for plane in 0..n * c {
        let src = &data[plane * h * w..(plane + 1) * h * w];
        for oh in 0..out_h {
            for ow in 0..out_w {
                let mut best = f32::NEG_INFINITY;
                let mut best_at = 0u32;
                for ki in 0..kh {
                    let ih = (oh * sh + ki) as isize - ph as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for kj in 0..kw {
                        let iw = (ow * sw + kj) as isize - pw as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        let at = ih as usize * w + iw as usize;
                        if src[at] > best {
                            best = src[at];
                            best_at = at as u32;
                        }
                    }
                }
                let o = (plane * out_h + oh) * out_w + ow;
                out[o] = best;
                argmax[o] = plane as u32 * (h * w) as u32 + best_at;
            }
        }
    }
    let out = Tensor::from_vec(vec![n, c, out_h, out_w], out)?;
    tape.record(Op::MaxPool { argmax }, &[x], &out);
    Ok(out)
}

pub(super) fn backward_max_pool(x: &Node, argmax: &[u32], grad_out: &[f32]) -> Vec<f32> {
    let mut gx = vec![0.0f32; x.data.len()];
    for (&at, &g) in argmax.iter().zip(grad_out) {
        gx[at as usize] += g;
    }
    gx
}

/// Mean over the spatial axes: `[n, c, h, w] -> [n, c]`.
pub fn global_avg_pool(tape: &Tape, x: &Tensor) -> Result<Tensor, TensorError> {
    let &[n, c, h, w] = x.shape() else {
        return Err(TensorError::ShapeMismatch(format!(
            "global_avg_pool: expected [n,c,h,w], got {:?}",
            x.shape()
        )));
    };
    let hw = h * w;
    let out: Vec<f32> = x
        .data()
        .chunks(hw)
        .map(|plane| (plane.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32)
        .collect();
    let out = Tensor::from_vec(vec![n, c], out)?;
    tape.record(Op::GlobalAvgPool, &[x], &out);
    Ok(out)
}

pub(super) fn backward_global_avg_pool(x: &Node, grad_out: &[f32]) -> Vec<f32> {
    let hw = x.shape[2] * x.shape[3];
    let mut gx = Vec::with_capacity(x.data.len());
    for &g in grad_out {
        let share = g / hw as f32;
        gx.extend(std::iter::repeat(share).take(hw));
    }
    gx
}
