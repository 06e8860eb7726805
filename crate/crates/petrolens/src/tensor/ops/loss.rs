//! Softmax and classification loss.

use std::sync::Arc;

use super::Op;
use crate::tensor::tape::Node;
use crate::tensor::{Tape, Tensor, TensorError};

/// Softmax along `axis`, shifted by the line max so exp never overflows.
pub fn softmax(tape: &Tape, x: &Tensor, axis: usize) -> Result<Tensor, TensorError> {
    if axis >= x.ndim() {
        return Err(TensorError::InvalidConfig(format!(
            "softmax: axis {axis} out of range for rank {}",
            x.ndim()
        )));
    }
    let out = softmax_raw(x.data(), x.shape(), axis);
    let out = Tensor::from_vec(x.shape().to_vec(), out)?;
    tape.record(Op::Softmax { axis }, &[x], &out);
    Ok(out)
}

fn softmax_raw(data: &[f32], shape: &[usize], axis: usize) -> Vec<f32> {
    let d = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![0.0f32; data.len()];
    for r in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (r * d + j) * inner + i;
            let mut max = f32::NEG_INFINITY;
            for j in 0..d {
                max = max.max(data[at(j)]);
            }
            let mut sum = 0.0f64;
            for j in 0..d {
                let e = ((data[at(j)] - max) as f64).exp();
                out[at(j)] = e as f32;
                sum += e;
            }
            let inv = (1.0 / sum) as f32;
            for j in 0..d {
                out[at(j)] *= inv;
            }
        }
    }
    out
}

pub(super) fn backward_softmax(axis: usize, output: &Node, grad_out: &[f32]) -> Vec<f32> {
    // dx_j = y_j * (dy_j - sum_k dy_k * y_k), line by line
    let shape = &output.shape;
    let d = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let y = &output.data;
    let mut gx = vec![0.0f32; y.len()];
    for r in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (r * d + j) * inner + i;
            let dot: f64 =
                (0..d).map(|j| (grad_out[at(j)] * y[at(j)]) as f64).sum();
            for j in 0..d {
                gx[at(j)] = y[at(j)] * (grad_out[at(j)] - dot as f32);
            }
        }
    }
    gx
}

/// Mean negative log-likelihood of `labels` under softmax of
/// `logits [n, classes]`. Returns a `[1]` scalar; the log-sum-exp runs in
/// f64 so the loss is stable for any logit scale.
pub fn cross_entropy_loss(
    tape: &Tape,
    logits: &Tensor,
    labels: &[usize],
) -> Result<Tensor, TensorError> {
    let &[n, classes] = logits.shape() else {
        return Err(TensorError::ShapeMismatch(format!(
            "cross_entropy_loss: expected [n, classes], got {:?}",
            logits.shape()
        )));
    };
    if labels.len() != n {
        return Err(TensorError::ShapeMismatch(format!(
            "cross_entropy_loss: {} labels for {n} rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(TensorError::LabelOutOfRange { label: bad, classes });
    }

    let data = logits.data();
    let mut probs = vec![0.0f32; data.len()];
    let mut total = 0.0f64;
    for (r, &label) in labels.iter().enumerate() {
        let row = &data[r * classes..(r + 1) * classes];
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0f64;
        for (p, &v) in probs[r * classes..(r + 1) * classes].iter_mut().zip(row) {
            let e = ((v - max) as f64).exp();
            *p = e as f32;
            sum += e;
        }
        let inv = 1.0 / sum;
        for p in &mut probs[r * classes..(r + 1) * classes] {
            *p = (*p as f64 * inv) as f32;
        }
        // -log p[label] = log(sum) + max - logit[label]
        total += sum.ln() + (max - row[label]) as f64;
    }
    let loss = Tensor::from_vec(vec![1], vec![(total / n as f64) as f32])?;
    tape.record(
        Op::CrossEntropy { labels: labels.to_vec(), probs: Arc::new(probs) },
        &[logits],
        &loss,
    );
    Ok(loss)
}

pub(super) fn backward_cross_entropy(
    labels: &[usize],
    probs: &Arc<Vec<f32>>,
    grad_out: &[f32],
) -> Vec<f32> {
    let n = labels.len();
    let classes = probs.len() / n;
    let scale = grad_out[0] / n as f32;
    let mut gx: Vec<f32> = probs.iter().map(|&p| p * scale).collect();
    for (r, &label) in labels.iter().enumerate() {
        gx[r * classes + label] -= scale;
    }
    gx
}
