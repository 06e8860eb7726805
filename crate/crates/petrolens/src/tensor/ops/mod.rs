//! Differentiable tensor operations.
//!
//! Each op validates shapes, computes its output into a fresh buffer, and
//! records itself on the given [`Tape`] together with whatever context its
//! backward needs. Inputs are never mutated.

pub mod conv;
pub mod gemm;
pub mod linalg;
pub mod loss;
pub mod norm;
pub mod pool;
pub mod shape;

use std::sync::Arc;

use super::tape::{BackwardMode, Node};
use super::{broadcast_shape, strides_of, Tape, Tensor, TensorError};

pub use conv::conv2d;
pub use gemm::{parallel_enabled, set_parallel};
pub use linalg::matmul;
pub use loss::{cross_entropy_loss, softmax};
pub use norm::{batch_norm2d, layer_norm, BatchNormOutput, Phase};
pub use pool::{global_avg_pool, max_pool2d};
pub use shape::{concat, permute, reshape, slice, sum_all};

/// Recorded operation kind plus the context its backward pass needs.
pub(crate) enum Op {
    Add,
    Mul,
    Scale { factor: f32 },
    Matmul,
    Conv2d { stride: (usize, usize), padding: (usize, usize) },
    BatchNorm { phase: Phase, mean: Vec<f32>, inv_std: Vec<f32> },
    LayerNorm { mean: Vec<f32>, inv_std: Vec<f32> },
    Relu,
    Gelu,
    Softmax { axis: usize },
    MaxPool { argmax: Vec<u32> },
    GlobalAvgPool,
    CrossEntropy { labels: Vec<usize>, probs: Arc<Vec<f32>> },
    Reshape,
    Permute { axes: Vec<usize> },
    Concat { axis: usize },
    Slice { axis: usize, start: usize },
    SumAll,
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Scale { .. } => "scale",
            Op::Matmul => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batch_norm2d",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Relu => "relu",
            Op::Gelu => "gelu",
            Op::Softmax { .. } => "softmax",
            Op::MaxPool { .. } => "max_pool2d",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Reshape => "reshape",
            Op::Permute { .. } => "permute",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::SumAll => "sum_all",
        }
    }

    /// Vector-Jacobian product: gradient for each input, `None` where the
    /// input does not need one (`want[i]` is false).
    pub(crate) fn backward(
        &self,
        inputs: &[&Node],
        output: &Node,
        grad_out: &[f32],
        mode: BackwardMode,
        want: &[bool],
    ) -> Vec<Option<Vec<f32>>> {
        match self {
            Op::Add => backward_add(inputs, grad_out, want),
            Op::Mul => backward_mul(inputs, grad_out, want),
            Op::Scale { factor } => {
                vec![want[0].then(|| grad_out.iter().map(|g| g * factor).collect())]
            }
            Op::Matmul => linalg::backward(inputs, grad_out, want),
            Op::Conv2d { stride, padding } => {
                conv::backward(*stride, *padding, inputs, output, grad_out, want)
            }
            Op::BatchNorm { phase, mean, inv_std } => {
                norm::backward_batch_norm(*phase, mean, inv_std, inputs, grad_out, want)
            }
            Op::LayerNorm { mean, inv_std } => {
                norm::backward_layer_norm(mean, inv_std, inputs, grad_out, want)
            }
            Op::Relu => vec![want[0].then(|| backward_relu(inputs[0], grad_out, mode))],
            Op::Gelu => vec![want[0].then(|| backward_gelu(inputs[0], grad_out))],
            Op::Softmax { axis } => {
                vec![want[0].then(|| loss::backward_softmax(*axis, output, grad_out))]
            }
            Op::MaxPool { argmax } => {
                vec![want[0].then(|| pool::backward_max_pool(inputs[0], argmax, grad_out))]
            }
            Op::GlobalAvgPool => {
                vec![want[0].then(|| pool::backward_global_avg_pool(inputs[0], grad_out))]
            }
            Op::CrossEntropy { labels, probs } => {
                vec![want[0].then(|| loss::backward_cross_entropy(labels, probs, grad_out))]
            }
            Op::Reshape => vec![want[0].then(|| grad_out.to_vec())],
            Op::Permute { axes } => {
                vec![want[0].then(|| shape::backward_permute(axes, inputs[0], output, grad_out))]
            }
            Op::Concat { axis } => shape::backward_concat(*axis, inputs, grad_out, want),
            Op::Slice { axis, start } => {
                vec![want[0]
                    .then(|| shape::backward_slice(*axis, *start, inputs[0], output, grad_out))]
            }
            Op::SumAll => {
                vec![want[0].then(|| vec![grad_out[0]; inputs[0].data.len()])]
            }
        }
    }
}

// ── Elementwise binary ops with trailing-dimension broadcasting ─────────

/// Elementwise sum with numpy-style broadcasting.
pub fn add(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    binary(tape, a, b, Op::Add, |x, y| x + y)
}

/// Elementwise product with numpy-style broadcasting.
pub fn mul(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    binary(tape, a, b, Op::Mul, |x, y| x * y)
}

/// Multiply every element by a constant.
pub fn scale(tape: &Tape, x: &Tensor, factor: f32) -> Result<Tensor, TensorError> {
    let data = x.data().iter().map(|v| v * factor).collect();
    let out = Tensor::from_vec(x.shape().to_vec(), data)?;
    tape.record(Op::Scale { factor }, &[x], &out);
    Ok(out)
}

fn binary(
    tape: &Tape,
    a: &Tensor,
    b: &Tensor,
    op: Op,
    f: impl Fn(f32, f32) -> f32,
) -> Result<Tensor, TensorError> {
    let out_shape = broadcast_shape(a.shape(), b.shape())?;
    let data = if a.shape() == b.shape() {
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
    } else {
        broadcast_map(&out_shape, a, b, &f)
    };
    let out = Tensor::from_vec(out_shape, data)?;
    tape.record(op, &[a, b], &out);
    Ok(out)
}

/// Strides of `shape` padded/projected into `out` rank, with 0 stride on
/// broadcast (extent-1 or missing) axes.
fn broadcast_strides(shape: &[usize], out_rank: usize) -> Vec<usize> {
    let strides = strides_of(shape);
    let mut padded = vec![0usize; out_rank];
    let offset = out_rank - shape.len();
    for (i, (&dim, &st)) in shape.iter().zip(&strides).enumerate() {
        padded[offset + i] = if dim == 1 { 0 } else { st };
    }
    padded
}

fn broadcast_map(
    out_shape: &[usize],
    a: &Tensor,
    b: &Tensor,
    f: &impl Fn(f32, f32) -> f32,
) -> Vec<f32> {
    let rank = out_shape.len();
    let sa = broadcast_strides(a.shape(), rank);
    let sb = broadcast_strides(b.shape(), rank);
    let numel: usize = out_shape.iter().product();
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let (ad, bd) = (a.data(), b.data());
    let (mut oa, mut ob) = (0usize, 0usize);
    for _ in 0..numel {
        out.push(f(ad[oa], bd[ob]));
        // odometer increment
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            oa -= sa[ax] * out_shape[ax];
            ob -= sb[ax] * out_shape[ax];
        }
    }
    out
}

/// Sum `grad` (shaped `grad_shape`) down to `target_shape` by collapsing
/// broadcast axes.
pub(crate) fn reduce_to_shape(
    grad: &[f32],
    grad_shape: &[usize],
    target_shape: &[usize],
) -> Vec<f32> {
    if grad_shape == target_shape {
        return grad.to_vec();
    }
    let rank = grad_shape.len();
    let st = broadcast_strides(target_shape, rank);
    let target_numel: usize = target_shape.iter().product();
    let mut out = vec![0.0f32; target_numel];
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for &g in grad {
        out[off] += g;
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += st[ax];
            if idx[ax] < grad_shape[ax] {
                break;
            }
            idx[ax] = 0;
            off -= st[ax] * grad_shape[ax];
        }
    }
    out
}

fn backward_add(inputs: &[&Node], grad_out: &[f32], want: &[bool]) -> Vec<Option<Vec<f32>>> {
    let out_shape = out_shape_of(inputs);
    inputs
        .iter()
        .zip(want)
        .map(|(node, &w)| w.then(|| reduce_to_shape(grad_out, &out_shape, &node.shape)))
        .collect()
}

fn backward_mul(inputs: &[&Node], grad_out: &[f32], want: &[bool]) -> Vec<Option<Vec<f32>>> {
    let (a, b) = (inputs[0], inputs[1]);
    let out_shape = out_shape_of(inputs);
    let rank = out_shape.len();
    let sa = broadcast_strides(&a.shape, rank);
    let sb = broadcast_strides(&b.shape, rank);
    let mut ga = want[0].then(|| vec![0.0f32; a.data.len()]);
    let mut gb = want[1].then(|| vec![0.0f32; b.data.len()]);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for &g in grad_out {
        if let Some(ga) = ga.as_mut() {
            ga[oa] += g * b.data[ob];
        }
        if let Some(gb) = gb.as_mut() {
            gb[ob] += g * a.data[oa];
        }
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            oa -= sa[ax] * out_shape[ax];
            ob -= sb[ax] * out_shape[ax];
        }
    }
    vec![ga, gb]
}

fn out_shape_of(inputs: &[&Node]) -> Vec<usize> {
    broadcast_shape(&inputs[0].shape, &inputs[1].shape).expect("recorded op had valid shapes")
}

// ── Activations ─────────────────────────────────────────────────────────

/// max(x, 0)
pub fn relu(tape: &Tape, x: &Tensor) -> Result<Tensor, TensorError> {
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    let out = Tensor::from_vec(x.shape().to_vec(), data)?;
    tape.record(Op::Relu, &[x], &out);
    Ok(out)
}

fn backward_relu(x: &Node, grad_out: &[f32], mode: BackwardMode) -> Vec<f32> {
    match mode {
        BackwardMode::Standard => x
            .data
            .iter()
            .zip(grad_out)
            .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
            .collect(),
        BackwardMode::Guided => {
            super::tape::note_guided_gate();
            x.data
                .iter()
                .zip(grad_out)
                .map(|(&v, &g)| if v > 0.0 && g > 0.0 { g } else { 0.0 })
                .collect()
        }
    }
}

/// Gaussian error linear unit, tanh form:
/// gelu(x) = 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))
pub fn gelu(tape: &Tape, x: &Tensor) -> Result<Tensor, TensorError> {
    let data = x.data().iter().map(|&v| gelu_scalar(v)).collect();
    let out = Tensor::from_vec(x.shape().to_vec(), data)?;
    tape.record(Op::Gelu, &[x], &out);
    Ok(out)
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_A: f32 = 0.044715;

fn gelu_scalar(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn backward_gelu(x: &Node, grad_out: &[f32]) -> Vec<f32> {
    x.data
        .iter()
        .zip(grad_out)
        .map(|(&v, &g)| {
            let u = GELU_C * (v + GELU_A * v * v * v);
            let t = u.tanh();
            let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
            g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
        })
        .collect()
}
