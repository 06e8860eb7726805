//! Shape-changing ops. All copy; there are no views on the tape.

use super::Op;
use crate::tensor::tape::Node;
use crate::tensor::{strides_of, Tape, Tensor, TensorError};

/// Same data, new shape. Element count must match.
pub fn reshape(tape: &Tape, x: &Tensor, shape: Vec<usize>) -> Result<Tensor, TensorError> {
    let out = Tensor::from_vec(shape, x.data().to_vec())?;
    if out.numel() != x.numel() {
        return Err(TensorError::ShapeMismatch(format!(
            "reshape: cannot view {:?} as {:?}",
            x.shape(),
            out.shape()
        )));
    }
    tape.record(Op::Reshape, &[x], &out);
    Ok(out)
}

/// Reorder axes: output axis `i` is input axis `axes[i]`.
pub fn permute(tape: &Tape, x: &Tensor, axes: &[usize]) -> Result<Tensor, TensorError> {
    let rank = x.ndim();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true))
    {
        return Err(TensorError::InvalidConfig(format!(
            "permute: {axes:?} is not a permutation of 0..{rank}"
        )));
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
    let data = permute_copy(x.data(), x.shape(), axes, &out_shape);
    let out = Tensor::from_vec(out_shape, data)?;
    tape.record(Op::Permute { axes: axes.to_vec() }, &[x], &out);
    Ok(out)
}

fn permute_copy(src: &[f32], in_shape: &[usize], axes: &[usize], out_shape: &[usize]) -> Vec<f32> {
    let rank = in_shape.len();
    let in_strides = strides_of(in_shape);
    // stride through src in output index order
    let walk: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let numel: usize = out_shape.iter().product();
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..numel {
        out.push(src[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += walk[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            off -= walk[ax] * out_shape[ax];
        }
    }
    out
}

pub(super) fn backward_permute(
    axes: &[usize],
    input: &Node,
    output: &Node,
    grad_out: &[f32],
) -> Vec<f32> {
    // inverse permutation routes the gradient back
    let mut inverse = vec![0usize; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inverse[a] = i;
    }
    permute_copy(grad_out, &output.shape, &inverse, &input.shape)
}

/// Concatenate along `axis`. All other extents must agree.
pub fn concat(tape: &Tape, parts: &[&Tensor], axis: usize) -> Result<Tensor, TensorError> {
    let first = parts
        .first()
        .ok_or_else(|| TensorError::InvalidConfig("concat: no inputs".into()))?;
    let rank = first.ndim();
    if axis >= rank {
        return Err(TensorError::InvalidConfig(format!(
            "concat: axis {axis} out of range for rank {rank}"
        )));
    }
    let mut out_shape = first.shape().to_vec();
    for p in &parts[1..] {
        if p.ndim() != rank
            || p.shape().iter().zip(first.shape()).enumerate().any(|(ax, (a, b))| {
                ax != axis && a != b
            })
        {
            return Err(TensorError::ShapeMismatch(format!(
                "concat: {:?} does not align with {:?} off axis {axis}",
                p.shape(),
                first.shape()
            )));
        }
        out_shape[axis] += p.shape()[axis];
    }

    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(out_shape.iter().product());
    for row in 0..outer {
        for p in parts {
            let span = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[row * span..(row + 1) * span]);
        }
    }
    let out = Tensor::from_vec(out_shape, out)?;
    tape.record(Op::Concat { axis }, parts, &out);
    Ok(out)
}

pub(super) fn backward_concat(
    axis: usize,
    inputs: &[&Node],
    grad_out: &[f32],
    want: &[bool],
) -> Vec<Option<Vec<f32>>> {
    let outer: usize = inputs[0].shape[..axis].iter().product();
    let inner: usize = inputs[0].shape[axis + 1..].iter().product();
    let spans: Vec<usize> = inputs.iter().map(|n| n.shape[axis] * inner).collect();
    let total: usize = spans.iter().sum();
    inputs
        .iter()
        .enumerate()
        .map(|(i, _)| {
            want[i].then(|| {
                let skip: usize = spans[..i].iter().sum();
                let mut g = Vec::with_capacity(outer * spans[i]);
                for row in 0..outer {
                    let base = row * total + skip;
                    g.extend_from_slice(&grad_out[base..base + spans[i]]);
                }
                g
            })
        })
        .collect()
}

/// Take `len` positions starting at `start` along `axis`.
pub fn slice(
    tape: &Tape,
    x: &Tensor,
    axis: usize,
    start: usize,
    len: usize,
) -> Result<Tensor, TensorError> {
    let rank = x.ndim();
    if axis >= rank {
        return Err(TensorError::InvalidConfig(format!(
            "slice: axis {axis} out of range for rank {rank}"
        )));
    }
    if len == 0 || start + len > x.shape()[axis] {
        return Err(TensorError::ShapeMismatch(format!(
            "slice: [{start}, {start}+{len}) out of bounds for extent {}",
            x.shape()[axis]
        )));
    }
    let mut out_shape = x.shape().to_vec();
    out_shape[axis] = len;
    let outer: usize = x.shape()[..axis].iter().product();
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let full = x.shape()[axis] * inner;
    let mut out = Vec::with_capacity(outer * len * inner);
    for row in 0..outer {
        let base = row * full + start * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let out = Tensor::from_vec(out_shape, out)?;
    tape.record(Op::Slice { axis, start }, &[x], &out);
    Ok(out)
}

pub(super) fn backward_slice(
    axis: usize,
    start: usize,
    input: &Node,
    output: &Node,
    grad_out: &[f32],
) -> Vec<f32> {
    let inner: usize = input.shape[axis + 1..].iter().product();
    let full = input.shape[axis] * inner;
    let span = output.shape[axis] * inner;
    let mut gx = vec![0.0f32; input.data.len()];
    for (row, chunk) in grad_out.chunks(span).enumerate() {
        let base = row * full + start * inner;
        gx[base..base + span].copy_from_slice(chunk);
    }
    gx
}

/// Sum every element into a `[1]` scalar, accumulated in f64.
pub fn sum_all(tape: &Tape, x: &Tensor) -> Result<Tensor, TensorError> {
    let total = x.data().iter().map(|&v| v as f64).sum::<f64>() as f32;
    let out = Tensor::from_vec(vec![1], vec![total])?;
    tape.record(Op::SumAll, &[x], &out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_transposes_2d() {
        let tape = Tape::new();
        let x = Tensor::from_vec(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = permute(&tape, &x, &[1, 0]).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn permute_roundtrip_is_identity() {
        let tape = Tape::new();
        let x =
            Tensor::from_vec(vec![2, 3, 4], (0..24).map(|v| v as f32).collect()).unwrap();
        let y = permute(&tape, &x, &[2, 0, 1]).unwrap();
        let z = permute(&tape, &y, &[1, 2, 0]).unwrap();
        assert_eq!(z.shape(), x.shape());
        assert_eq!(z.data(), x.data());
    }

    #[test]
    fn concat_then_slice_recovers_parts() {
        let tape = Tape::new();
        let a = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(vec![2, 1], vec![5.0, 6.0]).unwrap();
        let c = concat(&tape, &[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let back = slice(&tape, &c, 1, 2, 1).unwrap();
        assert_eq!(back.data(), b.data());
    }

    #[test]
    fn slice_rejects_overrun() {
        let tape = Tape::new();
        let x = Tensor::zeros(&[2, 3]);
        assert!(slice(&tape, &x, 1, 2, 2).is_err());
    }

    #[test]
    fn sum_all_scalar() {
        let tape = Tape::new();
        let x = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = sum_all(&tape, &x).unwrap();
        assert_eq!(s.shape(), &[1]);
        assert_eq!(s.item(), 10.0);
    }
}
