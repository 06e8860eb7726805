//! Matrix multiplication, 2-d and batched 3-d.

use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use super::Op;
use crate::tensor::tape::Node;
use crate::tensor::{Tape, Tensor, TensorError};

/// `a @ b` for `[m, k] x [k, n]` or batched `[b, m, k] x [b, k, n]`.
pub fn matmul(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let (batch, m, k, n) = mm_dims(a.shape(), b.shape())?;
    let mut out = vec![0.0f32; batch * m * n];
    for i in 0..batch {
        gemm_nn(
            m,
            k,
            n,
            &a.data()[i * m * k..(i + 1) * m * k],
            &b.data()[i * k * n..(i + 1) * k * n],
            &mut out[i * m * n..(i + 1) * m * n],
        );
    }
    let out_shape = if a.ndim() == 2 { vec![m, n] } else { vec![batch, m, n] };
    let out = Tensor::from_vec(out_shape, out)?;
    tape.record(Op::Matmul, &[a, b], &out);
    Ok(out)
}

fn mm_dims(sa: &[usize], sb: &[usize]) -> Result<(usize, usize, usize, usize), TensorError> {
    match (sa.len(), sb.len()) {
        (2, 2) if sa[1] == sb[0] => Ok((1, sa[0], sa[1], sb[1])),
        (3, 3) if sa[0] == sb[0] && sa[2] == sb[1] => Ok((sa[0], sa[1], sa[2], sb[2])),
        _ => Err(TensorError::ShapeMismatch(format!(
            "matmul: incompatible shapes {sa:?} x {sb:?}"
        ))),
    }
}

pub(super) fn backward(
    inputs: &[&Node],
    grad_out: &[f32],
    want: &[bool],
) -> Vec<Option<Vec<f32>>> {
    let (a, b) = (inputs[0], inputs[1]);
    let (batch, m, k, n) = mm_dims(&a.shape, &b.shape).expect("recorded op had valid shapes");
    // dA = dC @ B^T, dB = A^T @ dC, per batch slab.
    let ga = want[0].then(|| {
        let mut g = vec![0.0f32; a.data.len()];
        for i in 0..batch {
            gemm_nt(
                m,
                n,
                k,
                &grad_out[i * m * n..(i + 1) * m * n],
                &b.data[i * k * n..(i + 1) * k * n],
                &mut g[i * m * k..(i + 1) * m * k],
            );
        }
        g
    });
    let gb = want[1].then(|| {
        let mut g = vec![0.0f32; b.data.len()];
        for i in 0..batch {
            gemm_tn(
                k,
                m,
                n,
                &a.data[i * m * k..(i + 1) * m * k],
                &grad_out[i * m * n..(i + 1) * m * n],
                &mut g[i * k * n..(i + 1) * k * n],
            );
        }
        g
    });
    vec![ga, gb]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_2d_matches_by_hand() {
        let tape = Tape::new();
        let a = Tensor::from_vec(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::from_vec(vec![3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = matmul(&tape, &a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_batched_is_per_slab() {
        let tape = Tape::new();
        let a = Tensor::from_vec(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(vec![2, 2, 1], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = matmul(&tape, &a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1, 1]);
        assert_eq!(c.data(), &[17.0, 53.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let tape = Tape::new();
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        assert!(matmul(&tape, &a, &b).is_err());
    }
}
