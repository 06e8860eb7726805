//! Raw f32 matrix kernels shared by matmul and convolution.
//!
//! Every output element is a serial dot product in fixed index order. The
//! opt-in parallel mode only distributes whole output rows across threads,
//! so serial and parallel execution produce bit-identical results.

use rayon::prelude::*;
use std::sync::atomic::{AtomicBool, Ordering};

static PARALLEL: AtomicBool = AtomicBool::new(false);

/// Enable the row-parallel execution path for the matrix kernels.
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled, Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    PARALLEL.load(Ordering::Relaxed)
}

const PAR_MIN_FLOPS: usize = 1 << 18;

/// c[m,n] += a[m,k] · b[k,n]
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let row = |i: usize, ci: &mut [f32]| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in ci.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    };
    if parallel_enabled() && m > 1 && m * k * n >= PAR_MIN_FLOPS {
        c.par_chunks_mut(n).enumerate().for_each(|(i, ci)| row(i, ci));
    } else {
        for (i, ci) in c.chunks_mut(n).enumerate() {
            row(i, ci);
        }
    }
}

/// c[m,n] += a[m,k] · bᵀ where b is stored [n,k]
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    let row = |i: usize, ci: &mut [f32]| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, cv) in ci.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0f32;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *cv += acc;
        }
    };
    if parallel_enabled() && m > 1 && m * k * n >= PAR_MIN_FLOPS {
        c.par_chunks_mut(n).enumerate().for_each(|(i, ci)| row(i, ci));
    } else {
        for (i, ci) in c.chunks_mut(n).enumerate() {
            row(i, ci);
        }
    }
}

/// c[m,n] += aᵀ · b where a is stored [k,m]
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let row = |i: usize, ci: &mut [f32]| {
        for p in 0..k {
            let api = a[p * m + i];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in ci.iter_mut().zip(brow) {
                *cv += api * bv;
            }
        }
    };
    if parallel_enabled() && m > 1 && m * k * n >= PAR_MIN_FLOPS {
        c.par_chunks_mut(n).enumerate().for_each(|(i, ci)| row(i, ci));
    } else {
        for (i, ci) in c.chunks_mut(n).enumerate() {
            row(i, ci);
        }
    }
}
