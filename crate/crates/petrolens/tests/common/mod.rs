#![allow(dead_code)]

pub mod oracle;

use petrolens::tensor::{ops, Tape, Tensor};

/// Splitmix64-backed test data source. Deterministic and dependency-free.
pub struct Sampler(u64);

impl Sampler {
    pub fn new(seed: u64) -> Self {
        Sampler(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }

    /// Uniform in [-1, 1).
    pub fn uniform(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 / (1u64 << 23) as f32 * 2.0 - 1.0
    }

    pub fn vec(&mut self, n: usize) -> Vec<f32> {
        (0..n).map(|_| self.uniform()).collect()
    }

    /// Uniform in [-1, 1) but bounded away from zero, for kinked ops.
    pub fn vec_off_zero(&mut self, n: usize, margin: f32) -> Vec<f32> {
        (0..n)
            .map(|_| {
                let v = self.uniform();
                v.signum() * (v.abs() * (1.0 - margin) + margin)
            })
            .collect()
    }

    /// Distinct values separated by at least `gap`, in shuffled order, so a
    /// finite-difference step cannot flip an argmax.
    pub fn vec_spaced(&mut self, n: usize, gap: f32) -> Vec<f32> {
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, self.next_u64() as usize % (i + 1));
        }
        let mut out = vec![0.0f32; n];
        for (rank, &at) in order.iter().enumerate() {
            out[at] = rank as f32 * gap + self.uniform() * gap * 0.25;
        }
        out
    }

    pub fn tensor(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape.to_vec(), self.vec(n))
            .unwrap()
            .requires_grad(true)
    }
}

pub const FD_STEP: f64 = 1e-3;

pub fn assert_close(got: f32, want: f64, what: &str) {
    let diff = (got as f64 - want).abs();
    let rel = diff / want.abs().max(1e-12);
    assert!(
        rel <= 1e-2 || diff <= 1e-4,
        "{what}: got {got}, oracle {want:.9}, rel {rel:.3e}, abs {diff:.3e}"
    );
}

/// Check an op's forward and backward against an f64 oracle.
///
/// Forward must agree elementwise; then every gradient the tape produces is
/// compared against a central difference of the oracle through a fixed
/// random linear projection of the output.
pub fn check_grads(
    name: &str,
    inputs: &[Tensor],
    f32_op: &dyn Fn(&Tape, &[Tensor]) -> Tensor,
    oracle_fwd: &dyn Fn(&[Vec<f64>]) -> Vec<f64>,
) {
    let tape = Tape::new();
    let y = f32_op(&tape, inputs);

    let base: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.data().iter().map(|&v| v as f64).collect())
        .collect();
    let y64 = oracle_fwd(&base);
    assert_eq!(y64.len(), y.numel(), "{name}: oracle output length");
    for (i, (&a, &e)) in y.data().iter().zip(&y64).enumerate() {
        let diff = (a as f64 - e).abs();
        assert!(
            diff <= 1e-4 * e.abs().max(1.0),
            "{name}: forward[{i}] {a} vs oracle {e}"
        );
    }

    let mut proj = Sampler::new(0x70726f6a);
    let w = proj.vec(y.numel());
    let wt = Tensor::from_vec(y.shape().to_vec(), w.clone()).unwrap();
    let prod = ops::mul(&tape, &y, &wt).unwrap();
    let loss = ops::sum_all(&tape, &prod).unwrap();
    let grads = tape.backward(&loss).unwrap();

    let project =
        |out: &[f64]| -> f64 { out.iter().zip(&w).map(|(&o, &wi)| o * wi as f64).sum() };

    for (i, input) in inputs.iter().enumerate() {
        let g = grads
            .wrt(input)
            .unwrap_or_else(|| panic!("{name}: no gradient for input {i}"));
        for j in 0..input.numel() {
            let mut plus = base.clone();
            plus[i][j] += FD_STEP;
            let mut minus = base.clone();
            minus[i][j] -= FD_STEP;
            let fd =
                (project(&oracle_fwd(&plus)) - project(&oracle_fwd(&minus))) / (2.0 * FD_STEP);
            assert_close(g.data()[j], fd, &format!("{name}: grad[{i}][{j}]"));
        }
    }
}
