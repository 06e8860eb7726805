//! Parameter initialization. One counter-based stream per build seed;
//! parameters are filled in a fixed construction order, so equal
//! (spec, seed) pairs produce bit-identical models.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::rng::stream;
use crate::tensor::Tensor;

const MODEL_LANE: u64 = 0x3d;

pub(super) fn param_stream(seed: u64) -> ChaCha8Rng {
    stream(seed, MODEL_LANE, 0)
}

/// Standard normal via Box-Muller; the sine half is discarded to keep the
/// draw count per sample fixed at two.
fn standard_normal(rng: &mut ChaCha8Rng) -> f32 {
    let u1: f32 = rng.gen_range(f32::MIN_POSITIVE..1.0);
    let u2: f32 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f32::consts::TAU * u2).cos()
}

/// He fan-in initialization: N(0, sqrt(2 / fan_in)).
pub(super) fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f32).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| standard_normal(rng) * std).collect();
    Tensor::from_vec(shape.to_vec(), data).expect("init shape is internally consistent")
}

/// Truncated normal: N(0, std) with draws outside two standard deviations
/// rejected and redrawn.
pub(super) fn trunc_normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n)
        .map(|_| loop {
            let z = standard_normal(rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect();
    Tensor::from_vec(shape.to_vec(), data).expect("init shape is internally consistent")
}
