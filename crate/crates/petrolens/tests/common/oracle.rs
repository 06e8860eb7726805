//! Independent f64 reference implementations.
//!
//! Everything here is written as the plainest possible nested loop, with no
//! code shared with the crate under test. Gradient checks difference these
//! forwards, so they must be numerically smooth in their inputs.

/// Numpy-style trailing-axis broadcast of an elementwise binary op.
pub fn broadcast_binary(
    a: &[f64],
    ash: &[usize],
    b: &[f64],
    bsh: &[usize],
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    let rank = ash.len().max(bsh.len());
    let dim = |sh: &[usize], ax: usize| -> usize {
        let off = rank - sh.len();
        if ax < off {
            1
        } else {
            sh[ax - off]
        }
    };
    let out_shape: Vec<usize> = (0..rank)
        .map(|ax| dim(ash, ax).max(dim(bsh, ax)))
        .collect();
    let numel: usize = out_shape.iter().product();
    let offset_into = |sh: &[usize], flat: usize| -> usize {
        let mut rem = flat;
        let mut off = 0usize;
        let mut stride = 1usize;
        let mut offs = vec![0usize; rank];
        for ax in (0..rank).rev() {
            offs[ax] = rem % out_shape[ax];
            rem /= out_shape[ax];
        }
        for ax in (0..rank).rev() {
            let d = dim(sh, ax);
            off += (offs[ax] % d) * stride;
            stride *= d;
        }
        off
    };
    (0..numel)
        .map(|i| f(a[offset_into(ash, i)], b[offset_into(bsh, i)]))
        .collect()
}

/// `[batch, m, k] x [batch, k, n]`, flattened row-major.
pub fn matmul(a: &[f64], b: &[f64], batch: usize, m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; batch * m * n];
    for t in 0..batch {
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[t * m * k + i * k + p] * b[t * k * n + p * n + j];
                }
                out[t * m * n + i * n + j] = acc;
            }
        }
    }
    out
}

/// Cross-correlation with zero padding, `x [n,c,h,w]`, `w [o,c,kh,kw]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    xs: [usize; 4],
    w: &[f64],
    ws: [usize; 4],
    bias: Option<&[f64]>,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Vec<f64> {
    let [n, c, h, wd] = xs;
    let [o, _, kh, kw] = ws;
    let (sh, sw) = stride;
    let (ph, pw) = padding;
    let out_h = (h + 2 * ph - kh) / sh + 1;
    let out_w = (wd + 2 * pw - kw) / sw + 1;
    let mut out = vec![0.0; n * o * out_h * out_w];
    for img in 0..n {
        for oc in 0..o {
            for oh in 0..out_h {
                for ow in 0..out_w {
                    let mut acc = bias.map_or(0.0, |b| b[oc]);
                    for ic in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let ih = (oh * sh + ki) as isize - ph as isize;
                                let iw = (ow * sw + kj) as isize - pw as isize;
                                if ih < 0 || iw < 0 || ih >= h as isize || iw >= wd as isize {
                                    continue;
                                }
                                acc += x[((img * c + ic) * h + ih as usize) * wd + iw as usize]
                                    * w[((oc * c + ic) * kh + ki) * kw + kj];
                            }
                        }
                    }
                    out[((img * o + oc) * out_h + oh) * out_w + ow] = acc;
                }
            }
        }
    }
    out
}

/// Train-phase batch norm: biased per-channel moments over n*h*w.
pub fn batch_norm_train(
    x: &[f64],
    dims: [usize; 4],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Vec<f64> {
    let [n, c, h, w] = dims;
    let hw = h * w;
    let m = (n * hw) as f64;
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        let mut mean = 0.0;
        for img in 0..n {
            for i in 0..hw {
                mean += x[(img * c + ch) * hw + i];
            }
        }
        mean /= m;
        let mut var = 0.0;
        for img in 0..n {
            for i in 0..hw {
                let d = x[(img * c + ch) * hw + i] - mean;
                var += d * d;
            }
        }
        var /= m;
        let inv = 1.0 / (var + eps).sqrt();
        for img in 0..n {
            for i in 0..hw {
                let at = (img * c + ch) * hw + i;
                out[at] = (x[at] - mean) * inv * gamma[ch] + beta[ch];
            }
        }
    }
    out
}

/// Eval-phase batch norm: fixed running estimates.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm_eval(
    x: &[f64],
    dims: [usize; 4],
    rm: &[f64],
    rv: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Vec<f64> {
    let [n, c, h, w] = dims;
    let hw = h * w;
    let mut out = vec![0.0; x.len()];
    for img in 0..n {
        for ch in 0..c {
            let inv = 1.0 / (rv[ch] + eps).sqrt();
            for i in 0..hw {
                let at = (img * c + ch) * hw + i;
                out[at] = (x[at] - rm[ch]) * inv * gamma[ch] + beta[ch];
            }
        }
    }
    out
}

/// Row-wise layer norm over the trailing axis of length `d`.
pub fn layer_norm(x: &[f64], d: usize, gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for i in 0..d {
            out[r * d + i] = (row[i] - mean) * inv * gamma[i] + beta[i];
        }
    }
    out
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

pub fn gelu(x: &[f64]) -> Vec<f64> {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    x.iter()
        .map(|&v| 0.5 * v * (1.0 + (c * (v + 0.044715 * v * v * v)).tanh()))
        .collect()
}

/// Softmax over the middle axis of an `[outer, d, inner]` view.
pub fn softmax(x: &[f64], outer: usize, d: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (r * d + j) * inner + i;
            let max = (0..d).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = (0..d).map(|j| (x[at(j)] - max).exp()).sum();
            for j in 0..d {
                out[at(j)] = (x[at(j)] - max).exp() / sum;
            }
        }
    }
    out
}

/// Max pooling with zero padding that never wins, ties to first index.
pub fn max_pool(
    x: &[f64],
    dims: [usize; 4],
    kernel: (usize, usize),
    stride: (usize, usize),
    padding: (usize, usize),
) -> Vec<f64> {
    let [n, c, h, w] = dims;
    let (kh, kw) = kernel;
    let (sh, sw) = stride;
    let (ph, pw) = padding;
    let out_h = (h + 2 * ph - kh) / sh + 1;
    let out_w = (w + 2 * pw - kw) / sw + 1;
    let mut out = vec![0.0; n * c * out_h * out_w];
    for plane in 0..n * c {
        for oh in 0..out_h {
            for ow in 0..out_w {
                let mut best = f64::NEG_INFINITY;
                for ki in 0..kh {
                    for kj in 0..kw {
                        let ih = (oh * sh + ki) as isize - ph as isize;
                        let iw = (ow * sw + kj) as isize - pw as isize;
                        if ih < 0 || iw < 0 || ih >= h as isize || iw >= w as isize {
                            continue;
                        }
                        let v = x[plane * h * w + ih as usize * w + iw as usize];
                        if v > best {
                            best = v;
                        }
                    }
                }
                out[(plane * out_h + oh) * out_w + ow] = best;
            }
        }
    }
    out
}

/// Spatial mean: `[n,c,h,w] -> [n,c]`.
pub fn global_avg_pool(x: &[f64], dims: [usize; 4]) -> Vec<f64> {
    let [n, c, h, w] = dims;
    let hw = (h * w) as f64;
    x.chunks(h * w)
        .map(|plane| plane.iter().sum::<f64>() / hw)
        .take(n * c)
        .collect()
}

/// Mean NLL of `labels` under row softmax. Returns a 1-element vec.
pub fn cross_entropy(logits: &[f64], classes: usize, labels: &[usize]) -> Vec<f64> {
    let n = labels.len();
    let mut total = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        let row = &logits[r * classes..(r + 1) * classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        total += sum.ln() + max - row[label];
    }
    vec![total / n as f64]
}
