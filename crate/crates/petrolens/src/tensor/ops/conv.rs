//! 2-d convolution via im2col + GEMM.
//!
//! The backward pass recomputes the column matrix instead of caching it;
//! that trades a second im2col for not holding `C*kh*kw * H'*W'` floats
//! per image across the whole forward pass.

use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use super::Op;
use crate::tensor::tape::Node;
use crate::tensor::{Tape, Tensor, TensorError};

/// Cross-correlation of `x` `[n, c, h, w]` with `w` `[o, c, kh, kw]`,
/// optional per-channel bias `[o]`. Zero padding.
pub fn conv2d(
    tape: &Tape,
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<Tensor, TensorError> {
    let g = ConvGeom::infer(x.shape(), w.shape(), stride, padding)?;
    if let Some(b) = bias {
        if b.shape() != [g.o] {
            return Err(TensorError::ShapeMismatch(format!(
                "conv2d: bias shape {:?} does not match {} output channels",
                b.shape(),
                g.o
            )));
        }
    }
    let mut out = vec![0.0f32; g.n * g.o * g.out_hw()];
    let mut cols = vec![0.0f32; g.ckk() * g.out_hw()];
    for i in 0..g.n {
        im2col(&g, &x.data()[i * g.c * g.h * g.w..], &mut cols);
        gemm_nn(
            g.o,
            g.ckk(),
            g.out_hw(),
            w.data(),
            &cols,
            &mut out[i * g.o * g.out_hw()..(i + 1) * g.o * g.out_hw()],
        );
    }
    if let Some(b) = bias {
        let bd = b.data();
        for (img, chunk) in out.chunks_mut(g.out_hw()).enumerate() {
            let bias_val = bd[img % g.o];
            for v in chunk {
                *v += bias_val;
            }
        }
    }
    let out = Tensor::from_vec(vec![g.n, g.o, g.out_h, g.out_w], out)?;
    match bias {
        Some(b) => tape.record(Op::Conv2d { stride, padding }, &[x, w, b], &out),
        None => tape.record(Op::Conv2d { stride, padding }, &[x, w], &out),
    }
    Ok(out)
}

#[derive(Clone, Copy)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn infer(
        xs: &[usize],
        ws: &[usize],
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Self, TensorError> {
        let (&[n, c, h, w], &[o, wc, kh, kw]) = (xs, ws) else {
            return Err(TensorError::ShapeMismatch(format!(
                "conv2d: expected x [n,c,h,w] and w [o,c,kh,kw], got {xs:?} and {ws:?}"
            )));
        };
        if wc != c {
            return Err(TensorError::ShapeMismatch(format!(
                "conv2d: input has {c} channels but kernel expects {wc}"
            )));
        }
        let (sh, sw) = stride;
        let (ph, pw) = padding;
        if sh == 0 || sw == 0 {
            return Err(TensorError::InvalidConfig("conv2d: stride must be positive".into()));
        }
        if h + 2 * ph < kh || w + 2 * pw < kw {
            return Err(TensorError::ShapeMismatch(format!(
                "conv2d: kernel {kh}x{kw} exceeds padded input {}x{}",
                h + 2 * ph,
                w + 2 * pw
            )));
        }
        Ok(ConvGeom {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            sh,
            sw,
            ph,
            pw,
            out_h: (h + 2 * ph - kh) / sh + 1,
            out_w: (w + 2 * pw - kw) / sw + 1,
        })
    }

    fn out_hw(&self) -> usize {
        self.out_h * self.out_w
    }

    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }
}

/// Unfold one image `[c, h, w]` into `cols [c*kh*kw, out_h*out_w]`.
/// Out-of-bounds taps read as zero.
fn im2col(g: &ConvGeom, img: &[f32], cols: &mut [f32]) {
    let out_hw = g.out_hw();
    for c in 0..g.c {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = &mut cols[((c * g.kh + ki) * g.kw + kj) * out_hw..][..out_hw];
                for oh in 0..g.out_h {
                    let ih = (oh * g.sh + ki) as isize - g.ph as isize;
                    if ih < 0 || ih >= g.h as isize {
                        row[oh * g.out_w..(oh + 1) * g.out_w].fill(0.0);
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for ow in 0..g.out_w {
                        let iw = (ow * g.sw + kj) as isize - g.pw as isize;
                        row[oh * g.out_w + ow] = if iw < 0 || iw >= g.w as isize {
                            0.0
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add `cols` back into one image's gradient. Exact adjoint of
/// [`im2col`].
fn col2im(g: &ConvGeom, cols: &[f32], img: &mut [f32]) {
    let out_hw = g.out_hw();
    for c in 0..g.c {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = &cols[((c * g.kh + ki) * g.kw + kj) * out_hw..][..out_hw];
                for oh in 0..g.out_h {
                    let ih = (oh * g.sh + ki) as isize - g.ph as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    for ow in 0..g.out_w {
                        let iw = (ow * g.sw + kj) as isize - g.pw as isize;
                        if iw >= 0 && iw < g.w as isize {
                            plane[ih as usize * g.w + iw as usize] += row[oh * g.out_w + ow];
                        }
                    }
                }
            }
        }
    }
}

pub(super) fn backward(
    stride: (usize, usize),
    padding: (usize, usize),
    inputs: &[&Node],
    output: &Node,
    grad_out: &[f32],
    want: &[bool],
) -> Vec<Option<Vec<f32>>> {
    let (x, w) = (inputs[0], inputs[1]);
    let g = ConvGeom::infer(&x.shape, &w.shape, stride, padding)
        .expect("recorded op had valid shapes");
    debug_assert_eq!(output.shape, vec![g.n, g.o, g.out_h, g.out_w]);

    let mut gx = want[0].then(|| vec![0.0f32; x.data.len()]);
    let mut gw = want[1].then(|| vec![0.0f32; w.data.len()]);
    if gx.is_some() || gw.is_some() {
        let mut cols = vec![0.0f32; g.ckk() * g.out_hw()];
        let mut dcols = vec![0.0f32; g.ckk() * g.out_hw()];
        for i in 0..g.n {
            let dout = &grad_out[i * g.o * g.out_hw()..(i + 1) * g.o * g.out_hw()];
            if let Some(gw) = gw.as_mut() {
                im2col(&g, &x.data[i * g.c * g.h * g.w..], &mut cols);
                gemm_nt(g.o, g.out_hw(), g.ckk(), dout, &cols, gw);
            }
            if let Some(gx) = gx.as_mut() {
                dcols.fill(0.0);
                gemm_tn(g.ckk(), g.o, g.out_hw(), &w.data, dout, &mut dcols);
                col2im(&g, &dcols, &mut gx[i * g.c * g.h * g.w..]);
            }
        }
    }

    let mut grads = vec![gx, gw];
    if inputs.len() == 3 {
        grads.push(want[2].then(|| {
            let mut gb = vec![0.0f32; g.o];
            for (img, chunk) in grad_out.chunks(g.out_hw()).enumerate() {
                gb[img % g.o] += chunk.iter().sum::<f32>();
            }
            gb
        }));
    }
    grads
}
