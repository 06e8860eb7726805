//! Image-to-tensor conversion: resize, normalization statistics, batching.

use crate::tensor::{Tensor, TensorError};

use super::{Image, Mask, Normalization, Sample};

/// Bilinear resize with half-pixel-center sampling: destination pixel d
/// reads source coordinate (d + 0.5) * scale - 0.5, clamped to the frame.
pub fn resize_rgb(img: &Image, out_w: usize, out_h: usize) -> Image {
    if img.w == out_w && img.h == out_h {
        return img.clone();
    }
    let mut out = Image::new(out_w, out_h);
    let sx = img.w as f32 / out_w as f32;
    let sy = img.h as f32 / out_h as f32;
    for oy in 0..out_h {
        let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (img.h - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(img.h - 1);
        let ty = fy - y0 as f32;
        for ox in 0..out_w {
            let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (img.w - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(img.w - 1);
            let tx = fx - x0 as f32;
            let mut px = [0u8; 3];
            for k in 0..3 {
                let v00 = img.px(x0, y0)[k] as f32;
                let v10 = img.px(x1, y0)[k] as f32;
                let v01 = img.px(x0, y1)[k] as f32;
                let v11 = img.px(x1, y1)[k] as f32;
                let top = v00 * (1.0 - tx) + v10 * tx;
                let bot = v01 * (1.0 - tx) + v11 * tx;
                px[k] = (top * (1.0 - ty) + bot * ty).round().clamp(0.0, 255.0) as u8;
            }
            out.set_px(ox, oy, px);
        }
    }
    out
}

/// Nearest-neighbor resize so mask pixels stay crisp booleans.
pub fn resize_mask_nearest(mask: &Mask, out_w: usize, out_h: usize) -> Mask {
    if mask.w == out_w && mask.h == out_h {
        return mask.clone();
    }
    let mut out = Mask::new(out_w, out_h);
    let sx = mask.w as f32 / out_w as f32;
    let sy = mask.h as f32 / out_h as f32;
    for oy in 0..out_h {
        let y = (((oy as f32 + 0.5) * sy - 0.5).round().max(0.0) as usize).min(mask.h - 1);
        for ox in 0..out_w {
            let x = (((ox as f32 + 0.5) * sx - 0.5).round().max(0.0) as usize).min(mask.w - 1);
            out.set(ox, oy, mask.get(x, y));
        }
    }
    out
}

/// Per-channel mean and standard deviation of the given images after
/// resizing to `res` and scaling to [0, 1]. Computed in f64 over every
/// pixel; the returned stats make to_batch() output roughly zero-mean and
/// unit-variance on the same images.
pub fn compute_normalization(images: &[&Image], res: usize) -> Normalization {
    let mut sum = [0.0f64; 3];
    let mut sum_sq = [0.0f64; 3];
    let mut count = 0.0f64;
    for img in images {
        let resized = resize_rgb(img, res, res);
        for y in 0..res {
            for x in 0..res {
                let p = resized.px(x, y);
                for k in 0..3 {
                    let v = p[k] as f64 / 255.0;
                    sum[k] += v;
                    sum_sq[k] += v * v;
                }
            }
        }
        count += (res * res) as f64;
    }
    let mut mean = [0.0f32; 3];
    let mut std = [0.0f32; 3];
    for k in 0..3 {
        let m = sum[k] / count;
        let var = (sum_sq[k] / count - m * m).max(0.0);
        mean[k] = m as f32;
        std[k] = (var.sqrt().max(1e-6)) as f32;
    }
    Normalization { mean, std }
}

fn fill_normalized(img: &Image, res: usize, norm: &Normalization, out: &mut [f32]) {
    let plane = res * res;
    let img = resize_rgb(img, res, res);
    for y in 0..res {
        for x in 0..res {
            let p = img.px(x, y);
            for k in 0..3 {
                let v = p[k] as f32 / 255.0;
                out[k * plane + y * res + x] = (v - norm.mean[k]) / norm.std[k];
            }
        }
    }
}

/// One image as a [1, 3, res, res] input tensor, resized, scaled to
/// [0, 1], and standardized per channel as (v - mean) / std.
pub fn image_to_input(
    img: &Image,
    res: usize,
    norm: &Normalization,
) -> Result<Tensor, TensorError> {
    let mut data = vec![0.0f32; 3 * res * res];
    fill_normalized(img, res, norm, &mut data);
    Tensor::from_vec(vec![1, 3, res, res], data)
}

/// Pack samples into an input tensor [n, 3, res, res] plus a label vector,
/// normalizing each image exactly as [`image_to_input`] does.
pub fn to_batch(
    samples: &[&Sample],
    res: usize,
    norm: &Normalization,
) -> Result<(Tensor, Vec<usize>), TensorError> {
    if samples.is_empty() {
        return Err(TensorError::InvalidConfig("empty batch".into()));
    }
    let n = samples.len();
    let plane = res * res;
    let mut data = vec![0.0f32; n * 3 * plane];
    let mut labels = Vec::with_capacity(n);
    for (i, s) in samples.iter().enumerate() {
        fill_normalized(&s.image, res, norm, &mut data[i * 3 * plane..(i + 1) * 3 * plane]);
        labels.push(s.label);
    }
    Ok((Tensor::from_vec(vec![n, 3, res, res], data)?, labels))
}
