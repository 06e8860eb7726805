//! Rotation-sequence stability: recompute an explanation under input
//! rotations, map everything back to the base frame, and measure how much
//! the highlighted region moves.

use crate::data::Image;
use crate::model::Model;

use super::{predict, saliency, ExplainError, SaliencyMap, SaliencyMethod};

/// Reflect an out-of-range coordinate back into [0, n-1], mirror style
/// (the edge pixel is not repeated).
fn reflect(mut v: f32, n: usize) -> f32 {
    let hi = (n - 1) as f32;
    if hi == 0.0 {
        return 0.0;
    }
    loop {
        if v < 0.0 {
            v = -v;
        } else if v > hi {
            v = 2.0 * hi - v;
        } else {
            return v;
        }
    }
}

fn bilinear_u8(img: &Image, fx: f32, fy: f32, k: usize) -> f32 {
    let x0 = fx.floor() as usize;
    let y0 = fy.floor() as usize;
    let x1 = (x0 + 1).min(img.w - 1);
    let y1 = (y0 + 1).min(img.h - 1);
    let tx = fx - x0 as f32;
    let ty = fy - y0 as f32;
    let top = img.px(x0, y0)[k] as f32 * (1.0 - tx) + img.px(x1, y0)[k] as f32 * tx;
    let bot = img.px(x0, y1)[k] as f32 * (1.0 - tx) + img.px(x1, y1)[k] as f32 * tx;
    top * (1.0 - ty) + bot * ty
}

/// Rotate about the image center by `deg` counterclockwise, sampling
/// bilinearly with mirrored borders.
pub fn rotate_reflect(img: &Image, deg: f64) -> Image {
    let theta = deg.to_radians();
    let (sin, cos) = (theta.sin() as f32, theta.cos() as f32);
    let cx = (img.w as f32 - 1.0) / 2.0;
    let cy = (img.h as f32 - 1.0) / 2.0;
    let mut out = Image::new(img.w, img.h);
    for y in 0..img.h {
        for x in 0..img.w {
            // inverse map: rotate the destination offset by -theta
            let dx = x as f32 - cx;
            let dy = y as f32 - cy;
            let sx = reflect(cos * dx + sin * dy + cx, img.w);
            let sy = reflect(-sin * dx + cos * dy + cy, img.h);
            let mut px = [0u8; 3];
            for (k, channel) in px.iter_mut().enumerate() {
                *channel = bilinear_u8(img, sx, sy, k).round().clamp(0.0, 255.0) as u8;
            }
            out.set_px(x, y, px);
        }
    }
    out
}

pub fn center_crop(img: &Image, side: usize) -> Result<Image, ExplainError> {
    if side > img.w || side > img.h {
        return Err(ExplainError::Config(format!(
            "cannot crop {side} px from a {}x{} image",
            img.w, img.h
        )));
    }
    let x0 = (img.w - side) / 2;
    let y0 = (img.h - side) / 2;
    let mut out = Image::new(side, side);
    for y in 0..side {
        for x in 0..side {
            out.set_px(x, y, img.px(x0 + x, y0 + y));
        }
    }
    Ok(out)
}

/// Rotate a map back toward the base frame; samples falling outside the
/// rotated frame are zero (absent evidence, not mirrored evidence).
fn rotate_plane_zero(values: &[f32], side: usize, deg: f64) -> Vec<f32> {
    let theta = deg.to_radians();
    let (sin, cos) = (theta.sin() as f32, theta.cos() as f32);
    let c = (side as f32 - 1.0) / 2.0;
    let mut out = vec![0.0f32; side * side];
    for y in 0..side {
        for x in 0..side {
            let dx = x as f32 - c;
            let dy = y as f32 - c;
            let sx = cos * dx + sin * dy + c;
            let sy = -sin * dx + cos * dy + c;
            if sx < 0.0 || sy < 0.0 || sx > (side - 1) as f32 || sy > (side - 1) as f32 {
                continue;
            }
            let x0 = sx.floor() as usize;
            let y0 = sy.floor() as usize;
            let x1 = (x0 + 1).min(side - 1);
            let y1 = (y0 + 1).min(side - 1);
            let tx = sx - x0 as f32;
            let ty = sy - y0 as f32;
            let top = values[y0 * side + x0] * (1.0 - tx) + values[y0 * side + x1] * tx;
            let bot = values[y1 * side + x0] * (1.0 - tx) + values[y1 * side + x1] * tx;
            out[y * side + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

/// Boolean mask of the top 10% of values (at least one pixel). Ties at
/// the threshold are included, so the mask can exceed 10% on plateaus.
pub fn top_decile_mask(values: &[f32]) -> Vec<bool> {
    let mut sorted: Vec<f32> = values.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("saliency values are finite"));
    let k = (values.len() / 10).max(1);
    let threshold = sorted[k - 1];
    values.iter().map(|&v| v >= threshold).collect()
}

fn iou(a: &[bool], b: &[bool]) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Clone, Debug)]
pub struct RotationReport {
    pub angles: Vec<f64>,
    /// Saliency maps in the base frame, normalized, one per angle.
    pub maps: Vec<SaliencyMap>,
    /// Predicted class per rotated input.
    pub predictions: Vec<usize>,
    /// Mean pairwise IoU of the top-decile masks across angles; 1.0 for a
    /// single angle.
    pub stability: f64,
    /// Fraction of angles whose prediction matches the 0-degree one.
    pub invariant_fraction: f64,
}

/// Explain the same scene under each rotation and measure agreement in
/// the base frame.
///
/// Each angle's input is the base image rotated with reflection padding
/// and center-cropped to the model resolution; its map targets the class
/// predicted for that rotated input, then is inverse-rotated (zero fill)
/// back to the base frame before comparison.
pub fn rotation_stability(
    model: &Model,
    base: &Image,
    angles: &[f64],
    method: SaliencyMethod,
) -> Result<RotationReport, ExplainError> {
    if angles.is_empty() {
        return Err(ExplainError::Config("rotation analysis needs at least one angle".into()));
    }
    if !angles.contains(&0.0) {
        return Err(ExplainError::Config("the angle list must include 0".into()));
    }
    let res = model.spec.input_resolution();

    let mut maps = Vec::with_capacity(angles.len());
    let mut predictions = Vec::with_capacity(angles.len());
    for &deg in angles {
        let view = center_crop(&rotate_reflect(base, deg), res)?;
        let predicted = predict(model, &view)?;
        let map = saliency(model, &view, method, predicted)?;
        let mut back = rotate_plane_zero(&map.values, res, -deg);
        super::normalize_map(&mut back);
        maps.push(SaliencyMap { values: back, ..map });
        predictions.push(predicted);
    }

    let masks: Vec<Vec<bool>> = maps.iter().map(|m| top_decile_mask(&m.values)).collect();
    let mut pair_sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..masks.len() {
        for j in i + 1..masks.len() {
            pair_sum += iou(&masks[i], &masks[j]);
            pairs += 1;
        }
    }
    let stability = if pairs == 0 { 1.0 } else { pair_sum / pairs as f64 };

    let base_prediction = predictions[angles.iter().position(|&a| a == 0.0).unwrap()];
    let invariant = predictions.iter().filter(|&&p| p == base_prediction).count();
    Ok(RotationReport {
        angles: angles.to_vec(),
        maps,
        predictions,
        stability,
        invariant_fraction: invariant as f64 / angles.len() as f64,
    })
}
