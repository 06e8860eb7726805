//! Colormapped rendering of saliency maps onto images, the pointing-game
//! scorer, and artifact naming.

use std::path::Path;

use crate::data::{Image, Mask};

use super::{ExplainError, SaliencyMap};

/// Bilinear plane resize with the same half-pixel-center convention the
/// image resizer uses.
pub fn resize_plane(values: &[f32], w: usize, h: usize, out_w: usize, out_h: usize) -> Vec<f32> {
    assert_eq!(values.len(), w * h);
    if w == out_w && h == out_h {
        return values.to_vec();
    }
    let sx = w as f32 / out_w as f32;
    let sy = h as f32 / out_h as f32;
    let mut out = Vec::with_capacity(out_w * out_h);
    for oy in 0..out_h {
        let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f32;
        for ox in 0..out_w {
            let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f32;
            let top = values[y0 * w + x0] * (1.0 - tx) + values[y0 * w + x1] * tx;
            let bot = values[y1 * w + x0] * (1.0 - tx) + values[y1 * w + x1] * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

/// Fixed blue-to-red colormap: R = 255v, G = 255(1 - |2v - 1|),
/// B = 255(1 - v), each rounded. Monotone in v and dependency-free.
pub fn colormap(v: f32) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    [
        (255.0 * v).round() as u8,
        (255.0 * (1.0 - (2.0 * v - 1.0).abs())).round() as u8,
        (255.0 * (1.0 - v)).round() as u8,
    ]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RenderMode {
    /// Per-pixel blend: (1 - alpha) * image + alpha * colormap(map).
    Overlay { alpha: f32 },
    /// Image where map >= threshold, black elsewhere.
    Masked { threshold: f32 },
    /// The colormapped map alone.
    Raw,
}

impl RenderMode {
    pub fn tag(&self) -> &'static str {
        match self {
            RenderMode::Overlay { .. } => "overlay",
            RenderMode::Masked { .. } => "masked",
            RenderMode::Raw => "raw",
        }
    }
}

pub fn render(image: &Image, map: &SaliencyMap, mode: RenderMode) -> Result<Image, ExplainError> {
    if image.w != map.w || image.h != map.h {
        return Err(ExplainError::Config(format!(
            "image is {}x{} but the map is {}x{}",
            image.w, image.h, map.w, map.h
        )));
    }
    let mut out = Image::new(image.w, image.h);
    for y in 0..image.h {
        for x in 0..image.w {
            let v = map.values[y * map.w + x];
            let px = image.px(x, y);
            let rendered = match mode {
                RenderMode::Overlay { alpha } => {
                    let a = alpha.clamp(0.0, 1.0);
                    let heat = colormap(v);
                    let mut blend = [0u8; 3];
                    for k in 0..3 {
                        blend[k] = ((1.0 - a) * px[k] as f32 + a * heat[k] as f32)
                            .round()
                            .clamp(0.0, 255.0) as u8;
                    }
                    blend
                }
                RenderMode::Masked { threshold } => {
                    if v >= threshold {
                        px
                    } else {
                        [0, 0, 0]
                    }
                }
                RenderMode::Raw => colormap(v),
            };
            out.set_px(x, y, rendered);
        }
    }
    Ok(out)
}

/// Hit iff the first raster-order argmax pixel lies inside the mask.
pub fn pointing_game(map: &SaliencyMap, mask: &Mask) -> Result<bool, ExplainError> {
    if mask.w != map.w || mask.h != map.h {
        return Err(ExplainError::Config(format!(
            "mask is {}x{} but the map is {}x{}",
            mask.w, mask.h, map.w, map.h
        )));
    }
    let at = map.argmax();
    Ok(mask.get(at % map.w, at / map.w))
}

pub fn corpus_pointing_score(hits: &[bool]) -> f64 {
    if hits.is_empty() {
        return 0.0;
    }
    hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64
}

#[derive(Clone, Debug)]
pub struct PointingRow {
    pub stem: String,
    pub method: String,
    pub hit: bool,
}

/// `stem,method,hit` with hit as 0/1.
pub fn write_pointing_csv(rows: &[PointingRow], path: &Path) -> Result<(), ExplainError> {
    let mut out = String::from("stem,method,hit\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.stem, r.method, u8::from(r.hit)));
    }
    std::fs::write(path, out)
        .map_err(|source| ExplainError::Io { path: path.to_path_buf(), source })
}

/// `<stem>__<method>__c<class>[__L<layer>H<head>][__rot<deg>]__<mode>.png`
pub fn artifact_name(
    stem: &str,
    method: &str,
    class: usize,
    layer_head: Option<(usize, usize)>,
    rot_deg: Option<i32>,
    mode: &str,
) -> String {
    let mut name = format!("{stem}__{method}__c{class}");
    if let Some((layer, head)) = layer_head {
        name.push_str(&format!("__L{layer}H{head}"));
    }
    if let Some(deg) = rot_deg {
        name.push_str(&format!("__rot{deg}"));
    }
    name.push_str(&format!("__{mode}.png"));
    name
}
