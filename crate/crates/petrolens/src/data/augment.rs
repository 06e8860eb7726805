//! Stochastic training augmentation.
//!
//! Every call consumes the same number of random draws in the same order
//! regardless of which augmentations fire, so a sample's augmentation
//! stream depends only on (seed, epoch, index), never on the policy knobs
//! of other samples. Geometric transforms are applied to image and mask in
//! lockstep; photometric jitter touches the image only.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::batch::{resize_mask_nearest, resize_rgb};
use super::rng::uniform;
use super::{DataError, Image, Mask};

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct AugmentPolicy {
    pub hflip_p: f32,
    pub vflip_p: f32,
    /// Max relative strength of brightness / contrast / saturation jitter;
    /// each factor is drawn from [1 - jitter, 1 + jitter].
    pub jitter: f32,
    /// Crop area as a fraction of the source, inclusive range.
    pub crop_area: (f32, f32),
    /// Side length of the emitted image.
    pub out_res: usize,
}

impl AugmentPolicy {
    pub fn new(
        hflip_p: f32,
        vflip_p: f32,
        jitter: f32,
        crop_area: (f32, f32),
        out_res: usize,
    ) -> Result<AugmentPolicy, DataError> {
        for (what, p) in [("hflip_p", hflip_p), ("vflip_p", vflip_p)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(DataError::InvalidSpec(format!("{what} {p} outside [0, 1]")));
            }
        }
        if !(0.0..1.0).contains(&jitter) {
            return Err(DataError::InvalidSpec(format!("jitter {jitter} outside [0, 1)")));
        }
        if !(crop_area.0 > 0.0 && crop_area.0 <= crop_area.1 && crop_area.1 <= 1.0) {
            return Err(DataError::InvalidSpec(format!(
                "crop area {crop_area:?} must satisfy 0 < min <= max <= 1"
            )));
        }
        if out_res == 0 {
            return Err(DataError::InvalidSpec("out_res must be positive".into()));
        }
        Ok(AugmentPolicy { hflip_p, vflip_p, jitter, crop_area, out_res })
    }

    /// No flips, no jitter, full-frame crop: augment() becomes a plain
    /// resize to `out_res`.
    pub fn identity(out_res: usize) -> AugmentPolicy {
        AugmentPolicy { hflip_p: 0.0, vflip_p: 0.0, jitter: 0.0, crop_area: (1.0, 1.0), out_res }
    }
}

/// Apply one augmentation draw. The eight random values are always drawn,
/// in this order: hflip coin, vflip coin, brightness, contrast, saturation,
/// crop area, crop x, crop y.
pub fn augment(
    image: &Image,
    mask: Option<&Mask>,
    policy: &AugmentPolicy,
    rng: &mut ChaCha8Rng,
) -> (Image, Option<Mask>) {
    let hflip = rng.gen::<f32>() < policy.hflip_p;
    let vflip = rng.gen::<f32>() < policy.vflip_p;
    let j = policy.jitter;
    let brightness = uniform(rng, 1.0 - j, 1.0 + j);
    let contrast = uniform(rng, 1.0 - j, 1.0 + j);
    let saturation = uniform(rng, 1.0 - j, 1.0 + j);
    let area = uniform(rng, policy.crop_area.0, policy.crop_area.1);
    let fx = rng.gen::<f32>();
    let fy = rng.gen::<f32>();

    let mut img = image.clone();
    let mut msk = mask.cloned();

    if hflip {
        flip_h(&mut img);
        if let Some(m) = &mut msk {
            flip_mask_h(m);
        }
    }
    if vflip {
        flip_v(&mut img);
        if let Some(m) = &mut msk {
            flip_mask_v(m);
        }
    }
    if j > 0.0 {
        jitter_colors(&mut img, brightness, contrast, saturation);
    }

    // square crop with side sqrt(area) of the short edge, placed by (fx, fy)
    let short = img.w.min(img.h);
    let side = ((short as f32) * area.sqrt()).round().max(1.0) as usize;
    let side = side.min(short);
    let x0 = ((img.w - side) as f32 * fx).floor() as usize;
    let y0 = ((img.h - side) as f32 * fy).floor() as usize;
    let img = crop(&img, x0, y0, side);
    let msk = msk.map(|m| crop_mask(&m, x0, y0, side));

    let out = resize_rgb(&img, policy.out_res, policy.out_res);
    let out_mask = msk.map(|m| resize_mask_nearest(&m, policy.out_res, policy.out_res));
    (out, out_mask)
}

fn flip_h(img: &mut Image) {
    for y in 0..img.h {
        for x in 0..img.w / 2 {
            let a = img.px(x, y);
            let b = img.px(img.w - 1 - x, y);
            img.set_px(x, y, b);
            img.set_px(img.w - 1 - x, y, a);
        }
    }
}

fn flip_v(img: &mut Image) {
    for y in 0..img.h / 2 {
        for x in 0..img.w {
            let a = img.px(x, y);
            let b = img.px(x, img.h - 1 - y);
            img.set_px(x, y, b);
            img.set_px(x, img.h - 1 - y, a);
        }
    }
}

fn flip_mask_h(m: &mut Mask) {
    for y in 0..m.h {
        for x in 0..m.w / 2 {
            let a = m.get(x, y);
            let b = m.get(m.w - 1 - x, y);
            m.set(x, y, b);
            m.set(m.w - 1 - x, y, a);
        }
    }
}

fn flip_mask_v(m: &mut Mask) {
    for y in 0..m.h / 2 {
        for x in 0..m.w {
            let a = m.get(x, y);
            let b = m.get(x, m.h - 1 - y);
            m.set(x, y, b);
            m.set(x, m.h - 1 - y, a);
        }
    }
}

/// Brightness scales, contrast blends with the image's mean gray, and
/// saturation blends each pixel with its own gray, in that order. Values
/// clamp to [0, 255] after each stage.
fn jitter_colors(img: &mut Image, brightness: f32, contrast: f32, saturation: f32) {
    let gray = |p: [u8; 3]| 0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32;
    let mut mean = 0.0f64;
    for y in 0..img.h {
        for x in 0..img.w {
            mean += gray(img.px(x, y)) as f64;
        }
    }
    let mean = (mean / (img.w * img.h) as f64) as f32;
    for y in 0..img.h {
        for x in 0..img.w {
            let p = img.px(x, y);
            let mut c = [0.0f32; 3];
            for k in 0..3 {
                c[k] = (p[k] as f32 * brightness).clamp(0.0, 255.0);
            }
            for v in &mut c {
                *v = (mean + (*v - mean) * contrast).clamp(0.0, 255.0);
            }
            let g = 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
            for v in &mut c {
                *v = (g + (*v - g) * saturation).clamp(0.0, 255.0);
            }
            img.set_px(x, y, [c[0].round() as u8, c[1].round() as u8, c[2].round() as u8]);
        }
    }
}

fn crop(img: &Image, x0: usize, y0: usize, side: usize) -> Image {
    let mut out = Image::new(side, side);
    for y in 0..side {
        for x in 0..side {
            out.set_px(x, y, img.px(x0 + x, y0 + y));
        }
    }
    out
}

fn crop_mask(m: &Mask, x0: usize, y0: usize, side: usize) -> Mask {
    let mut out = Mask::new(side, side);
    for y in 0..side {
        for x in 0..side {
            out.set(x, y, m.get(x0 + x, y0 + y));
        }
    }
    out
}
