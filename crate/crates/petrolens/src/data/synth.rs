//! Synthetic thin-section-style corpus generator.
//!
//! Each sample is one geometry draw: a low-frequency noise matrix plus a
//! population of inclusions from the class recipe, rendered twice with
//! identical geometry (a muted plane-polarized variant and a high-contrast
//! cross-polarized variant) and a pixel-exact union mask. The mask is built
//! from the same inside() calls that paint the pixels, so ground truth is
//! exact by construction, not by annotation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::rng::{stream, uniform, uniform_int};
use super::{
    Corpus, DataError, Image, Magnification, Mask, Polarization, Sample, SplitTag,
};

/// Inclusion footprint families. Aspect ratios are fixed per family so the
/// covered area has a closed form in the size parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeFamily {
    /// Diamond with half-diagonals (r, 0.6 r). Area 1.2 r².
    Rhomb,
    /// Equilateral triangle with circumradius r. Area (3√3/4) r².
    Angular,
    /// Ellipse with semi-axes (r, 0.75 r). Area 0.75 π r².
    Rounded,
    /// Ellipse with semi-axes (r, 0.25 r). Area 0.25 π r².
    ElongatedShell,
    /// Disc of radius r with a bubble-like rendering. Area π r².
    Vesicular,
}

impl ShapeFamily {
    /// Covered area for size parameter `r`, exact up to rasterization.
    pub fn area(self, r: f64) -> f64 {
        match self {
            ShapeFamily::Rhomb => 2.0 * 0.6 * r * r,
            ShapeFamily::Angular => 3.0 * (3.0f64).sqrt() / 4.0 * r * r,
            ShapeFamily::Rounded => 0.75 * std::f64::consts::PI * r * r,
            ShapeFamily::ElongatedShell => 0.25 * std::f64::consts::PI * r * r,
            ShapeFamily::Vesicular => std::f64::consts::PI * r * r,
        }
    }

    /// Is local point (dx, dy), already rotated into the shape frame,
    /// inside the shape scaled by `scale`?
    fn inside_local(self, x: f32, y: f32, r: f32, scale: f32) -> bool {
        let r = r * scale;
        if r <= 0.0 {
            return false;
        }
        match self {
            ShapeFamily::Rhomb => (x / r).abs() + (y / (0.6 * r)).abs() <= 1.0,
            ShapeFamily::Angular => {
                // circumradius-r equilateral triangle, one vertex up
                let verts = [(0.0f32, -r), (r * 0.8660254, r * 0.5), (-r * 0.8660254, r * 0.5)];
                let mut sign = 0i8;
                for i in 0..3 {
                    let (ax, ay) = verts[i];
                    let (bx, by) = verts[(i + 1) % 3];
                    let cross = (bx - ax) * (y - ay) - (by - ay) * (x - ax);
                    let s = if cross >= 0.0 { 1 } else { -1 };
                    if sign == 0 {
                        sign = s;
                    } else if s != sign {
                        return false;
                    }
                }
                true
            }
            ShapeFamily::Rounded => {
                let (a, b) = (r, 0.75 * r);
                (x / a) * (x / a) + (y / b) * (y / b) <= 1.0
            }
            ShapeFamily::ElongatedShell => {
                let (a, b) = (r, 0.25 * r);
                (x / a) * (x / a) + (y / b) * (y / b) <= 1.0
            }
            ShapeFamily::Vesicular => x * x + y * y <= r * r,
        }
    }
}

/// Per-class inclusion population. Classes must differ in at least one
/// field.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Recipe {
    pub shape: ShapeFamily,
    /// Plane-polarized body color range, per-channel uniform.
    pub color_lo: [u8; 3],
    pub color_hi: [u8; 3],
    /// Cross-polarized birefringence palette; each inclusion picks one.
    pub xpl_palette: Vec<[u8; 3]>,
    /// Inclusions per image, inclusive range. Minimum must be >= 1 so the
    /// mask invariant (non-empty) holds for every sample.
    pub density: (usize, usize),
    /// Size parameter range in pixels.
    pub size: (f32, f32),
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct SynthSpec {
    pub classes: Vec<(String, Recipe)>,
    /// Geometry draws per class; each draw yields a ppl and an xpl image.
    pub per_class: usize,
    pub image_size: usize,
    pub seed: u64,
}

const PLACEMENT_ATTEMPTS: usize = 40;

impl SynthSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.classes.len() < 2 {
            return Err(DataError::InvalidSpec("need at least 2 classes".into()));
        }
        if self.per_class == 0 {
            return Err(DataError::InvalidSpec("per_class must be at least 1".into()));
        }
        if self.image_size < 64 {
            return Err(DataError::InvalidSpec("image size must be at least 64".into()));
        }
        for (name, r) in &self.classes {
            if r.density.0 < 1 || r.density.0 > r.density.1 {
                return Err(DataError::InvalidSpec(format!(
                    "class {name}: density range {:?} must satisfy 1 <= min <= max",
                    r.density
                )));
            }
            if !(r.size.0 > 0.0 && r.size.0 <= r.size.1) {
                return Err(DataError::InvalidSpec(format!(
                    "class {name}: size range {:?} must satisfy 0 < min <= max",
                    r.size
                )));
            }
            let margin = r.size.1.ceil() as usize + 1;
            if 2 * margin + 4 > self.image_size {
                return Err(DataError::InvalidSpec(format!(
                    "class {name}: max size {} does not fit a {}px canvas",
                    r.size.1, self.image_size
                )));
            }
            if r.xpl_palette.is_empty() {
                return Err(DataError::InvalidSpec(format!(
                    "class {name}: xpl palette is empty"
                )));
            }
        }
        for i in 0..self.classes.len() {
            for j in i + 1..self.classes.len() {
                if self.classes[i].1 == self.classes[j].1 {
                    return Err(DataError::InvalidSpec(format!(
                        "classes {} and {} have identical recipes",
                        self.classes[i].0, self.classes[j].0
                    )));
                }
            }
        }
        Ok(())
    }

    /// Four visually distinct classes on the default 256px canvas.
    pub fn demo4(per_class: usize, seed: u64) -> SynthSpec {
        SynthSpec {
            classes: vec![
                (
                    "calcite_rhombs".into(),
                    Recipe {
                        shape: ShapeFamily::Rhomb,
                        color_lo: [206, 170, 150],
                        color_hi: [232, 196, 176],
                        xpl_palette: vec![[236, 170, 210], [244, 214, 120], [190, 226, 240]],
                        density: (5, 9),
                        size: (16.0, 26.0),
                    },
                ),
                (
                    "quartz_angular".into(),
                    Recipe {
                        shape: ShapeFamily::Angular,
                        color_lo: [180, 186, 196],
                        color_hi: [210, 216, 226],
                        xpl_palette: vec![[234, 234, 238], [148, 148, 158], [80, 80, 92]],
                        density: (9, 15),
                        size: (12.0, 20.0),
                    },
                ),
                (
                    "shell_fragments".into(),
                    Recipe {
                        shape: ShapeFamily::ElongatedShell,
                        color_lo: [120, 94, 66],
                        color_hi: [150, 122, 92],
                        xpl_palette: vec![[226, 188, 120], [198, 142, 80], [240, 220, 170]],
                        density: (4, 7),
                        size: (22.0, 34.0),
                    },
                ),
                (
                    "vesicular_glass".into(),
                    Recipe {
                        shape: ShapeFamily::Vesicular,
                        color_lo: [96, 88, 80],
                        color_hi: [128, 118, 106],
                        xpl_palette: vec![[70, 64, 60], [96, 88, 84], [50, 46, 44]],
                        density: (10, 18),
                        size: (8.0, 13.0),
                    },
                ),
            ],
            per_class,
            image_size: 256,
            seed,
        }
    }

    /// Ten classes: the five footprint families crossed with a coarse/fine
    /// habit, palettes shared within each family so color alone cannot
    /// separate the pair.
    pub fn fabric10(per_class: usize, seed: u64) -> SynthSpec {
        let mut classes = Vec::new();
        let demo = SynthSpec::demo4(1, seed);
        let families = [
            ("calcite", demo.classes[0].1.clone()),
            ("quartz", demo.classes[1].1.clone()),
            (
                "olivine",
                Recipe {
                    shape: ShapeFamily::Rounded,
                    color_lo: [128, 150, 112],
                    color_hi: [158, 180, 140],
                    xpl_palette: vec![[120, 200, 150], [220, 160, 220], [160, 220, 240]],
                    density: (6, 12),
                    size: (9.0, 16.0),
                },
            ),
            ("shell", demo.classes[2].1.clone()),
            ("vesicle", demo.classes[3].1.clone()),
        ];
        for (name, base) in families {
            let mut coarse = base.clone();
            coarse.density = (4, 7);
            coarse.size = (14.0, 22.0);
            let mut fine = base;
            fine.density = (14, 22);
            fine.size = (5.0, 9.0);
            classes.push((format!("{name}_coarse"), coarse));
            classes.push((format!("{name}_fine"), fine));
        }
        SynthSpec { classes, per_class, image_size: 256, seed }
    }
}

struct Inclusion {
    shape: ShapeFamily,
    cx: i32,
    cy: i32,
    r: f32,
    theta: f32,
    ppl_rgb: [u8; 3],
    xpl_rgb: [u8; 3],
    band_freq: f32,
    band_phase: f32,
}

impl Inclusion {
    fn inside(&self, x: i32, y: i32, scale: f32) -> bool {
        let dx = (x - self.cx) as f32;
        let dy = (y - self.cy) as f32;
        let (s, c) = self.theta.sin_cos();
        self.shape.inside_local(c * dx + s * dy, -s * dx + c * dy, self.r, scale)
    }

    fn local_x(&self, x: i32, y: i32) -> f32 {
        let dx = (x - self.cx) as f32;
        let dy = (y - self.cy) as f32;
        let (s, c) = self.theta.sin_cos();
        c * dx + s * dy
    }
}

/// Generate the full corpus in memory. Byte-identical for equal specs.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Corpus, DataError> {
    spec.validate()?;
    let mut samples = Vec::new();
    for (label, (name, recipe)) in spec.classes.iter().enumerate() {
        for idx in 0..spec.per_class {
            let mut rng = stream(spec.seed, label as u64, idx as u64);
            let inclusions =
                draw_population(recipe, spec.image_size, &mut rng).map_err(|attempts| {
                    DataError::Overcrowded { class: name.clone(), attempts }
                })?;
            let (ppl, xpl, mask) = render(spec.image_size, &inclusions, &mut rng);
            let sample_id = format!("synth{label:02}_{idx:04}");
            for (polarization, image) in
                [(Polarization::Ppl, ppl), (Polarization::Xpl, xpl)]
            {
                samples.push(Sample {
                    image,
                    label,
                    sample_id: sample_id.clone(),
                    polarization,
                    magnification: Magnification::X2p5,
                    rotation_deg: None,
                    mask: Some(mask.clone()),
                    path: None,
                });
            }
        }
    }
    let split = vec![SplitTag::Train; samples.len()];
    Ok(Corpus {
        samples,
        class_names: spec.classes.iter().map(|(n, _)| n.clone()).collect(),
        split,
        norm: None,
    })
}

/// Sample the inclusion population. Placement is uniform over the margin
/// domain, rejecting centers closer than 0.7 (r_i + r_j) to an existing
/// inclusion; a failed placement after the attempt budget reports back.
fn draw_population(
    recipe: &Recipe,
    size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Inclusion>, usize> {
    let n = uniform_int(rng, recipe.density.0, recipe.density.1);
    let mut placed: Vec<Inclusion> = Vec::with_capacity(n);
    for _ in 0..n {
        let r = uniform(rng, recipe.size.0, recipe.size.1);
        let theta = uniform(rng, 0.0, std::f32::consts::PI);
        let ppl_rgb = [
            lerp_u8(recipe.color_lo[0], recipe.color_hi[0], rng.gen::<f32>()),
            lerp_u8(recipe.color_lo[1], recipe.color_hi[1], rng.gen::<f32>()),
            lerp_u8(recipe.color_lo[2], recipe.color_hi[2], rng.gen::<f32>()),
        ];
        let xpl_rgb = recipe.xpl_palette[uniform_int(rng, 0, recipe.xpl_palette.len() - 1)];
        let band_freq = uniform(rng, 0.45, 1.1);
        let band_phase = uniform(rng, 0.0, std::f32::consts::TAU);
        let margin = r.ceil() as i32 + 1;
        let hi = size as i32 - 1 - margin;

        let mut done = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let cx = uniform_int(rng, margin as usize, hi as usize) as i32;
            let cy = uniform_int(rng, margin as usize, hi as usize) as i32;
            let ok = placed.iter().all(|p| {
                let d2 = ((p.cx - cx) * (p.cx - cx) + (p.cy - cy) * (p.cy - cy)) as f32;
                let min = 0.7 * (p.r + r);
                d2 >= min * min
            });
            if ok {
                placed.push(Inclusion {
                    shape: recipe.shape,
                    cx,
                    cy,
                    r,
                    theta,
                    ppl_rgb,
                    xpl_rgb,
                    band_freq,
                    band_phase,
                });
                done = true;
                break;
            }
        }
        if !done {
            return Err(PLACEMENT_ATTEMPTS);
        }
    }
    Ok(placed)
}

fn lerp_u8(lo: u8, hi: u8, t: f32) -> u8 {
    (lo as f32 + (hi as f32 - lo as f32) * t).round().clamp(0.0, 255.0) as u8
}

/// Two-octave value noise in [0, 1], bilinear between lattice points.
struct ValueNoise {
    cell: usize,
    lattice_w: usize,
    values: Vec<f32>,
}

impl ValueNoise {
    fn new(size: usize, cell: usize, rng: &mut ChaCha8Rng) -> Self {
        let lattice_w = size / cell + 2;
        let values = (0..lattice_w * lattice_w).map(|_| rng.gen::<f32>()).collect();
        ValueNoise { cell, lattice_w, values }
    }

    fn at(&self, x: usize, y: usize) -> f32 {
        let fx = x as f32 / self.cell as f32;
        let fy = y as f32 / self.cell as f32;
        let (ix, iy) = (fx as usize, fy as usize);
        let (tx, ty) = (fx - ix as f32, fy - iy as f32);
        let v = |i: usize, j: usize| self.values[j * self.lattice_w + i];
        let top = v(ix, iy) * (1.0 - tx) + v(ix + 1, iy) * tx;
        let bot = v(ix, iy + 1) * (1.0 - tx) + v(ix + 1, iy + 1) * tx;
        top * (1.0 - ty) + bot * ty
    }
}

fn render(size: usize, inclusions: &[Inclusion], rng: &mut ChaCha8Rng) -> (Image, Image, Mask) {
    let coarse = ValueNoise::new(size, 48, rng);
    let fine = ValueNoise::new(size, 12, rng);

    let mut ppl = Image::new(size, size);
    let mut xpl = Image::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let n = coarse.at(x, y) - 0.5;
            let g = fine.at(x, y) - 0.5;
            let ppl_base = [205.0, 196.0, 182.0];
            let ppl_px = [
                clamp_u8(ppl_base[0] + 26.0 * n + 8.0 * g),
                clamp_u8(ppl_base[1] + 24.0 * n + 8.0 * g),
                clamp_u8(ppl_base[2] + 22.0 * n + 8.0 * g),
            ];
            ppl.set_px(x, y, ppl_px);
            let xpl_px = [
                clamp_u8(17.0 + 14.0 * n.max(0.0) + 5.0 * g.abs()),
                clamp_u8(15.0 + 12.0 * n.max(0.0) + 5.0 * g.abs()),
                clamp_u8(23.0 + 18.0 * n.max(0.0) + 5.0 * g.abs()),
            ];
            xpl.set_px(x, y, xpl_px);
        }
    }

    let mut mask = Mask::new(size, size);
    for inc in inclusions {
        let reach = inc.r.ceil() as i32 + 1;
        let rim_scale = 1.0 - (1.8 / inc.r).min(0.4);
        for y in (inc.cy - reach).max(0)..=(inc.cy + reach).min(size as i32 - 1) {
            for x in (inc.cx - reach).max(0)..=(inc.cx + reach).min(size as i32 - 1) {
                if !inc.inside(x, y, 1.0) {
                    continue;
                }
                mask.set(x as usize, y as usize, true);
                let rim = !inc.inside(x, y, rim_scale);
                let dx = (x - inc.cx) as f32;
                let dy = (y - inc.cy) as f32;
                let t = (dx * dx + dy * dy).sqrt() / inc.r;

                // plane-polarized: flat body, gentle radial falloff, dark rim
                let mut f = 1.0 - 0.15 * t.min(1.0);
                if rim {
                    f *= 0.72;
                }
                if inc.shape == ShapeFamily::Vesicular && t < 0.45 {
                    f *= 1.18; // bubble highlight
                }
                let px = [
                    clamp_u8(inc.ppl_rgb[0] as f32 * f),
                    clamp_u8(inc.ppl_rgb[1] as f32 * f),
                    clamp_u8(inc.ppl_rgb[2] as f32 * f),
                ];
                ppl.set_px(x as usize, y as usize, px);

                // cross-polarized: bright body with interference-style bands
                let band = 0.70
                    + 0.30
                        * (0.5
                            + 0.5
                                * (inc.band_freq * inc.local_x(x, y) + inc.band_phase).sin());
                let mut f = band;
                if rim {
                    f *= 0.6;
                }
                if inc.shape == ShapeFamily::Vesicular && t < 0.45 {
                    f *= 1.15;
                }
                let px = [
                    clamp_u8(inc.xpl_rgb[0] as f32 * f),
                    clamp_u8(inc.xpl_rgb[1] as f32 * f),
                    clamp_u8(inc.xpl_rgb[2] as f32 * f),
                ];
                xpl.set_px(x as usize, y as usize, px);
            }
        }
    }
    (ppl, xpl, mask)
}

fn clamp_u8(v: f32) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}
