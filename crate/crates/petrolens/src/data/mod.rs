//! Corpus ingestion, synthetic ground-truth generation, augmentation,
//! splits, and batch assembly.
//!
//! A corpus is a flat list of samples plus class names and per-sample
//! train/test tags. Everything downstream (training, evaluation,
//! explanation scoring) consumes this one shape.

pub mod augment;
pub mod batch;
pub mod corpus;
pub mod rng;
pub mod synth;

use std::path::PathBuf;

pub use augment::{augment, AugmentPolicy};
pub use batch::{compute_normalization, image_to_input, resize_mask_nearest, resize_rgb, to_batch};
pub use corpus::{
    kfold, parse_stem, read_rgb_png, scan_corpus, stratified_split, write_corpus, write_rgb_png,
    ScanOutcome,
};
pub use synth::{generate_synthetic, Recipe, ShapeFamily, SynthSpec};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad image {path}: {reason}")]
    BadImage { path: PathBuf, reason: String },
    #[error("class directory {0} contains no valid samples")]
    EmptyClass(String),
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("class {class}: could not place inclusions after {attempts} attempts")]
    Overcrowded { class: String, attempts: usize },
    #[error("split error: {0}")]
    Split(String),
}

/// 8-bit RGB image, row-major, `data.len() == w * h * 3`.
#[derive(Clone, PartialEq, Eq)]
pub struct Image {
    pub w: usize,
    pub h: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(w: usize, h: usize) -> Self {
        Image { w, h, data: vec![0; w * h * 3] }
    }

    pub fn px(&self, x: usize, y: usize) -> [u8; 3] {
        let at = (y * self.w + x) * 3;
        [self.data[at], self.data[at + 1], self.data[at + 2]]
    }

    pub fn set_px(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let at = (y * self.w + x) * 3;
        self.data[at..at + 3].copy_from_slice(&rgb);
    }
}

impl std::fmt::Debug for Image {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Image({}x{})", self.w, self.h)
    }
}

/// Binary ground-truth mask, same spatial extent as its image.
#[derive(Clone, PartialEq, Eq)]
pub struct Mask {
    pub w: usize,
    pub h: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(w: usize, h: usize) -> Self {
        Mask { w, h, data: vec![false; w * h] }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.w + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.w + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / (self.w * self.h) as f64
    }
}

impl std::fmt::Debug for Mask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Mask({}x{}, {} set)", self.w, self.h, self.count())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarization {
    Ppl,
    Xpl,
}

impl std::fmt::Display for Polarization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Polarization::Ppl => "ppl",
            Polarization::Xpl => "xpl",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Magnification {
    X2p5,
    X10,
}

impl std::fmt::Display for Magnification {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Magnification::X2p5 => "2.5x",
            Magnification::X10 => "10x",
        })
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Image,
    pub label: usize,
    pub sample_id: String,
    pub polarization: Polarization,
    pub magnification: Magnification,
    pub rotation_deg: Option<u32>,
    pub mask: Option<Mask>,
    /// Source file when the sample came from disk.
    pub path: Option<PathBuf>,
}

impl Sample {
    /// Filename stem: `<sample_id>__<pol>__<mag>[__rot<deg>]`.
    pub fn stem(&self) -> String {
        match self.rotation_deg {
            Some(deg) => format!(
                "{}__{}__{}__rot{deg}",
                self.sample_id, self.polarization, self.magnification
            ),
            None => format!("{}__{}__{}", self.sample_id, self.polarization, self.magnification),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Test,
}

/// Per-channel standardization statistics, computed on the train split.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
    /// Parallel to `samples`. Freshly built corpora tag everything train
    /// until a split assigns tags.
    pub split: Vec<SplitTag>,
    pub norm: Option<Normalization>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        self.tagged(SplitTag::Train)
    }

    pub fn test_indices(&self) -> Vec<usize> {
        self.tagged(SplitTag::Test)
    }

    fn tagged(&self, tag: SplitTag) -> Vec<usize> {
        self.split
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == tag)
            .map(|(i, _)| i)
            .collect()
    }

    /// Indices of every sample with the given label, in corpus order.
    pub fn of_class(&self, label: usize) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label == label)
            .map(|(i, _)| i)
            .collect()
    }
}
