//! Disk corpus layout: scan, write, split, fold.
//!
//! Layout: `root/<class_name>/<sample_id>__<ppl|xpl>__<2.5x|10x>[__rot<deg>].png`
//! with optional binary masks under `root/_masks/<same stem>.png`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::rng::stream;
use super::{
    Corpus, DataError, Image, Magnification, Mask, Polarization, Sample, SplitTag,
};

const MASK_DIR: &str = "_masks";

// rng stream lanes for split and fold shuffles
const SPLIT_LANE: u64 = 0x51;
const FOLD_LANE: u64 = 0xf0;

/// A scan keeps every file it could not ingest, with the reason, instead of
/// dropping it silently.
#[derive(Debug)]
pub struct ScanOutcome {
    pub corpus: Corpus,
    pub rejects: Vec<(PathBuf, String)>,
}

/// Read a corpus tree from disk. Class names are the sorted directory
/// names; samples are ordered lexicographically by path, so rescans of an
/// unchanged tree produce identical corpora.
pub fn scan_corpus(root: &Path) -> Result<ScanOutcome, DataError> {
    let mut class_dirs: Vec<PathBuf> = read_dir_sorted(root)?
        .into_iter()
        .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n != MASK_DIR))
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(DataError::InvalidSpec(format!(
            "no class directories under {}",
            root.display()
        )));
    }

    let mask_root = root.join(MASK_DIR);
    let mut samples = Vec::new();
    let mut class_names = Vec::new();
    let mut rejects = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let class_name = dir.file_name().unwrap().to_string_lossy().into_owned();
        let mut found = 0usize;
        for path in read_dir_sorted(dir)? {
            if path.is_dir() {
                continue;
            }
            match ingest(&path, label, &mask_root) {
                Ok(sample) => {
                    samples.push(sample);
                    found += 1;
                }
                Err(reason) => rejects.push((path, reason)),
            }
        }
        if found == 0 {
            return Err(DataError::EmptyClass(class_name));
        }
        class_names.push(class_name);
    }

    let split = vec![SplitTag::Train; samples.len()];
    Ok(ScanOutcome {
        corpus: Corpus { samples, class_names, split, norm: None },
        rejects,
    })
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let entries = fs::read_dir(dir)
        .map_err(|source| DataError::Io { path: dir.to_path_buf(), source })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    paths.sort();
    Ok(paths)
}

fn ingest(path: &Path, label: usize, mask_root: &Path) -> Result<Sample, String> {
    if path.extension().and_then(|e| e.to_str()) != Some("png") {
        return Err("not a .png file".into());
    }
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| "non-utf8 filename".to_string())?;
    let (sample_id, polarization, magnification, rotation_deg) = parse_stem(stem)?;
    let image = read_rgb_png(path).map_err(|e| e.to_string())?;

    let mask_path = mask_root.join(format!("{stem}.png"));
    let mask = if mask_path.is_file() {
        let m = read_mask_png(&mask_path).map_err(|e| e.to_string())?;
        if (m.w, m.h) != (image.w, image.h) {
            return Err(format!(
                "mask is {}x{} but image is {}x{}",
                m.w, m.h, image.w, image.h
            ));
        }
        if m.count() == 0 {
            return Err("mask is empty".into());
        }
        Some(m)
    } else {
        None
    };

    Ok(Sample {
        image,
        label,
        sample_id,
        polarization,
        magnification,
        rotation_deg,
        mask,
        path: Some(path.to_path_buf()),
    })
}

/// Parse `<sample_id>__<ppl|xpl>__<2.5x|10x>[__rot<deg>]`.
pub fn parse_stem(
    stem: &str,
) -> Result<(String, Polarization, Magnification, Option<u32>), String> {
    let parts: Vec<&str> = stem.split("__").collect();
    if parts.len() < 3 || parts.len() > 4 {
        return Err(format!("expected 3 or 4 '__'-separated fields, got {}", parts.len()));
    }
    if parts[0].is_empty() {
        return Err("empty sample_id".into());
    }
    let polarization = match parts[1] {
        "ppl" => Polarization::Ppl,
        "xpl" => Polarization::Xpl,
        other => return Err(format!("unknown polarization {other:?}")),
    };
    let magnification = match parts[2] {
        "2.5x" => Magnification::X2p5,
        "10x" => Magnification::X10,
        other => return Err(format!("unknown magnification {other:?}")),
    };
    let rotation_deg = match parts.get(3) {
        None => None,
        Some(r) => {
            let deg = r
                .strip_prefix("rot")
                .and_then(|d| d.parse::<u32>().ok())
                .ok_or_else(|| format!("bad rotation field {r:?}"))?;
            Some(deg)
        }
    };
    Ok((parts[0].to_string(), polarization, magnification, rotation_deg))
}

/// Write a corpus out in the scanned layout (images plus masks).
pub fn write_corpus(corpus: &Corpus, root: &Path) -> Result<(), DataError> {
    for sample in &corpus.samples {
        let dir = root.join(&corpus.class_names[sample.label]);
        fs::create_dir_all(&dir).map_err(|source| DataError::Io { path: dir.clone(), source })?;
        let name = format!("{}.png", sample.stem());
        write_rgb_png(&sample.image, &dir.join(&name))?;
        if let Some(mask) = &sample.mask {
            let mask_dir = root.join(MASK_DIR);
            fs::create_dir_all(&mask_dir)
                .map_err(|source| DataError::Io { path: mask_dir.clone(), source })?;
            write_mask_png(mask, &mask_dir.join(&name))?;
        }
    }
    Ok(())
}

pub fn read_rgb_png(path: &Path) -> Result<Image, DataError> {
    let dynimg = image::ImageReader::open(path)
        .map_err(|source| DataError::Io { path: path.to_path_buf(), source })?
        .decode()
        .map_err(|e| DataError::BadImage { path: path.to_path_buf(), reason: e.to_string() })?;
    let image::DynamicImage::ImageRgb8(rgb) = dynimg else {
        return Err(DataError::BadImage {
            path: path.to_path_buf(),
            reason: "only 8-bit RGB PNG is accepted".into(),
        });
    };
    Ok(Image {
        w: rgb.width() as usize,
        h: rgb.height() as usize,
        data: rgb.into_raw(),
    })
}

pub fn write_rgb_png(img: &Image, path: &Path) -> Result<(), DataError> {
    let buf = image::RgbImage::from_raw(img.w as u32, img.h as u32, img.data.clone())
        .expect("image buffer length matches dimensions");
    buf.save(path)
        .map_err(|e| DataError::BadImage { path: path.to_path_buf(), reason: e.to_string() })
}

/// Masks are stored as 8-bit RGB with 0 or 255 in every channel; any pixel
/// with red >= 128 reads back as set.
pub fn read_mask_png(path: &Path) -> Result<Mask, DataError> {
    let img = read_rgb_png(path)?;
    let data = img.data.chunks(3).map(|px| px[0] >= 128).collect();
    Ok(Mask { w: img.w, h: img.h, data })
}

pub fn write_mask_png(mask: &Mask, path: &Path) -> Result<(), DataError> {
    let mut img = Image::new(mask.w, mask.h);
    for (px, &b) in img.data.chunks_mut(3).zip(&mask.data) {
        let v = if b { 255 } else { 0 };
        px.fill(v);
    }
    write_rgb_png(&img, path)
}

/// Tag each sample train or test, stratified per class.
///
/// Image-level mode shuffles each class independently and takes
/// `round(fraction * class_size)` for train. Group mode keeps all images of
/// one `sample_id` in the same split.
pub fn stratified_split(
    corpus: &mut Corpus,
    train_fraction: f64,
    seed: u64,
    group_by_sample_id: bool,
) -> Result<(), DataError> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(DataError::Split(format!(
            "train fraction {train_fraction} outside [0, 1]"
        )));
    }
    for label in 0..corpus.class_names.len() {
        let members = corpus.of_class(label);
        if members.is_empty() {
            return Err(DataError::EmptyClass(corpus.class_names[label].clone()));
        }
        let target = (train_fraction * members.len() as f64).round() as usize;
        let mut rng = stream(seed, SPLIT_LANE, label as u64);

        let train_set: Vec<usize> = if group_by_sample_id {
            if members.len() < 2 {
                return Err(DataError::Split(format!(
                    "class {} has fewer than 2 images; cannot group-split",
                    corpus.class_names[label]
                )));
            }
            let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for &i in &members {
                groups.entry(&corpus.samples[i].sample_id).or_default().push(i);
            }
            let mut order: Vec<&Vec<usize>> = groups.values().collect();
            shuffle(&mut order, &mut rng);
            let mut train = Vec::new();
            for g in order {
                if train.len() >= target {
                    break;
                }
                train.extend_from_slice(g);
            }
            train
        } else {
            let mut order = members.clone();
            shuffle(&mut order, &mut rng);
            order.truncate(target);
            order
        };

        for &i in &members {
            corpus.split[i] = SplitTag::Test;
        }
        for &i in &train_set {
            corpus.split[i] = SplitTag::Train;
        }
    }
    Ok(())
}

fn shuffle<T>(items: &mut [T], rng: &mut rand_chacha::ChaCha8Rng) {
    use rand::Rng;
    for i in (1..items.len()).rev() {
        items.swap(i, rng.gen_range(0..=i));
    }
}

/// Stratified k-fold assignment over the train-tagged subset.
/// Returns `k` disjoint index lists whose union is the train set.
pub fn kfold(corpus: &Corpus, k: usize, seed: u64) -> Result<Vec<Vec<usize>>, DataError> {
    if k < 2 {
        return Err(DataError::Split(format!("k must be at least 2, got {k}")));
    }
    let mut folds = vec![Vec::new(); k];
    for label in 0..corpus.class_names.len() {
        let mut members: Vec<usize> = corpus
            .train_indices()
            .into_iter()
            .filter(|&i| corpus.samples[i].label == label)
            .collect();
        let mut rng = stream(seed, FOLD_LANE, label as u64);
        shuffle(&mut members, &mut rng);
        for (pos, i) in members.into_iter().enumerate() {
            folds[pos % k].push(i);
        }
    }
    for fold in &mut folds {
        fold.sort_unstable();
    }
    Ok(folds)
}
