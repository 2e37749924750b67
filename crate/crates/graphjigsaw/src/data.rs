//! Identity-foldered datasets, manifests, and augmentation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use graphjigsaw_core::Tensor;
use image::imageops::FilterType;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};

pub const NORMALIZE_MEAN: f64 = 0.5;
pub const NORMALIZE_STD: f64 = 0.5;
const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Probe,
    Distractor,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    /// Relative to the manifest root.
    pub path: PathBuf,
    pub identity: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub root: PathBuf,
    /// Identity folder names; index is the dense identity id.
    pub identities: Vec<String>,
    pub samples: Vec<Sample>,
    /// Files that could not be read as images.
    pub unreadable: Vec<PathBuf>,
    /// Identities dropped by the minimum-images filter.
    pub filtered: Vec<String>,
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn sorted_entries(dir: &Path) -> AppResult<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(AppError::io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    v.sort();
    Ok(v)
}

/// Scan `root/<identity>/<image>`; identities are indexed alphabetically after filtering.
pub fn scan_dataset(root: &Path, min_images: usize, split: Split) -> AppResult<Manifest> {
    if !root.is_dir() {
        return Err(AppError::Data(format!("{} is not a directory", root.display())));
    }
    let mut per_identity: Vec<(String, Vec<PathBuf>)> = Vec::new();
    let mut unreadable = Vec::new();
    for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let name = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let mut files = Vec::new();
        for file in sorted_entries(&dir)?.into_iter().filter(|p| p.is_file() && is_image(p)) {
            match image::image_dimensions(&file) {
                Ok(_) => files.push(file.strip_prefix(root).unwrap_or(&file).to_path_buf()),
                Err(e) => {
                    log::warn!("skipping unreadable image {}: {e}", file.display());
                    unreadable.push(file);
                }
            }
        }
        per_identity.push((name, files));
    }
    let (kept, dropped): (Vec<_>, Vec<_>) = per_identity
        .into_iter()
        .partition(|(_, files)| !files.is_empty() && files.len() >= min_images);
    if kept.is_empty() {
        return Err(AppError::Data(format!(
            "{} has no identity folders with at least {} readable images",
            root.display(),
            min_images.max(1)
        )));
    }
    let filtered: Vec<String> = dropped.into_iter().map(|(n, _)| n).collect();
    if !filtered.is_empty() {
        log::warn!("{} identities below {min_images} images were excluded", filtered.len());
    }
    let mut identities = Vec::with_capacity(kept.len());
    let mut samples = Vec::new();
    for (id, (name, files)) in kept.into_iter().enumerate() {
        identities.push(name);
        samples.extend(files.into_iter().map(|path| Sample {
            path,
            identity: id,
            split,
        }));
    }
    Ok(Manifest {
        root: root.to_path_buf(),
        identities,
        samples,
        unreadable,
        filtered,
    })
}

impl Manifest {
    pub fn num_classes(&self) -> usize {
        self.identities.len()
    }

    pub fn full_path(&self, s: &Sample) -> PathBuf {
        self.root.join(&s.path)
    }

    /// Mark the last `⌈fraction·n⌉` images of every identity as validation, keeping at least one for training.
    pub fn with_holdout(mut self, fraction: f64) -> Self {
        if fraction <= 0.0 {
            return self;
        }
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for s in &self.samples {
            *counts.entry(s.identity).or_default() += 1;
        }
        let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
        for s in &mut self.samples {
            let n = counts[&s.identity];
            let held = ((fraction * n as f64).ceil() as usize).min(n - 1);
            let i = seen.entry(s.identity).or_default();
            if *i >= n - held {
                s.split = Split::Validation;
            }
            *i += 1;
        }
        self
    }

    pub fn of_split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn write_csv(&self, path: &Path) -> AppResult<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| AppError::Data(e.to_string()))?;
        w.write_record(["path", "identity", "split"])
            .map_err(|e| AppError::Data(e.to_string()))?;
        for s in &self.samples {
            w.serialize((s.path.to_string_lossy(), &self.identities[s.identity], s.split))
                .map_err(|e| AppError::Data(e.to_string()))?;
        }
        w.flush().map_err(AppError::io(path))
    }
}

/// An RGB image resized to a square, stored as `(3, side, side)` bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecodedImage {
    pub side: usize,
    pub pixels: Vec<u8>,
}

pub fn load_image(path: &Path, side: usize) -> AppResult<DecodedImage> {
    let img = image::open(path)
        .map_err(|e| AppError::Data(format!("cannot decode {}: {e}", path.display())))?
        .to_rgb8();
    let img = if img.width() as usize == side && img.height() as usize == side {
        img
    } else {
        image::imageops::resize(&img, side as u32, side as u32, FilterType::Triangle)
    };
    let plane = side * side;
    let mut pixels = vec![0u8; 3 * plane];
    for (k, p) in img.pixels().enumerate() {
        for c in 0..3 {
            pixels[c * plane + k] = p[c];
        }
    }
    Ok(DecodedImage { side, pixels })
}

fn crop(img: &DecodedImage, top: usize, left: usize, r: usize, flip: bool) -> Vec<f64> {
    let (s, plane) = (img.side, img.side * img.side);
    let mut out = Vec::with_capacity(3 * r * r);
    for c in 0..3 {
        for y in 0..r {
            for x in 0..r {
                let sx = if flip { left + r - 1 - x } else { left + x };
                let v = img.pixels[c * plane + (top + y) * s + sx] as f64 / 255.0;
                out.push((v - NORMALIZE_MEAN) / NORMALIZE_STD);
            }
        }
    }
    out
}

/// Random `r × r` crop and a horizontal flip with probability 1/2, normalized.
pub fn augment_train<R: Rng + ?Sized>(img: &DecodedImage, r: usize, rng: &mut R) -> Vec<f64> {
    let slack = img.side - r;
    let top = rng.gen_range(0..=slack);
    let left = rng.gen_range(0..=slack);
    let flip = rng.gen_bool(0.5);
    crop(img, top, left, r, flip)
}

/// Centre `r × r` crop, normalized.
pub fn augment_eval(img: &DecodedImage, r: usize) -> Vec<f64> {
    let off = (img.side - r) / 2;
    crop(img, off, off, r, false)
}

/// Stack `(3, r, r)` images into an NCHW batch.
pub fn stack(images: Vec<Vec<f64>>, r: usize) -> Tensor {
    let n = images.len();
    let data: Vec<f64> = images.into_iter().flatten().collect();
    Tensor::new(&[n, 3, r, r], data).expect("uniform image sizes")
}

/// Decode every sample once, in manifest order.
pub fn load_all(manifest: &Manifest, samples: &[&Sample], side: usize) -> AppResult<Vec<DecodedImage>> {
    samples.iter().map(|s| load_image(&manifest.full_path(s), side)).collect()
}
