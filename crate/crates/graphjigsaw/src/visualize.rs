//! Grad-CAM overlays and retrieval grids as PNG files.

use std::path::{Path, PathBuf};

use graphjigsaw_core::gradcam::{grad_cam, last_stages, ActivationMap};
use graphjigsaw_core::training::GraphJigsawModel;
use graphjigsaw_core::Tensor;
use image::{Rgb, RgbImage};

use crate::data::{augment_eval, load_image, NORMALIZE_MEAN, NORMALIZE_STD};
use crate::error::{AppError, AppResult};
use crate::evaluate::EmbeddingRecord;

pub const OVERLAY_ALPHA: f64 = 0.5;
const RED: Rgb<u8> = Rgb([220, 20, 20]);
const BORDER: u32 = 3;

/// A normalized `(3, R, R)` image back to RGB bytes.
pub fn to_rgb(pixels: &[f64], r: usize) -> RgbImage {
    let plane = r * r;
    RgbImage::from_fn(r as u32, r as u32, |x, y| {
        let k = y as usize * r + x as usize;
        Rgb([0, 1, 2].map(|c| ((pixels[c * plane + k] * NORMALIZE_STD + NORMALIZE_MEAN) * 255.0).round().clamp(0.0, 255.0) as u8))
    })
}

/// Blue → cyan → yellow → red ramp for a value in [0, 1].
pub fn heat_color(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let channel = |centre: f64| (1.5 - (4.0 * v - centre).abs()).clamp(0.0, 1.0);
    [channel(3.0), channel(2.0), channel(1.0)].map(|c| (c * 255.0).round() as u8)
}

pub fn overlay(base: &RgbImage, heat: &Tensor) -> RgbImage {
    let w = base.width() as usize;
    RgbImage::from_fn(base.width(), base.height(), |x, y| {
        let h = heat_color(heat.data()[y as usize * w + x as usize]);
        let b = base.get_pixel(x, y).0;
        Rgb([0, 1, 2].map(|c| ((1.0 - OVERLAY_ALPHA) * b[c] as f64 + OVERLAY_ALPHA * h[c] as f64).round() as u8))
    })
}

pub fn overlay_name(index: usize, image: &Path, stage: usize) -> String {
    let stem = image.file_stem().unwrap_or_default().to_string_lossy();
    format!("{index:03}_{stem}_stage{stage}.png")
}

/// Overlays for the last three stages of each image in `images`.
pub fn write_gradcam_overlays(
    model: &GraphJigsawModel,
    images: &[PathBuf],
    resize: usize,
    out: &Path,
) -> AppResult<Vec<(PathBuf, ActivationMap)>> {
    std::fs::create_dir_all(out).map_err(AppError::io(out))?;
    let r = model.backbone.config().input_resolution;
    let stages = last_stages(model.backbone.config().stages(), 3);
    let mut written = Vec::new();
    for (i, path) in images.iter().enumerate() {
        let pixels = augment_eval(&load_image(path, resize)?, r);
        let base = to_rgb(&pixels, r);
        let tensor = Tensor::new(&[3, r, r], pixels).expect("image shape");
        for map in grad_cam(&model.backbone, &tensor, &stages, None)? {
            let file = out.join(overlay_name(i, path, map.stage));
            overlay(&base, &map.upsampled)
                .save(&file)
                .map_err(|e| AppError::Data(format!("{}: {e}", file.display())))?;
            written.push((file, map));
        }
    }
    Ok(written)
}

/// Dashed outline: 4 pixels on, 3 off, `BORDER` pixels thick.
fn dotted_border(img: &mut RgbImage, x0: u32, y0: u32, side: u32, color: Rgb<u8>) {
    for t in 0..side {
        if t % 7 >= 4 {
            continue;
        }
        for b in 0..BORDER {
            for (x, y) in [(x0 + t, y0 + b), (x0 + t, y0 + side - 1 - b), (x0 + b, y0 + t), (x0 + side - 1 - b, y0 + t)] {
                img.put_pixel(x, y, color);
            }
        }
    }
}

pub struct RetrievalRow {
    pub query: RgbImage,
    pub identity: String,
    pub results: Vec<(RgbImage, String, f64)>,
}

/// One row per query: the query, a gap, then its ranked results. Wrong identities get a red dotted border.
pub fn retrieval_grid(rows: &[RetrievalRow]) -> RgbImage {
    let cell = rows.first().map_or(1, |r| r.query.width()) + 2 * BORDER;
    let cols = rows.iter().map(|r| r.results.len()).max().unwrap_or(0) as u32 + 1;
    let gap = cell / 4;
    let (w, h) = (cols * cell + gap, rows.len().max(1) as u32 * cell);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let place = |img: &mut RgbImage, tile: &RgbImage, x0: u32, y0: u32| {
        for (x, y, p) in tile.enumerate_pixels() {
            img.put_pixel(x0 + BORDER + x, y0 + BORDER + y, *p);
        }
    };
    for (i, row) in rows.iter().enumerate() {
        let y0 = i as u32 * cell;
        place(&mut img, &row.query, 0, y0);
        for (j, (tile, identity, _)) in row.results.iter().enumerate() {
            let x0 = (j as u32 + 1) * cell + gap;
            place(&mut img, tile, x0, y0);
            if *identity != row.identity {
                dotted_border(&mut img, x0, y0, cell, RED);
            }
        }
    }
    img
}

/// Indices of the `k` most similar gallery records, ties to the earlier record.
pub fn top_k(query: &[f64], gallery: &[EmbeddingRecord], k: usize) -> Vec<(usize, f64)> {
    let mut scored: Vec<(usize, f64)> = gallery
        .iter()
        .enumerate()
        .map(|(i, g)| (i, query.iter().zip(&g.vector).map(|(a, b)| a * b).sum()))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}
