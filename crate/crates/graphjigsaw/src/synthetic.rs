//! Procedural cartoon faces whose identity is carried by shape alone.
//!
//! Each class is a fixed tuple of outline, eye glyph, hair silhouette, and
//! ornament. Colours are drawn per image from one palette shared by every
//! class, so colour statistics say nothing about identity.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{AppError, AppResult};
use crate::seeds::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum Outline {
    Round,
    Oval,
    Square,
    Hexagon,
    Pointed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum Eyes {
    Dots,
    Rings,
    Slits,
    Triangles,
    Crosses,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum Hair {
    Bob,
    Spiky,
    Fringe,
    SidePart,
    Bun,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum Ornament {
    None,
    CheekStripes,
    ForeheadStar,
    ChinDot,
}

const OUTLINES: [Outline; 5] = [Outline::Round, Outline::Oval, Outline::Square, Outline::Hexagon, Outline::Pointed];
const EYES: [Eyes; 5] = [Eyes::Dots, Eyes::Rings, Eyes::Slits, Eyes::Triangles, Eyes::Crosses];
const HAIR: [Hair; 5] = [Hair::Bob, Hair::Spiky, Hair::Fringe, Hair::SidePart, Hair::Bun];
const ORNAMENTS: [Ornament; 4] = [Ornament::None, Ornament::CheekStripes, Ornament::ForeheadStar, Ornament::ChinDot];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct FaceAttributes {
    pub outline: Outline,
    pub eyes: Eyes,
    pub hair: Hair,
    pub ornament: Ornament,
}

pub const MAX_CLASSES: usize = OUTLINES.len() * EYES.len() * HAIR.len() * ORNAMENTS.len();

/// Distinct attribute tuples for `num_classes` classes.
pub fn class_attributes(num_classes: usize, seed: u64) -> AppResult<Vec<FaceAttributes>> {
    if num_classes == 0 || num_classes > MAX_CLASSES {
        return Err(AppError::Config(format!("synthetic classes must be in 1..={MAX_CLASSES}")));
    }
    let mut all = Vec::with_capacity(MAX_CLASSES);
    for &outline in &OUTLINES {
        for &eyes in &EYES {
            for &hair in &HAIR {
                for &ornament in &ORNAMENTS {
                    all.push(FaceAttributes {
                        outline,
                        eyes,
                        hair,
                        ornament,
                    });
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5c1a, 0, 0));
    all.shuffle(&mut rng);
    all.truncate(num_classes);
    Ok(all)
}

/// Per-image nuisance: pose and palette.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Variation {
    pub angle: f64,
    pub shift: (f64, f64),
    pub scale: f64,
    pub background: [u8; 3],
    pub skin: [u8; 3],
    pub hair: [u8; 3],
    pub accent: [u8; 3],
    pub noise_seed: u64,
}

fn jitter_color<R: Rng + ?Sized>(base: &[[u8; 3]], rng: &mut R) -> [u8; 3] {
    let c = base[rng.gen_range(0..base.len())];
    c.map(|v| (v as i32 + rng.gen_range(-18..=18)).clamp(0, 255) as u8)
}

impl Variation {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        const BACKGROUNDS: [[u8; 3]; 4] = [[200, 220, 240], [235, 225, 200], [210, 235, 210], [230, 210, 230]];
        const SKINS: [[u8; 3]; 4] = [[250, 220, 190], [235, 195, 160], [200, 150, 110], [255, 235, 215]];
        const HAIRS: [[u8; 3]; 5] = [[60, 40, 30], [230, 200, 90], [180, 60, 50], [70, 90, 170], [120, 120, 120]];
        const ACCENTS: [[u8; 3]; 3] = [[200, 40, 60], [40, 120, 200], [60, 160, 60]];
        Self {
            angle: rng.gen_range(-12f64..12.0).to_radians(),
            shift: (rng.gen_range(-0.08..0.08), rng.gen_range(-0.08..0.08)),
            scale: rng.gen_range(0.92..1.08),
            background: jitter_color(&BACKGROUNDS, rng),
            skin: jitter_color(&SKINS, rng),
            hair: jitter_color(&HAIRS, rng),
            accent: jitter_color(&ACCENTS, rng),
            noise_seed: rng.gen(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Layer {
    Background,
    Hair,
    Face,
    Feature,
    Accent,
}

fn tri_wave(x: f64, period: f64) -> f64 {
    let t = (x / period).rem_euclid(1.0);
    1.0 - (2.0 * t - 1.0).abs()
}

fn inside_outline(o: Outline, x: f64, y: f64) -> bool {
    match o {
        Outline::Round => x * x + y * y < 0.55 * 0.55,
        Outline::Oval => (x / 0.44).powi(2) + (y / 0.62).powi(2) < 1.0,
        Outline::Square => (x / 0.5).powi(4) + (y / 0.56).powi(4) < 1.0,
        Outline::Hexagon => {
            let r = 0.6;
            x.abs() <= r * 0.866 && y.abs() + x.abs() / 3f64.sqrt() <= r
        }
        Outline::Pointed => {
            if y < 0.0 {
                x * x + y * y < 0.52 * 0.52
            } else {
                y < 0.68 && x.abs() < 0.52 * (1.0 - (y / 0.68).powi(2)).sqrt()
            }
        }
    }
}

/// Hair behind the face and hair in front of it.
fn hair_regions(h: Hair, x: f64, y: f64) -> (bool, bool) {
    let r2 = x * x + y * y;
    match h {
        Hair::Bob => ((x / 0.7).powi(2) + ((y + 0.05) / 0.66).powi(2) < 1.0 && y < 0.35, y < -0.3 && r2 < 0.62 * 0.62),
        Hair::Spiky => {
            let spikes = x.abs() < 0.62 && y < -0.3 && y > -0.4 - 0.5 * tri_wave(x + 0.12, 0.24);
            (spikes, y < -0.36 && r2 < 0.6 * 0.6)
        }
        Hair::Fringe => (r2 < 0.62 * 0.62 && y < 0.0, y < -0.12 - 0.05 * tri_wave(x, 0.16) && r2 < 0.6 * 0.6),
        Hair::SidePart => (r2 < 0.64 * 0.64 && y < -0.1, y < -0.28 + 0.35 * x && r2 < 0.62 * 0.62 && y < 0.1),
        Hair::Bun => {
            let bun = x * x + (y + 0.72).powi(2) < 0.2 * 0.2;
            (bun || (r2 < 0.6 * 0.6 && y < -0.3), y < -0.4 && r2 < 0.58 * 0.58)
        }
    }
}

#[allow(clippy::approx_constant)]
fn in_eye(e: Eyes, dx: f64, dy: f64) -> bool {
    match e {
        Eyes::Dots => dx * dx + dy * dy < 0.07 * 0.07,
        Eyes::Rings => {
            let r = (dx * dx + dy * dy).sqrt();
            (0.05..0.1).contains(&r)
        }
        Eyes::Slits => (dx / 0.11).powi(2) + (dy / 0.028).powi(2) < 1.0,
        Eyes::Triangles => dy < 0.06 && dy > -0.08 && dx.abs() < (dy + 0.08) * 0.7,
        Eyes::Crosses => {
            let (a, b) = ((dx + dy) * 0.7071, (dx - dy) * 0.7071);
            (a.abs() < 0.1 && b.abs() < 0.025) || (b.abs() < 0.1 && a.abs() < 0.025)
        }
    }
}

fn in_ornament(o: Ornament, x: f64, y: f64) -> bool {
    match o {
        Ornament::None => false,
        Ornament::CheekStripes => {
            let dx = x.abs() - 0.3;
            dx.abs() < 0.08 && [0.16, 0.23].iter().any(|&c| (y - c).abs() < 0.018)
        }
        Ornament::ForeheadStar => {
            let (dx, dy) = (x, y + 0.2);
            let r = (dx * dx + dy * dy).sqrt();
            let a = dy.atan2(dx);
            r < 0.045 + 0.045 * (0.5 + 0.5 * (5.0 * a).cos())
        }
        Ornament::ChinDot => x * x + (y - 0.42).powi(2) < 0.055 * 0.055,
    }
}

fn mouth(x: f64, y: f64) -> bool {
    x.abs() < 0.12 && (y - 0.27 - 0.4 * x * x).abs() < 0.018
}

fn layer_at(a: &FaceAttributes, x: f64, y: f64) -> Layer {
    let (back, front) = hair_regions(a.hair, x, y);
    if !inside_outline(a.outline, x, y) {
        return if back || front { Layer::Hair } else { Layer::Background };
    }
    if front {
        return Layer::Hair;
    }
    if in_ornament(a.ornament, x, y) {
        return Layer::Accent;
    }
    if in_eye(a.eyes, x.abs() - 0.2, y + 0.02) || mouth(x, y) {
        return Layer::Feature;
    }
    Layer::Face
}

const SUPERSAMPLE: usize = 2;
const INK: [u8; 3] = [25, 20, 30];

/// Render one face at `resolution × resolution`.
pub fn render(a: &FaceAttributes, v: &Variation, resolution: usize) -> RgbImage {
    let n = resolution * SUPERSAMPLE;
    let (sin, cos) = v.angle.sin_cos();
    let mut labels = vec![Layer::Background; n * n];
    for py in 0..n {
        for px in 0..n {
            let x = (px as f64 + 0.5) / n as f64 * 2.0 - 1.0 - v.shift.0;
            let y = (py as f64 + 0.5) / n as f64 * 2.0 - 1.0 - v.shift.1;
            let (u, w) = ((cos * x + sin * y) / v.scale, (-sin * x + cos * y) / v.scale);
            labels[py * n + px] = layer_at(a, u, w - 0.08);
        }
    }
    let color = |l: Layer| match l {
        Layer::Background => v.background,
        Layer::Hair => v.hair,
        Layer::Face => v.skin,
        Layer::Feature => INK,
        Layer::Accent => v.accent,
    };
    let edge = |px: usize, py: usize| {
        let l = labels[py * n + px];
        [(1i64, 0i64), (0, 1), (-1, 0), (0, -1)].iter().any(|&(dx, dy)| {
            let (qx, qy) = (px as i64 + dx, py as i64 + dy);
            qx >= 0 && qy >= 0 && (qx as usize) < n && (qy as usize) < n && labels[qy as usize * n + qx as usize] != l
        })
    };
    let mut noise = ChaCha8Rng::seed_from_u64(v.noise_seed);
    let mut img = RgbImage::new(resolution as u32, resolution as u32);
    for oy in 0..resolution {
        for ox in 0..resolution {
            let mut acc = [0u32; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let (px, py) = (ox * SUPERSAMPLE + sx, oy * SUPERSAMPLE + sy);
                    let c = if edge(px, py) { INK } else { color(labels[py * n + px]) };
                    for k in 0..3 {
                        acc[k] += c[k] as u32;
                    }
                }
            }
            let grain: i32 = noise.gen_range(-6..=6);
            let px = acc.map(|s| ((s / (SUPERSAMPLE * SUPERSAMPLE) as u32) as i32 + grain).clamp(0, 255) as u8);
            img.put_pixel(ox as u32, oy as u32, Rgb(px));
        }
    }
    img
}

#[derive(Clone, Debug, Serialize)]
pub struct SyntheticSummary {
    pub root: PathBuf,
    pub attributes: Vec<FaceAttributes>,
    pub files: usize,
}

pub fn class_dir_name(class: usize) -> String {
    format!("class_{class:03}")
}

/// Write `out/class_XXX/img_YYYY.png`, deterministic in `seed`.
pub fn generate_synthetic(
    out: &Path,
    num_classes: usize,
    images_per_class: usize,
    resolution: usize,
    seed: u64,
) -> AppResult<SyntheticSummary> {
    if images_per_class == 0 || resolution < 8 {
        return Err(AppError::Config("need at least one image per class and resolution >= 8".into()));
    }
    let attributes = class_attributes(num_classes, seed)?;
    for (c, a) in attributes.iter().enumerate() {
        let dir = out.join(class_dir_name(c));
        std::fs::create_dir_all(&dir).map_err(AppError::io(&dir))?;
        for i in 0..images_per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x1ace, c as u64, i as u64));
            let img = render(a, &Variation::sample(&mut rng), resolution);
            let path = dir.join(format!("img_{i:04}.png"));
            img.save(&path).map_err(|e| AppError::Data(format!("{}: {e}", path.display())))?;
        }
    }
    Ok(SyntheticSummary {
        root: out.to_path_buf(),
        attributes,
        files: num_classes * images_per_class,
    })
}

/// Per-channel histogram with `bins` bins, normalized to sum 1.
pub fn channel_histograms(img: &RgbImage, bins: usize) -> [Vec<f64>; 3] {
    let mut h = [vec![0.0; bins], vec![0.0; bins], vec![0.0; bins]];
    let total = (img.width() * img.height()) as f64;
    for p in img.pixels() {
        for c in 0..3 {
            h[c][p[c] as usize * bins / 256] += 1.0 / total;
        }
    }
    h
}

pub fn histogram_intersection(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.min(*y)).sum()
}
