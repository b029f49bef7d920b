//! Deterministic synthetic scenes: a flat "sky" band over a class-specific
//! texture. The sky band is the redundant region; every pixel in it has the
//! same value.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::Image;
use super::{DataItem, Dataset, ImageSource, Split};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub seed: u64,
    #[serde(default = "default_split")]
    pub split: Split,
}

fn default_split() -> Split {
    Split::Train
}

const PALETTE: [[f64; 3]; 8] = [
    [0.90, 0.20, 0.15],
    [0.15, 0.70, 0.25],
    [0.95, 0.80, 0.10],
    [0.55, 0.20, 0.75],
    [0.95, 0.50, 0.10],
    [0.10, 0.65, 0.70],
    [0.85, 0.30, 0.60],
    [0.45, 0.35, 0.20],
];

const DARK: [f64; 3] = [0.08, 0.08, 0.10];

// Snap to the 8-bit grid so images survive a PPM round trip unchanged.
fn snap(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn pattern(kind: usize, r: f64, c: f64, period: f64, phase: f64, center: (f64, f64), cells: &[f64], side: usize) -> f64 {
    let wave = |t: f64| 0.5 + 0.5 * libm::sin(2.0 * PI * t / period + phase);
    match kind % 8 {
        0 => wave(r),
        1 => wave(c),
        2 => wave(r + c),
        3 => wave(r - c),
        4 => {
            let cell = ((r / (period / 2.0)).floor() + (c / (period / 2.0)).floor()) as i64;
            if cell.rem_euclid(2) == 0 { 1.0 } else { 0.0 }
        }
        5 => {
            let d = libm::sqrt((r - center.0).powi(2) + (c - center.1).powi(2));
            wave(d)
        }
        6 => {
            let s = libm::sin(2.0 * PI * r / period + phase) * libm::sin(2.0 * PI * c / period);
            if s > 0.3 { 1.0 } else { 0.0 }
        }
        _ => {
            let cr = (r as usize / 2).min(side / 2 - 1);
            let cc = (c as usize / 2).min(side / 2 - 1);
            cells[cr * (side / 2) + cc]
        }
    }
}

fn render(class: usize, side: usize, rng: &mut ChaCha8Rng) -> (Image, Vec<bool>) {
    // Sky covers 40–60% of rows, so at least 30% of pixels are background.
    let lo = (side * 2).div_ceil(5);
    let hi = (side * 3 / 5).max(lo);
    let sky_rows = rng.random_range(lo..=hi);
    let sky = [
        snap(0.55 + rng.random_range(-0.1..0.1)),
        snap(0.75 + rng.random_range(-0.1..0.1)),
        snap(0.95 + rng.random_range(-0.05..0.05)),
    ];
    let period = rng.random_range(4.0..7.0);
    let phase = rng.random_range(0.0..2.0 * PI);
    let center = (
        rng.random_range(0.0..side as f64),
        rng.random_range(0.0..side as f64),
    );
    let cells: Vec<f64> = (0..(side / 2).max(1).pow(2))
        .map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 })
        .collect();
    let fg = PALETTE[class % PALETTE.len()];
    let shade = 1.0 - 0.35 * (class / PALETTE.len()) as f64;

    let mut img = Image::filled(side, side, sky).expect("valid size");
    let mut background = vec![false; side * side];
    for row in 0..side {
        for col in 0..side {
            if row < sky_rows {
                background[row * side + col] = true;
                continue;
            }
            let v = pattern(class, row as f64, col as f64, period, phase, center, &cells, side.max(2));
            let mut px = [0.0; 3];
            for ch in 0..3 {
                let noise = rng.random_range(-0.04..0.04);
                px[ch] = snap(DARK[ch] + v * (fg[ch] * shade - DARK[ch]) + noise);
            }
            img.set_pixel(row, col, px);
        }
    }
    (img, background)
}

/// Generates `num_classes · per_class` items with labels cycling through
/// the classes.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.num_classes == 0 || spec.image_size < 2 {
        return Err(Error::Config(format!(
            "synthetic spec needs classes ≥ 1 and image size ≥ 2, got {spec:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.num_classes * spec.per_class;
    let items = (0..n)
        .map(|k| {
            let label = k % spec.num_classes;
            let (img, bg) = render(label, spec.image_size, &mut rng);
            DataItem {
                source: ImageSource::Memory(img),
                label,
                background: Some(bg),
            }
        })
        .collect();
    Ok(Dataset {
        items,
        num_classes: spec.num_classes,
        split: spec.split,
    })
}
