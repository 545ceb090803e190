use std::f64::consts::PI;

use crate::error::{arg_err, Result};
use crate::linalg::{Matrix, RngState};
use crate::split::{coverage_error, validate_mask, CombinationMask};

use super::LabeledDataset;

/// Number of distinct binary class patterns.
pub const NUM_PATTERNS: usize = 8;
/// Largest domain count; hues closer than 60 degrees get hard to tell apart.
pub const MAX_PIXEL_DOMAINS: usize = 6;

const CHANNELS: usize = 3;

/// Foreground test for pattern `k` at pixel `(i, j)`. With an even side every
/// pattern covers exactly half the image.
fn pattern_on(k: usize, i: usize, j: usize, side: usize) -> bool {
    match k {
        0 => i.is_multiple_of(2),
        1 => j.is_multiple_of(2),
        2 => (i + j).is_multiple_of(2),
        3 => (i / 2).is_multiple_of(2),
        4 => (j / 2).is_multiple_of(2),
        5 => (i / 2 + j / 2).is_multiple_of(2),
        6 => ((i + j) / 2).is_multiple_of(2),
        7 => ((i + side - 1 - j) / 2).is_multiple_of(2),
        _ => unreachable!("pattern index checked by caller"),
    }
}

/// RGB color of domain `e` out of `num_domains`: a hue rotation of radius
/// 0.4 around mid-gray, so every color has channel sum 1.5.
pub fn pixel_palette(num_domains: usize) -> Vec<[f64; CHANNELS]> {
    (0..num_domains)
        .map(|e| {
            let theta = 2.0 * PI * e as f64 / num_domains as f64;
            std::array::from_fn(|c| 0.5 + 0.4 * (theta + 2.0 * PI * c as f64 / 3.0).cos())
        })
        .collect()
}

/// Colored-pattern images: class = binary pattern, domain = hue. Each sample
/// is `3 x side x side`, channel-major, with foreground pixels set to the
/// domain color, background 0, plus Gaussian pixel noise of std `noise`.
///
/// Samples are drawn for ID cells only, in row-major `(domain, class)` order.
pub fn gen_pixel_toy(
    num_classes: usize,
    num_domains: usize,
    img_side: usize,
    n_per_cell: usize,
    mask: &CombinationMask,
    noise: f64,
    rng: &mut RngState,
) -> Result<LabeledDataset> {
    if num_classes == 0 || num_classes > NUM_PATTERNS {
        return arg_err(format!("K must be in 1..={NUM_PATTERNS}, got {num_classes}"));
    }
    if num_domains == 0 || num_domains > MAX_PIXEL_DOMAINS {
        return arg_err(format!("E must be in 1..={MAX_PIXEL_DOMAINS}, got {num_domains}"));
    }
    if img_side < 4 {
        return arg_err(format!("img_side must be at least 4, got {img_side}"));
    }
    if n_per_cell == 0 {
        return arg_err("n_per_cell must be at least 1");
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return arg_err(format!("pixel noise must be finite and >= 0, got {noise}"));
    }
    if mask.num_domains() != num_domains || mask.num_classes() != num_classes {
        return arg_err(format!(
            "mask is {}x{} but E={num_domains} K={num_classes}",
            mask.num_domains(),
            mask.num_classes()
        ));
    }
    validate_mask(mask, false).map_err(|v| coverage_error(&v))?;

    let area = img_side * img_side;
    let p = CHANNELS * area;
    let palette = pixel_palette(num_domains);
    let patterns: Vec<Vec<bool>> = (0..num_classes)
        .map(|k| {
            (0..area)
                .map(|px| pattern_on(k, px / img_side, px % img_side, img_side))
                .collect()
        })
        .collect();

    let id_cells: Vec<(usize, usize)> = mask.cells().filter(|&(e, k)| mask.is_id(e, k)).collect();
    let n = id_cells.len() * n_per_cell;
    let mut data = Vec::with_capacity(n * p);
    let mut ys = Vec::with_capacity(n);
    let mut es = Vec::with_capacity(n);
    for &(e, k) in &id_cells {
        for _ in 0..n_per_cell {
            for color in palette[e] {
                for &on in &patterns[k] {
                    let clean = if on { color } else { 0.0 };
                    let jitter = if noise > 0.0 { noise * rng.normal() } else { 0.0 };
                    data.push(clean + jitter);
                }
            }
            ys.push(k);
            es.push(e);
        }
    }
    LabeledDataset::new(Matrix::from_vec(n, p, data)?, ys, es, num_classes, num_domains)
}
