//! Synthetic visible/infrared pairs for desk-scale experiments.
//!
//! Both bands share a layout of random rectangles. The visible band renders
//! it with strong contrast plus per-pixel noise and a fine grating; the
//! infrared band renders it faintly and smoothly and adds bright Gaussian
//! "hot" blobs that have no counterpart in the visible band.

use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{GrayImage, ImageError, ImagePair};

const MIN_SIZE: usize = 16;
/// Side of the hot-region probe square as a fraction of the image side.
const HOT_SQUARE_FRACTION: f64 = 0.2;
const HOT_MARGIN: f64 = 0.3;

pub fn synth_pairs(count: usize, size: usize, seed: u64) -> Result<Vec<ImagePair>, ImageError> {
    if size < MIN_SIZE {
        return Err(ImageError::Invalid(format!(
            "synthetic images need side >= {MIN_SIZE}, got {size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let (vis, ir) = loop {
                let candidate = render(&mut rng, size);
                if has_hot_square(&candidate.0, &candidate.1, candidate.2, size) {
                    break (candidate.0, candidate.1);
                }
            };
            ImagePair::new(
                format!("synth{i:04}"),
                GrayImage::from_clamped(size, size, vis)?,
                GrayImage::from_clamped(size, size, ir)?,
            )
        })
        .collect()
}

/// Returns unclamped visible and infrared planes and the first blob centre.
fn render(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<f64>, (f64, f64)) {
    let nf = n as f64;
    let mut level = vec![0.0; n * n];
    for _ in 0..rng.gen_range(3..=5) {
        let w = rng.gen_range(n / 6..=n / 2);
        let h = rng.gen_range(n / 6..=n / 2);
        let x0 = rng.gen_range(0..=n - w);
        let y0 = rng.gen_range(0..=n - h);
        let value = rng.gen_range(0.2..1.0);
        for y in y0..y0 + h {
            level[y * n + x0..y * n + x0 + w].fill(value);
        }
    }

    let (fx, fy) = (rng.gen_range(0.15..0.35), rng.gen_range(0.15..0.35));
    let phase = rng.gen_range(0.0..2.0 * PI);
    let vis: Vec<f64> = (0..n * n)
        .map(|i| {
            let (x, y) = ((i % n) as f64, (i / n) as f64);
            0.15 + 0.45 * level[i]
                + 0.08 * rng.gen_range(-1.0..1.0)
                + 0.05 * (2.0 * PI * (fx * x + fy * y) + phase).sin()
        })
        .collect();

    let smooth = box_blur(&level, n);
    let mut ir: Vec<f64> = smooth.iter().map(|l| 0.1 + 0.2 * l).collect();
    let mut first = (0.0, 0.0);
    for b in 0..rng.gen_range(1..=3) {
        let sigma = if b == 0 {
            0.18 * nf
        } else {
            rng.gen_range(0.08..0.15) * nf
        };
        let lo = sigma.min(nf / 2.0 - 1.0);
        let cx = rng.gen_range(lo..nf - lo);
        let cy = rng.gen_range(lo..nf - lo);
        if b == 0 {
            first = (cx, cy);
        }
        let amp = rng.gen_range(0.8..0.95);
        for (i, v) in ir.iter_mut().enumerate() {
            let dx = (i % n) as f64 + 0.5 - cx;
            let dy = (i / n) as f64 + 0.5 - cy;
            *v += amp * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
        }
    }
    (vis, ir, first)
}

fn box_blur(src: &[f64], n: usize) -> Vec<f64> {
    (0..n * n)
        .map(|i| {
            let (x, y) = ((i % n) as isize, (i / n) as isize);
            let mut acc = 0.0;
            let mut count = 0.0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (sx, sy) = (x + dx, y + dy);
                    if sx >= 0 && sy >= 0 && (sx as usize) < n && (sy as usize) < n {
                        acc += src[sy as usize * n + sx as usize];
                        count += 1.0;
                    }
                }
            }
            acc / count
        })
        .collect()
}

fn has_hot_square(vis: &[f64], ir: &[f64], centre: (f64, f64), n: usize) -> bool {
    let side = (HOT_SQUARE_FRACTION * n as f64).ceil() as usize;
    let start = |c: f64| ((c - side as f64 / 2.0).round().max(0.0) as usize).min(n - side);
    let (x0, y0) = (start(centre.0), start(centre.1));
    let mut diff = 0.0;
    for y in y0..y0 + side {
        for x in x0..x0 + side {
            let i = y * n + x;
            diff += ir[i].clamp(0.0, 1.0) - vis[i].clamp(0.0, 1.0);
        }
    }
    diff / (side * side) as f64 >= HOT_MARGIN
}
