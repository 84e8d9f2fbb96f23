//! Fusion quality metrics: SSIM, entropy, mutual information and SCD.

use std::fmt::Write as _;

use crate::image::{GrayImage, ImagePair};

pub const DEFAULT_BINS: usize = 256;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("dimension mismatch: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize), (usize, usize)),
    #[error("image {0:?} smaller than the {1}x{1} SSIM window")]
    TooSmall((usize, usize), usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// SSIM constants. Defaults: 11x11 Gaussian window, sigma 1.5, K1 0.01,
/// K2 0.03, dynamic range 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub window_size: usize,
    pub window_sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window_size: 11,
            window_sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimParams {
    pub fn validate(&self) -> Result<(), MetricError> {
        if self.window_size < 3 || self.window_size % 2 == 0 {
            return Err(MetricError::InvalidParameter(format!(
                "window size {} must be odd and >= 3",
                self.window_size
            )));
        }
        if !(self.k1 > 0.0 && self.k2 > 0.0 && self.dynamic_range > 0.0 && self.window_sigma > 0.0)
        {
            return Err(MetricError::InvalidParameter(
                "k1, k2, sigma and dynamic range must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Default constants, with the window shrunk to the largest odd size
    /// that fits images smaller than 11 pixels on a side.
    pub fn fitting(width: usize, height: usize) -> Self {
        let mut p = Self::default();
        let side = width.min(height);
        if side < p.window_size {
            p.window_size = (if side % 2 == 0 { side - 1 } else { side }).max(3);
        }
        p
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    /// Normalised 1-D Gaussian taps.
    pub fn gaussian_1d(&self) -> Vec<f64> {
        let r = (self.window_size / 2) as f64;
        let taps: Vec<f64> = (0..self.window_size)
            .map(|i| {
                let d = i as f64 - r;
                (-d * d / (2.0 * self.window_sigma * self.window_sigma)).exp()
            })
            .collect();
        let total: f64 = taps.iter().sum();
        taps.into_iter().map(|t| t / total).collect()
    }

    /// Row-major `window_size x window_size` weights (outer product of the taps).
    pub fn gaussian_2d(&self) -> Vec<f64> {
        let g = self.gaussian_1d();
        g.iter()
            .flat_map(|a| g.iter().map(move |b| a * b))
            .collect()
    }
}

fn same_dims(a: &GrayImage, b: &GrayImage) -> Result<(), MetricError> {
    if a.dims() != b.dims() {
        return Err(MetricError::DimensionMismatch(a.dims(), b.dims()));
    }
    Ok(())
}

/// Valid-window Gaussian filtering, separable.
fn filter_valid(src: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ow, oh) = (w - k + 1, h - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps
                .iter()
                .zip(&src[y * w + x..y * w + x + k])
                .map(|(t, v)| t * v)
                .sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * rows[(y + i) * ow + x])
                .sum();
        }
    }
    out
}

/// Mean SSIM over all valid window positions.
pub fn ssim(a: &GrayImage, b: &GrayImage, p: &SsimParams) -> Result<f64, MetricError> {
    same_dims(a, b)?;
    p.validate()?;
    let (w, h) = a.dims();
    if w < p.window_size || h < p.window_size {
        return Err(MetricError::TooSmall(a.dims(), p.window_size));
    }
    let taps = p.gaussian_1d();
    let (x, y) = (a.pixels(), b.pixels());
    let prod = |f: fn(f64, f64) -> f64| -> Vec<f64> {
        x.iter().zip(y).map(|(&u, &v)| f(u, v)).collect()
    };
    let mu_a = filter_valid(x, w, h, &taps);
    let mu_b = filter_valid(y, w, h, &taps);
    let e_aa = filter_valid(&prod(|u, _| u * u), w, h, &taps);
    let e_bb = filter_valid(&prod(|_, v| v * v), w, h, &taps);
    let e_ab = filter_valid(&prod(|u, v| u * v), w, h, &taps);
    let (c1, c2) = (p.c1(), p.c2());
    let total: f64 = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / mu_a.len() as f64)
}

/// Histogram bin of a `[0, 1]` sample: `min(floor(p * bins), bins - 1)`.
pub fn bin_index(p: f64, bins: usize) -> usize {
    ((p * bins as f64).floor().max(0.0) as usize).min(bins - 1)
}

fn shannon(counts: impl Iterator<Item = usize>, total: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / total;
            -p * p.log2()
        })
        .sum()
}

/// Shannon entropy in bits of the 256-bin histogram.
pub fn entropy(img: &GrayImage) -> f64 {
    entropy_with_bins(img, DEFAULT_BINS)
}

pub fn entropy_with_bins(img: &GrayImage, bins: usize) -> f64 {
    let mut hist = vec![0usize; bins.max(1)];
    for &p in img.pixels() {
        hist[bin_index(p, bins.max(1))] += 1;
    }
    shannon(hist.into_iter(), img.pixels().len() as f64)
}

/// Plug-in mutual information in bits from the joint histogram.
pub fn mutual_information(a: &GrayImage, b: &GrayImage, bins: usize) -> Result<f64, MetricError> {
    same_dims(a, b)?;
    if bins < 2 {
        return Err(MetricError::InvalidParameter(format!("bins = {bins}, need >= 2")));
    }
    let mut joint = vec![0usize; bins * bins];
    let mut ha = vec![0usize; bins];
    let mut hb = vec![0usize; bins];
    for (&u, &v) in a.pixels().iter().zip(b.pixels()) {
        let (i, j) = (bin_index(u, bins), bin_index(v, bins));
        joint[i * bins + j] += 1;
        ha[i] += 1;
        hb[j] += 1;
    }
    let n = a.pixels().len() as f64;
    let mut mi = 0.0;
    for i in 0..bins {
        if ha[i] == 0 {
            continue;
        }
        for j in 0..bins {
            let c = joint[i * bins + j];
            if c == 0 {
                continue;
            }
            let pxy = c as f64 / n;
            mi += pxy * (c as f64 * n / (ha[i] as f64 * hb[j] as f64)).log2();
        }
    }
    Ok(mi.max(0.0))
}

/// Pearson correlation; 0 when either population variance is below 1e-15.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "correlation of unequal lengths");
    let n = a.len() as f64;
    if a.is_empty() {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa / n < 1e-15 || sbb / n < 1e-15 {
        return 0.0;
    }
    (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)
}

/// Sum of the correlations of differences on raw planes:
/// `r(F - V, I) + r(F - I, V)`.
pub fn scd_planes(fused: &[f64], vis: &[f64], ir: &[f64]) -> Result<f64, MetricError> {
    if fused.len() != vis.len() || fused.len() != ir.len() {
        return Err(MetricError::InvalidParameter(format!(
            "plane lengths {} / {} / {} differ",
            fused.len(),
            vis.len(),
            ir.len()
        )));
    }
    let diff = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(a, b)| a - b).collect() };
    Ok(correlation(&diff(fused, vis), ir) + correlation(&diff(fused, ir), vis))
}

pub fn scd(fused: &GrayImage, vis: &GrayImage, ir: &GrayImage) -> Result<f64, MetricError> {
    same_dims(fused, vis)?;
    same_dims(fused, ir)?;
    scd_planes(fused.pixels(), vis.pixels(), ir.pixels())
}

/// Metrics of one fused image against its source pair.
///
/// `mi` is `MI(F, V) + MI(F, I)`; `ssim` is the mean of `ssim_vis` and `ssim_ir`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageMetrics {
    pub id: String,
    pub entropy: f64,
    pub scd: f64,
    pub mi: f64,
    pub ssim: f64,
    pub ssim_vis: f64,
    pub ssim_ir: f64,
}

pub fn evaluate_fusion(fused: &GrayImage, pair: &ImagePair, bins: usize) -> Result<ImageMetrics, MetricError> {
    same_dims(fused, &pair.visible)?;
    let (w, h) = fused.dims();
    let p = SsimParams::fitting(w, h);
    let ssim_vis = ssim(fused, &pair.visible, &p)?;
    let ssim_ir = ssim(fused, &pair.infrared, &p)?;
    Ok(ImageMetrics {
        id: pair.id.clone(),
        entropy: entropy_with_bins(fused, bins),
        scd: scd(fused, &pair.visible, &pair.infrared)?,
        mi: mutual_information(fused, &pair.visible, bins)?
            + mutual_information(fused, &pair.infrared, bins)?,
        ssim: 0.5 * (ssim_vis + ssim_ir),
        ssim_vis,
        ssim_ir,
    })
}

/// Per-image rows plus their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<ImageMetrics>,
}

pub const REPORT_HEADER: &str = "id,entropy,scd,mi,ssim,ssim_vis,ssim_ir";

impl MetricReport {
    pub fn new(rows: Vec<ImageMetrics>) -> Self {
        Self { rows }
    }

    /// Mean of every column; `None` for an empty report.
    pub fn aggregate(&self) -> Option<ImageMetrics> {
        if self.rows.is_empty() {
            return None;
        }
        let n = self.rows.len() as f64;
        let mean = |f: fn(&ImageMetrics) -> f64| self.rows.iter().map(f).sum::<f64>() / n;
        Some(ImageMetrics {
            id: "AGGREGATE".into(),
            entropy: mean(|r| r.entropy),
            scd: mean(|r| r.scd),
            mi: mean(|r| r.mi),
            ssim: mean(|r| r.ssim),
            ssim_vis: mean(|r| r.ssim_vis),
            ssim_ir: mean(|r| r.ssim_ir),
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for r in self.rows.iter().chain(self.aggregate().as_ref()) {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.id, r.entropy, r.scd, r.mi, r.ssim, r.ssim_vis, r.ssim_ir
            );
        }
        out
    }
}
