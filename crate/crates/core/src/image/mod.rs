//! Grayscale images, PGM I/O, paired datasets and synthetic data.

mod dataset;
mod pgm;
mod synth;

use std::path::PathBuf;

pub use dataset::{load_manifest, load_pairs, split_dataset, DatasetSplit, ManifestEntry};
pub use pgm::{decode_pgm, encode_pgm, load_pgm, save_pgm};
pub use synth::synth_pairs;

use crate::tensor::Tensor;

/// Smallest side accepted for images that take part in a fusion pair.
pub const MIN_PAIR_SIDE: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed PGM: {0}")]
    Malformed(String),
    #[error("truncated PGM payload: expected {expected} samples, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("PGM maxval must be positive")]
    ZeroMaxval,
    #[error("unsupported maxval {0} for writing (use 255 or 65535)")]
    UnsupportedMaxval(u32),
    #[error("invalid image: {0}")]
    Invalid(String),
    #[error("pair {id}: visible is {vis:?}, infrared is {ir:?}")]
    Unregistered {
        id: String,
        vis: (usize, usize),
        ir: (usize, usize),
    },
    #[error("dataset needs at least 10 pairs to split, got {0}")]
    TooFewForSplit(usize),
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
}

/// Single-band image with samples in `[0, 1]`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::Invalid(format!("empty image {width}x{height}")));
        }
        if pixels.len() != width * height {
            return Err(ImageError::Invalid(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(ImageError::Invalid(format!("pixel {bad} outside [0,1]")));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// Builds an image from arbitrary values, clamping into `[0, 1]`.
    pub fn from_clamped(width: usize, height: usize, values: Vec<f64>) -> Result<Self, ImageError> {
        let pixels = values
            .into_iter()
            .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
            .collect();
        Self::new(width, height, pixels)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self, ImageError> {
        Self::new(width, height, vec![value; width * height])
    }

    /// Interprets a `[1, H, W]` or `[H, W]` tensor as an image, clamping.
    pub fn from_tensor(t: &Tensor) -> Result<Self, ImageError> {
        let (h, w) = match *t.shape() {
            [1, h, w] | [h, w] => (h, w),
            ref s => return Err(ImageError::Invalid(format!("tensor {s:?} is not one plane"))),
        };
        Self::from_clamped(w, h, t.data().to_vec())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// `[1, H, W]` tensor view of the image.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.height, self.width], self.pixels.clone())
            .expect("dimensions are consistent by construction")
    }

    pub fn abs_diff(&self, other: &GrayImage) -> Result<GrayImage, ImageError> {
        if self.dims() != other.dims() {
            return Err(ImageError::Invalid(format!(
                "difference of {:?} and {:?} images",
                self.dims(),
                other.dims()
            )));
        }
        let px = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).abs())
            .collect();
        GrayImage::new(self.width, self.height, px)
    }
}

/// Registered visible/infrared pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub id: String,
    pub visible: GrayImage,
    pub infrared: GrayImage,
}

impl ImagePair {
    pub fn new(id: impl Into<String>, visible: GrayImage, infrared: GrayImage) -> Result<Self, ImageError> {
        let id = id.into();
        if visible.dims() != infrared.dims() {
            return Err(ImageError::Unregistered {
                id,
                vis: visible.dims(),
                ir: infrared.dims(),
            });
        }
        let (w, h) = visible.dims();
        if w < MIN_PAIR_SIDE || h < MIN_PAIR_SIDE {
            return Err(ImageError::Invalid(format!(
                "pair {id}: {w}x{h} is below the {MIN_PAIR_SIDE}x{MIN_PAIR_SIDE} minimum"
            )));
        }
        Ok(Self {
            id,
            visible,
            infrared,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.visible.dims()
    }
}
