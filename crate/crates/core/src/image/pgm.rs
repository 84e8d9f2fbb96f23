//! Netpbm graymap (PGM) reader and writer.
//!
//! Reads ASCII (`P2`) and binary (`P5`) files with any maxval up to 65535.
//! Writes binary `P5` only, laid out as
//! `P5\n<width> <height>\n<maxval>\n<raster>` with big-endian 16-bit samples
//! when maxval exceeds 255.

use std::path::Path;

use super::{GrayImage, ImageError};
use crate::io::write_atomic;

pub fn load_pgm(path: impl AsRef<Path>) -> Result<GrayImage, ImageError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| ImageError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_pgm(&bytes)
}

pub fn save_pgm(img: &GrayImage, path: impl AsRef<Path>, maxval: u32) -> Result<(), ImageError> {
    let bytes = encode_pgm(img, maxval)?;
    let path = path.as_ref();
    write_atomic(path, &bytes).map_err(|source| ImageError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn encode_pgm(img: &GrayImage, maxval: u32) -> Result<Vec<u8>, ImageError> {
    if maxval != 255 && maxval != 65535 {
        return Err(ImageError::UnsupportedMaxval(maxval));
    }
    let header = format!("P5\n{} {}\n{}\n", img.width(), img.height(), maxval);
    let wide = maxval > 255;
    let mut out = Vec::with_capacity(header.len() + img.pixels().len() * if wide { 2 } else { 1 });
    out.extend_from_slice(header.as_bytes());
    for &p in img.pixels() {
        let q = (p * maxval as f64).round() as u32;
        if wide {
            out.extend_from_slice(&(q as u16).to_be_bytes());
        } else {
            out.push(q as u8);
        }
    }
    Ok(out)
}

struct Header {
    binary: bool,
    width: usize,
    height: usize,
    maxval: u32,
    /// Offset of the first raster byte.
    raster: usize,
}

/// Whitespace- and comment-aware token reader over the header bytes.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Option<&'a [u8]> {
        self.skip_space();
        let start = self.pos;
        while self
            .bytes
            .get(self.pos)
            .is_some_and(|b| !b.is_ascii_whitespace() && *b != b'#')
        {
            self.pos += 1;
        }
        (self.pos > start).then(|| &self.bytes[start..self.pos])
    }

    fn number(&mut self, what: &str) -> Result<u64, ImageError> {
        let tok = self
            .token()
            .ok_or_else(|| ImageError::Malformed(format!("missing {what}")))?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse::<u64>().ok())
            .ok_or_else(|| {
                ImageError::Malformed(format!("{what}: '{}'", String::from_utf8_lossy(tok)))
            })
    }
}

fn parse_header(bytes: &[u8]) -> Result<Header, ImageError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let binary = match cur.token() {
        Some(b"P2") => false,
        Some(b"P5") => true,
        Some(other) => {
            return Err(ImageError::Malformed(format!(
                "unknown magic '{}'",
                String::from_utf8_lossy(other)
            )))
        }
        None => return Err(ImageError::Malformed("empty file".into())),
    };
    let width = cur.number("width")? as usize;
    let height = cur.number("height")? as usize;
    let maxval = cur.number("maxval")?;
    if maxval == 0 {
        return Err(ImageError::ZeroMaxval);
    }
    if maxval > 65535 {
        return Err(ImageError::Malformed(format!("maxval {maxval} exceeds 65535")));
    }
    if width == 0 || height == 0 {
        return Err(ImageError::Malformed(format!("empty raster {width}x{height}")));
    }
    // exactly one whitespace byte separates the header from a binary raster
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        Some(_) => return Err(ImageError::Malformed("no whitespace after maxval".into())),
        None if binary => {
            return Err(ImageError::Truncated {
                expected: width * height,
                found: 0,
            })
        }
        None => {}
    }
    Ok(Header {
        binary,
        width,
        height,
        maxval: maxval as u32,
        raster: cur.pos,
    })
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage, ImageError> {
    let h = parse_header(bytes)?;
    let count = h.width * h.height;
    let raster = &bytes[h.raster..];
    let samples: Vec<u32> = if h.binary {
        let size = if h.maxval > 255 { 2 } else { 1 };
        if raster.len() < count * size {
            return Err(ImageError::Truncated {
                expected: count,
                found: raster.len() / size,
            });
        }
        if size == 2 {
            raster[..count * 2]
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]) as u32)
                .collect()
        } else {
            raster[..count].iter().map(|&b| b as u32).collect()
        }
    } else {
        let mut cur = Cursor {
            bytes: raster,
            pos: 0,
        };
        let mut values = Vec::with_capacity(count);
        while values.len() < count {
            let tok = cur.token().ok_or(ImageError::Truncated {
                expected: count,
                found: values.len(),
            })?;
            let text = std::str::from_utf8(tok).unwrap_or("");
            let v = text
                .parse::<u32>()
                .map_err(|_| ImageError::Malformed(format!("bad sample '{text}'")))?;
            values.push(v);
        }
        values
    };
    if let Some(bad) = samples.iter().find(|&&s| s > h.maxval) {
        return Err(ImageError::Malformed(format!(
            "sample {bad} exceeds maxval {}",
            h.maxval
        )));
    }
    let scale = h.maxval as f64;
    GrayImage::new(
        h.width,
        h.height,
        samples.into_iter().map(|s| s as f64 / scale).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ascii_header_arithmetic() {
        let img = decode_pgm(b"P2\n2 2\n255\n0 255\n128 64\n").unwrap();
        assert_eq!(img.dims(), (2, 2));
        assert_eq!(img.pixels(), &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
    }

    #[test]
    fn comments_are_skipped() {
        let bytes = b"P2\n# created by hand\n2 # width\n# height next\n1\n# depth\n15\n# raster\n0 15\n";
        let img = decode_pgm(bytes).unwrap();
        assert_eq!(img.pixels(), &[0.0, 1.0]);

        let mut bin = b"P5 # binary\n2 1\n#c\n255\n".to_vec();
        bin.extend_from_slice(&[255, 0]);
        assert_eq!(decode_pgm(&bin).unwrap().pixels(), &[1.0, 0.0]);
    }

    #[test]
    fn binary_roundtrip_8bit() {
        let px: Vec<f64> = (0..12).map(|i| (i * 20) as f64 / 255.0).collect();
        let img = GrayImage::new(4, 3, px).unwrap();
        let back = decode_pgm(&encode_pgm(&img, 255).unwrap()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn sixteen_bit_is_big_endian() {
        let img = GrayImage::new(2, 1, vec![1.0, 256.0 / 65535.0]).unwrap();
        let bytes = encode_pgm(&img, 65535).unwrap();
        assert_eq!(&bytes[..13], b"P5\n2 1\n65535\n");
        assert_eq!(&bytes[13..], &[0xff, 0xff, 0x01, 0x00]);
        assert_eq!(decode_pgm(&bytes).unwrap(), img);
    }

    #[test]
    fn zero_image_payload() {
        let img = GrayImage::filled(3, 2, 0.0).unwrap();
        let bytes = encode_pgm(&img, 255).unwrap();
        assert_eq!(&bytes[bytes.len() - 6..], &[0u8; 6]);
    }

    #[test]
    fn quantization_bound() {
        let px: Vec<f64> = (0..64).map(|i| ((i * 37) % 64) as f64 / 63.0).collect();
        let img = GrayImage::new(8, 8, px).unwrap();
        for maxval in [255u32, 65535] {
            let back = decode_pgm(&encode_pgm(&img, maxval).unwrap()).unwrap();
            for (a, b) in img.pixels().iter().zip(back.pixels()) {
                assert!((a - b).abs() <= 0.5 / maxval as f64 + 1e-15);
            }
        }
    }

    #[test]
    fn error_paths() {
        assert!(matches!(decode_pgm(b"P5\n2 2\n0\n"), Err(ImageError::ZeroMaxval)));
        assert!(matches!(
            decode_pgm(b"P5\n2 2\n255\n\x01\x02"),
            Err(ImageError::Truncated { expected: 4, found: 2 })
        ));
        assert!(matches!(decode_pgm(b"P2\n2 2\n255\n1 2 3"), Err(ImageError::Truncated { .. })));
        assert!(matches!(decode_pgm(b"P6\n1 1\n255\n\0"), Err(ImageError::Malformed(_))));
        assert!(matches!(decode_pgm(b"P2\nx 2\n255\n"), Err(ImageError::Malformed(_))));
        assert!(matches!(decode_pgm(b"P2\n1 1\n10\n11\n"), Err(ImageError::Malformed(_))));
        let img = GrayImage::filled(2, 2, 0.5).unwrap();
        assert!(matches!(encode_pgm(&img, 1023), Err(ImageError::UnsupportedMaxval(1023))));
    }
}
