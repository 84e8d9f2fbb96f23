//! Binary weight file.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic      8 bytes  "FUSEFMR\0"
//! version    u32      1
//! config     u32 num_scales, u32 x num_scales channels, u32 heads,
//!            u32 layers, u32 height, u32 width
//! count      u32      number of entries
//! entry      u16 name length, name (UTF-8), u8 stage (0 encoder,
//!            1 decoder, 2 fusion), u8 rank, u32 x rank dims,
//!            f64 x product(dims) values
//! footer     u32      CRC-32 (IEEE) of every preceding byte
//! ```
//!
//! Entries are written in name order, so equal weights give equal files.

use std::path::Path;

use super::{ModelConfig, ModelError, ModelWeights, Param, Result, Stage};
use crate::io::write_atomic;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"FUSEFMR\0";
pub const FORMAT_VERSION: u32 = 1;

fn u32_of(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| ModelError::Format(format!("{what} {n} does not fit in u32")))
}

pub fn encode_weights(w: &ModelWeights) -> Result<Vec<u8>> {
    w.validate()?;
    let cfg = &w.config;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let mut header = vec![cfg.num_scales];
    header.extend_from_slice(&cfg.channels);
    header.extend_from_slice(&[cfg.heads, cfg.layers, cfg.height, cfg.width]);
    for v in header {
        out.extend_from_slice(&u32_of(v, "config value")?.to_le_bytes());
    }
    out.extend_from_slice(&u32_of(w.params.len(), "entry count")?.to_le_bytes());
    for (name, p) in &w.params {
        let len = u16::try_from(name.len())
            .map_err(|_| ModelError::Format(format!("name '{name}' is too long")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(p.stage.tag());
        out.push(p.value.rank() as u8);
        for &d in p.value.shape() {
            out.extend_from_slice(&u32_of(d, "dimension")?.to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            ModelError::Format(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<ModelWeights> {
    if bytes.len() < MAGIC.len() + 8 {
        return Err(ModelError::Format("file too short".into()));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(ModelError::Format("bad magic".into()));
    }
    let (body, footer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(footer.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(ModelError::Checksum { stored, computed });
    }
    let mut r = Reader {
        bytes: body,
        pos: MAGIC.len(),
    };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(ModelError::Format(format!("unsupported version {version}")));
    }
    let num_scales = r.usize()?;
    if num_scales > 16 {
        return Err(ModelError::Format(format!("implausible scale count {num_scales}")));
    }
    let channels = (0..num_scales).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
    let config = ModelConfig {
        num_scales,
        channels,
        heads: r.usize()?,
        layers: r.usize()?,
        height: r.usize()?,
        width: r.usize()?,
    };
    let count = r.usize()?;
    let mut params = std::collections::BTreeMap::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| ModelError::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let stage = Stage::from_tag(r.u8()?)
            .ok_or_else(|| ModelError::Format(format!("bad stage tag for '{name}'")))?;
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let raw = r.take(numel.and_then(|n| n.checked_mul(8)).unwrap_or(usize::MAX))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let value = Tensor::new(&shape, data)?;
        if params.insert(name.clone(), Param { value, stage }).is_some() {
            return Err(ModelError::Format(format!("duplicate parameter '{name}'")));
        }
    }
    if r.pos != body.len() {
        return Err(ModelError::Format(format!(
            "{} trailing bytes",
            body.len() - r.pos
        )));
    }
    let w = ModelWeights { config, params };
    w.validate()?;
    Ok(w)
}

pub fn save_weights(w: &ModelWeights, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_weights(w)?;
    let path = path.as_ref();
    write_atomic(path, &bytes).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ModelWeights> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_weights(&bytes)
}
