use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{load_pgm, ImageError, ImagePair};

/// Seeded train/test/validation partition of pair ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub validation: Vec<String>,
    pub seed: u64,
}

/// Shuffles `ids` with `seed` and cuts them 80/10/10 (floor, floor, remainder).
pub fn split_dataset(ids: &[String], seed: u64) -> Result<DatasetSplit, ImageError> {
    let n = ids.len();
    if n < 10 {
        return Err(ImageError::TooFewForSplit(n));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = n * 8 / 10;
    let n_test = n / 10;
    let validation = shuffled.split_off(n_train + n_test);
    let test = shuffled.split_off(n_train);
    Ok(DatasetSplit {
        train: shuffled,
        test,
        validation,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub visible: PathBuf,
    pub infrared: PathBuf,
}

/// Reads a manifest of `<id> <visible path> <infrared path>` lines.
///
/// Paths are resolved against the manifest's directory; `#` starts a comment.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>, ImageError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ImageError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or(Path::new(""));
    parse_manifest(&text, base)
}

pub(crate) fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>, ImageError> {
    let mut entries: Vec<ManifestEntry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [id, vis, ir] = fields[..] else {
            return Err(ImageError::Manifest {
                line: i + 1,
                message: format!("expected 3 fields, found {}", fields.len()),
            });
        };
        if entries.iter().any(|e| e.id == id) {
            return Err(ImageError::Manifest {
                line: i + 1,
                message: format!("duplicate id '{id}'"),
            });
        }
        entries.push(ManifestEntry {
            id: id.to_string(),
            visible: base.join(vis),
            infrared: base.join(ir),
        });
    }
    Ok(entries)
}

pub fn load_pairs(entries: &[ManifestEntry]) -> Result<Vec<ImagePair>, ImageError> {
    entries
        .iter()
        .map(|e| ImagePair::new(e.id.clone(), load_pgm(&e.visible)?, load_pgm(&e.infrared)?))
        .collect()
}
