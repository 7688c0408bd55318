//! JSON manifest describing a synthetic dataset on disk.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SureError};
use crate::geometry::Homography;
use crate::train::{generate_pair_with, pair_seed, Difficulty, SyntheticPair, TextureConfig};

use super::pgm;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub index: usize,
    pub seed: u64,
    pub difficulty: Difficulty,
    /// Paths relative to the manifest's directory.
    pub image_a: String,
    pub image_b: String,
    /// Row-major homography mapping image A to image B.
    pub h_true: [[f64; 3]; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub base_seed: u64,
    pub size: usize,
    pub difficulty: Difficulty,
    pub texture: TextureConfig,
    pub pairs: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let m: Manifest = serde_path_to_error::deserialize(de).map_err(|e| {
            SureError::Parse(format!("manifest field `{}`: {}", e.path(), e.inner()))
        })?;
        if m.version != MANIFEST_VERSION {
            return Err(SureError::Parse(format!(
                "manifest field `version`: expected {MANIFEST_VERSION}, found {}",
                m.version
            )));
        }
        for (k, e) in m.pairs.iter().enumerate() {
            if e.index != k {
                return Err(SureError::Parse(format!(
                    "manifest field `pairs[{k}].index`: expected {k}, found {}",
                    e.index
                )));
            }
            Homography::from_rows(e.h_true).map_err(|err| {
                SureError::Parse(format!("manifest field `pairs[{k}].h_true`: {err}"))
            })?;
        }
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| SureError::State(format!("manifest serialisation: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SureError::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            SureError::Parse(m) => SureError::Parse(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Generates `count` pairs, writing PGMs and `manifest.json` into `dir`.
    pub fn synthesize(
        dir: &Path,
        base_seed: u64,
        count: usize,
        size: usize,
        difficulty: Difficulty,
    ) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| SureError::io(dir, e))?;
        let texture = TextureConfig::default();
        let mut pairs = Vec::with_capacity(count);
        for index in 0..count {
            let seed = pair_seed(base_seed, index as u64);
            let pair = generate_pair_with(seed, size, difficulty, &texture, None)?;
            let (a, b) = (
                format!("pair_{index:05}_a.pgm"),
                format!("pair_{index:05}_b.pgm"),
            );
            pgm::write(&dir.join(&a), &pair.image_a)?;
            pgm::write(&dir.join(&b), &pair.image_b)?;
            pairs.push(ManifestEntry {
                index,
                seed,
                difficulty,
                image_a: a,
                image_b: b,
                h_true: pair.h_true.rows(),
            });
        }
        let m = Self {
            version: MANIFEST_VERSION,
            base_seed,
            size,
            difficulty,
            texture,
            pairs,
        };
        let path = dir.join("manifest.json");
        std::fs::write(&path, m.to_json()? + "\n").map_err(|e| SureError::io(&path, e))?;
        Ok(m)
    }

    /// Reads the stored images of every entry.
    pub fn load_pairs(&self, dir: &Path) -> Result<Vec<SyntheticPair>> {
        self.pairs
            .iter()
            .map(|e| {
                let a = pgm::read(&dir.join(&e.image_a))?;
                let b = pgm::read(&dir.join(&e.image_b))?;
                if a.shape() != [1, self.size, self.size] {
                    let n = self.size;
                    return Err(SureError::Parse(format!(
                        "{}: expected a {n}x{n} image, got {:?}",
                        e.image_a,
                        a.shape()
                    )));
                }
                SyntheticPair::from_images(
                    e.seed,
                    e.difficulty,
                    a,
                    b,
                    Homography::from_rows(e.h_true)?,
                )
            })
            .collect()
    }

    /// Rebuilds every pair from its seed and stored homography.
    pub fn regenerate(&self) -> Result<Vec<SyntheticPair>> {
        self.pairs
            .iter()
            .map(|e| {
                let h = Homography::from_rows(e.h_true)?;
                generate_pair_with(e.seed, self.size, e.difficulty, &self.texture, Some(h))
            })
            .collect()
    }
}

/// Directory holding the manifest's images.
pub fn base_dir(manifest_path: &Path) -> PathBuf {
    match manifest_path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}
