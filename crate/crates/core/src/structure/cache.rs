use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::hash::{hash_patches, PatchHashes};
use super::slic::{slic_superpixels, PatchSet};
use crate::error::Result;

/// Everything that determines the patches and codes of an image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StructureParams {
    pub patches: usize,
    pub compactness: f64,
    pub iterations: usize,
}

impl Default for StructureParams {
    fn default() -> Self {
        Self {
            patches: 16,
            compactness: 10.0,
            iterations: 10,
        }
    }
}

impl StructureParams {
    pub fn compute(&self, intensity: ArrayView2<f64>) -> Result<(PatchSet, PatchHashes)> {
        let patches = slic_superpixels(intensity, self.patches, self.compactness, self.iterations)?;
        let hashes = hash_patches(intensity, &patches)?;
        Ok((patches, hashes))
    }

    /// Stable 64-bit FNV-1a digest of the parameters and image size.
    fn digest(&self, dim: (usize, usize)) -> u64 {
        let text = format!(
            "{}|{}|{}|{}x{}",
            self.patches,
            self.compactness.to_bits(),
            self.iterations,
            dim.0,
            dim.1
        );
        text.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
            (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
        })
    }
}

#[derive(Serialize, Deserialize)]
struct Entry {
    rows: usize,
    cols: usize,
    count: usize,
    labels: Vec<u32>,
    codes: Vec<u64>,
}

/// Optional on-disk cache of `(PatchSet, PatchHashes)` per image.
#[derive(Debug, Clone)]
pub struct PatchCache {
    dir: Option<PathBuf>,
    params: StructureParams,
}

impl PatchCache {
    pub fn new(dir: Option<&Path>, params: StructureParams) -> Self {
        Self {
            dir: dir.map(Path::to_path_buf),
            params,
        }
    }

    pub fn params(&self) -> &StructureParams {
        &self.params
    }

    fn path(&self, dir: &Path, id: &str, dim: (usize, usize)) -> PathBuf {
        let stem: String = id
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                    c
                } else {
                    '_'
                }
            })
            .collect();
        dir.join(format!("{stem}.{:016x}.json", self.params.digest(dim)))
    }

    pub fn get_or_compute(
        &self,
        id: &str,
        intensity: ArrayView2<f64>,
    ) -> Result<(PatchSet, PatchHashes)> {
        let Some(dir) = &self.dir else {
            return self.params.compute(intensity);
        };
        let path = self.path(dir, id, intensity.dim());
        if let Ok(text) = fs::read_to_string(&path) {
            match serde_json::from_str::<Entry>(&text) {
                Ok(e)
                    if (e.rows, e.cols) == intensity.dim() && e.labels.len() == e.rows * e.cols =>
                {
                    let labels = e.labels.iter().map(|&l| l as usize).collect();
                    let label_map =
                        Array2::from_shape_vec((e.rows, e.cols), labels).expect("length checked");
                    return Ok((
                        PatchSet {
                            label_map,
                            count: e.count,
                        },
                        PatchHashes { codes: e.codes },
                    ));
                }
                _ => log::warn!("ignoring stale patch cache {}", path.display()),
            }
        }
        let (patches, hashes) = self.params.compute(intensity)?;
        fs::create_dir_all(dir)?;
        let (rows, cols) = patches.label_map.dim();
        let entry = Entry {
            rows,
            cols,
            count: patches.count,
            labels: patches.label_map.iter().map(|&l| l as u32).collect(),
            codes: hashes.codes.clone(),
        };
        fs::write(&path, serde_json::to_string(&entry)?)?;
        Ok((patches, hashes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Array2::from_shape_fn((24, 24), |(y, x)| ((y * 5 + x * 3) % 7) as f64 / 7.0);
        let cache = PatchCache::new(
            Some(dir.path()),
            StructureParams {
                patches: 4,
                ..Default::default()
            },
        );
        let first = cache.get_or_compute("a/b.png", img.view()).unwrap();
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
        let second = cache.get_or_compute("a/b.png", img.view()).unwrap();
        assert_eq!(first, second);
        let uncached = PatchCache::new(None, *cache.params())
            .get_or_compute("x", img.view())
            .unwrap();
        assert_eq!(first, uncached);
    }
}
