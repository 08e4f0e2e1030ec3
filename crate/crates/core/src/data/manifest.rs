use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::bag::{load_bag, save_bag, BagMeta, FeatureBag};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub bag_id: String,
    pub patient_id: String,
    pub label: usize,
    /// Bag file path, relative to the manifest's directory.
    pub path: String,
    /// Instance count N; checked against the file header when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance_count: Option<usize>,
}

impl ManifestEntry {
    pub fn meta(&self) -> BagMeta {
        BagMeta {
            bag_id: self.bag_id.clone(),
            patient_id: self.patient_id.clone(),
            label: self.label,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub class_count: usize,
    pub feature_width: usize,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.class_count == 0 || self.feature_width == 0 {
            return Err(Error::InvalidManifest(
                "class_count and feature_width must be positive".into(),
            ));
        }
        let mut seen = HashSet::new();
        for entry in &self.entries {
            if !seen.insert(entry.bag_id.as_str()) {
                return Err(Error::InvalidManifest(format!(
                    "duplicate bag_id {}",
                    entry.bag_id
                )));
            }
            if entry.label >= self.class_count {
                return Err(Error::InvalidManifest(format!(
                    "bag {} has label {} but class_count is {}",
                    entry.bag_id, entry.label, self.class_count
                )));
            }
        }
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Self = serde_json::from_str(&text)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// A manifest together with every bag it references, in manifest order.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub bags: Vec<FeatureBag>,
}

impl Dataset {
    /// Loads all bags referenced by the manifest at `path`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let manifest = DatasetManifest::read(path)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let bags = manifest
            .entries
            .iter()
            .map(|entry| {
                let bag = load_bag(root.join(&entry.path), entry.meta())?;
                if bag.feature_width() != manifest.feature_width {
                    return Err(Error::WidthMismatch {
                        expected: manifest.feature_width,
                        found: bag.feature_width(),
                    });
                }
                if let Some(expected) = entry.instance_count {
                    if expected != bag.instance_count() {
                        return Err(Error::CountMismatch {
                            bag_id: entry.bag_id.clone(),
                            expected,
                            found: bag.instance_count(),
                        });
                    }
                }
                Ok(bag)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, bags })
    }

    /// Writes `manifest.json` plus one file per bag under `dir/bags/`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        let bag_dir = dir.join("bags");
        fs::create_dir_all(&bag_dir).map_err(|e| Error::io(&bag_dir, e))?;
        for (entry, bag) in self.manifest.entries.iter().zip(&self.bags) {
            save_bag(bag, dir.join(&entry.path))?;
        }
        let manifest_path = dir.join("manifest.json");
        self.manifest.write(&manifest_path)?;
        Ok(manifest_path)
    }

    pub fn bag(&self, bag_id: &str) -> Option<&FeatureBag> {
        self.bags.iter().find(|b| b.bag_id == bag_id)
    }

    /// Bags whose ids are listed, in the order given.
    pub fn select<'a>(&'a self, ids: &[String]) -> Result<Vec<&'a FeatureBag>> {
        ids.iter()
            .map(|id| {
                self.bag(id)
                    .ok_or_else(|| Error::InvalidManifest(format!("unknown bag_id {id}")))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn entry(id: &str, label: usize) -> ManifestEntry {
        ManifestEntry {
            bag_id: id.into(),
            patient_id: format!("p-{id}"),
            label,
            path: format!("bags/{id}.milb"),
            instance_count: Some(2),
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let m = DatasetManifest {
            class_count: 2,
            feature_width: 3,
            entries: vec![entry("a", 0), entry("a", 1)],
        };
        assert!(m.validate().is_err());
    }

    #[test]
    fn label_out_of_range_rejected() {
        let m = DatasetManifest {
            class_count: 2,
            feature_width: 3,
            entries: vec![entry("a", 2)],
        };
        assert!(m.validate().is_err());
    }

    #[test]
    fn width_mismatch_detected_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let bag = FeatureBag::new(entry("a", 0).meta(), Array2::zeros((2, 4))).unwrap();
        let ds = Dataset {
            manifest: DatasetManifest {
                class_count: 2,
                feature_width: 3,
                entries: vec![entry("a", 0)],
            },
            bags: vec![bag],
        };
        let path = ds.save(dir.path()).unwrap();
        assert!(matches!(
            Dataset::load(path),
            Err(Error::WidthMismatch {
                expected: 3,
                found: 4
            })
        ));
    }

    #[test]
    fn declared_count_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let mut e = entry("a", 0);
        e.instance_count = Some(7);
        let bag = FeatureBag::new(e.meta(), Array2::zeros((2, 3))).unwrap();
        let ds = Dataset {
            manifest: DatasetManifest {
                class_count: 2,
                feature_width: 3,
                entries: vec![e],
            },
            bags: vec![bag],
        };
        let path = ds.save(dir.path()).unwrap();
        assert!(matches!(
            Dataset::load(path),
            Err(Error::CountMismatch { .. })
        ));
    }
}
