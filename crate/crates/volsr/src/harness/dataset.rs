//! Subject manifests and on-disk dataset handling.
//!
//! A manifest is a JSON file listing subjects by id, volume path, and split.
//! Paths are stored relative to the manifest file and absolutized on load.
//! Splits must be disjoint by subject; the loader refuses anything else.

use crate::degrade::{degrade, DegradeSpec};
use crate::error::{Error, Result};
use crate::phantom::generate_phantom;
use crate::tensor::Dtype;
use crate::volume::Volume;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::{Path, PathBuf};

pub const MANIFEST_FORMAT: &str = "volsr-manifest 1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Evaluation,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [
        Split::Train,
        Split::Validation,
        Split::Evaluation,
        Split::Test,
    ];
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: String,
    pub path: String,
    pub split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub provenance: String,
    pub subjects: Vec<SubjectEntry>,
}

impl DatasetManifest {
    pub fn new(provenance: impl Into<String>, subjects: Vec<SubjectEntry>) -> Result<Self> {
        let m = DatasetManifest {
            format: MANIFEST_FORMAT.to_string(),
            provenance: provenance.into(),
            subjects,
        };
        m.check_disjoint()?;
        Ok(m)
    }

    /// Reads a manifest, validates split hygiene, and rewrites relative
    /// subject paths against the manifest's own directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io_msg(format!("read manifest {}: {}", path.display(), e)))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("manifest {}: {}", path.display(), e)))?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::Format(format!(
                "manifest format {:?}, expected {:?}",
                m.format, MANIFEST_FORMAT
            )));
        }
        m.check_disjoint()?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        for s in &mut m.subjects {
            let p = Path::new(&s.path);
            if p.is_relative() {
                s.path = base.join(p).to_string_lossy().into_owned();
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("serialize manifest: {}", e)))?;
        std::fs::write(path.as_ref(), text)
            .map_err(|e| Error::io_msg(format!("write manifest {}: {}", path.as_ref().display(), e)))
    }

    fn check_disjoint(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for s in &self.subjects {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Contract(format!(
                    "subject {:?} appears more than once; splits must be disjoint by subject",
                    s.id
                )));
            }
        }
        Ok(())
    }

    pub fn subjects_in(&self, split: Split) -> Vec<&SubjectEntry> {
        self.subjects.iter().filter(|s| s.split == split).collect()
    }
}

/// A subject's volumes held in memory: the normalized reference and its
/// simulated low-resolution counterpart.
#[derive(Debug, Clone)]
pub struct SubjectData {
    pub id: String,
    pub hr: Volume,
    pub lr: Volume,
}

/// Loads every subject of a split, z-scores the reference volume, and
/// derives the low-resolution input with the default axis-role factors.
pub fn load_split(manifest: &DatasetManifest, split: Split) -> Result<Vec<SubjectData>> {
    let mut out = Vec::new();
    for entry in manifest.subjects_in(split) {
        let mut hr = Volume::read(&entry.path)?;
        hr.zscore();
        let lr = degrade(&hr, &DegradeSpec::for_volume(&hr))?;
        out.push(SubjectData {
            id: entry.id.clone(),
            hr,
            lr,
        });
    }
    Ok(out)
}

/// Writes `counts` phantoms per split (train, validation, evaluation, test)
/// under `out_dir` plus a `manifest.json`, and returns the manifest path.
/// Subject volumes are deterministic functions of `seed` and their index.
pub fn generate_phantom_dataset(
    out_dir: impl AsRef<Path>,
    shape: [usize; 3],
    seed: u64,
    counts: [usize; 4],
) -> Result<PathBuf> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::io_msg(format!("create {}: {}", out_dir.display(), e)))?;
    let mut subjects = Vec::new();
    let mut index = 0u64;
    for (split, &count) in Split::ALL.iter().zip(&counts) {
        for _ in 0..count {
            let id = format!("s{:04}", index);
            let file = format!("{}.vol", id);
            let vol = generate_phantom(shape, seed.wrapping_add(index))?;
            vol.write(out_dir.join(&file), Dtype::F64)?;
            subjects.push(SubjectEntry {
                id,
                path: file,
                split: *split,
            });
            index += 1;
        }
    }
    let manifest = DatasetManifest::new(
        format!(
            "synthetic phantoms, shape {}x{}x{}, seed {}",
            shape[0], shape[1], shape[2], seed
        ),
        subjects,
    )?;
    let path = out_dir.join("manifest.json");
    manifest.save(&path)?;
    Ok(path)
}

/// Split sizes for a total count when none are given explicitly: roughly
/// 70/10/10/10 with the remainder going to train.
pub fn default_split_counts(total: usize) -> [usize; 4] {
    let tenth = total / 10;
    let val = tenth.max(1).min(total);
    let eval = tenth.max(1).min(total.saturating_sub(val));
    let test = tenth.min(total.saturating_sub(val + eval));
    let train = total - val - eval - test;
    [train, val, eval, test]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp_dir(tag: &str) -> PathBuf {
        let d = std::env::temp_dir().join(format!("volsr-dataset-{}-{}", tag, std::process::id()));
        let _ = std::fs::remove_dir_all(&d);
        std::fs::create_dir_all(&d).unwrap();
        d
    }

    #[test]
    fn manifest_round_trip_resolves_relative_paths() {
        let dir = tmp_dir("roundtrip");
        let m = DatasetManifest::new(
            "test set",
            vec![SubjectEntry {
                id: "s0".into(),
                path: "s0.vol".into(),
                split: Split::Train,
            }],
        )
        .unwrap();
        let path = dir.join("manifest.json");
        m.save(&path).unwrap();
        let loaded = DatasetManifest::load(&path).unwrap();
        assert_eq!(loaded.subjects.len(), 1);
        assert!(Path::new(&loaded.subjects[0].path).is_absolute() || loaded.subjects[0].path.contains("volsr-dataset"));
        assert_eq!(loaded.subjects_in(Split::Train).len(), 1);
        assert_eq!(loaded.subjects_in(Split::Test).len(), 0);
    }

    #[test]
    fn duplicate_subject_across_splits_is_rejected() {
        let err = DatasetManifest::new(
            "bad",
            vec![
                SubjectEntry {
                    id: "s0".into(),
                    path: "a.vol".into(),
                    split: Split::Train,
                },
                SubjectEntry {
                    id: "s0".into(),
                    path: "b.vol".into(),
                    split: Split::Test,
                },
            ],
        )
        .unwrap_err();
        assert!(err.to_string().contains("disjoint"));
    }

    #[test]
    fn phantom_dataset_is_byte_identical_under_fixed_seed() {
        let d1 = tmp_dir("seed-a");
        let d2 = tmp_dir("seed-b");
        generate_phantom_dataset(&d1, [48, 48, 48], 7, [1, 1, 0, 0]).unwrap();
        generate_phantom_dataset(&d2, [48, 48, 48], 7, [1, 1, 0, 0]).unwrap();
        for f in ["s0000.vol", "s0001.vol", "manifest.json"] {
            let a = std::fs::read(d1.join(f)).unwrap();
            let b = std::fs::read(d2.join(f)).unwrap();
            assert_eq!(a, b, "{} differs between identical-seed runs", f);
        }
        let _ = std::fs::remove_dir_all(&d1);
        let _ = std::fs::remove_dir_all(&d2);
    }

    #[test]
    fn generated_manifest_loads_and_split_loader_degrades() {
        let dir = tmp_dir("load");
        let path = generate_phantom_dataset(&dir, [48, 48, 48], 3, [1, 1, 0, 0]).unwrap();
        let manifest = DatasetManifest::load(&path).unwrap();
        let subjects = load_split(&manifest, Split::Train).unwrap();
        assert_eq!(subjects.len(), 1);
        assert_eq!(subjects[0].hr.shape(), [48, 48, 48]);
        assert_eq!(subjects[0].lr.shape(), [48, 48, 48]);
        assert!(subjects[0].hr.mean().abs() <= 1e-9);
        let hr_e = subjects[0].hr.energy();
        let lr_e = subjects[0].lr.energy();
        assert!(lr_e < hr_e, "degradation should remove energy");
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn default_split_counts_cover_total() {
        for total in [4usize, 10, 44, 100] {
            let c = default_split_counts(total);
            assert_eq!(c.iter().sum::<usize>(), total, "{:?}", c);
            assert!(c[0] >= 1);
        }
    }
}
