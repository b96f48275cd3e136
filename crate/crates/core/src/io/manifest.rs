//! Dataset manifests: one JSON document listing every video's feature tensor.

use std::collections::HashSet;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::pavf::{read_tensor, PavfTensor, MAGIC};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Abnormal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Real,
    Pseudo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Tensor path, relative to the manifest's directory unless absolute.
    pub path: String,
    pub video_id: String,
    pub label: Label,
    pub domain: Domain,
    pub scene_id: String,
    pub frames_per_row: usize,
    pub total_frames: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory that relative entry paths resolve against. Not serialized.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        let p = Path::new(&entry.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn load_features(&self, entry: &ManifestEntry) -> Result<PavfTensor> {
        let t = read_tensor(self.resolve(entry))?;
        if t.shape().len() != 2 {
            return Err(Error::Format(format!(
                "{}: feature tensor must be rank 2, got {:?}",
                entry.video_id,
                t.shape()
            )));
        }
        Ok(t)
    }

    pub fn find(&self, video_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.video_id == video_id)
    }

    /// Training manifests carry no real abnormal footage.
    pub fn validate_training(&self) -> Result<()> {
        for (index, e) in self.entries.iter().enumerate() {
            if e.label == Label::Abnormal && e.domain != Domain::Pseudo {
                return Err(Error::Manifest {
                    index,
                    reason: format!("{}: abnormal training video must be pseudo", e.video_id),
                });
            }
        }
        Ok(())
    }

    /// Checks every invariant, including the tensor files on disk.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (index, e) in self.entries.iter().enumerate() {
            let bad = |reason: String| Error::Manifest { index, reason };
            if e.video_id.is_empty() {
                return Err(bad("empty video_id".into()));
            }
            if !seen.insert(e.video_id.as_str()) {
                return Err(bad(format!("duplicate video_id {:?}", e.video_id)));
            }
            if e.frames_per_row == 0 || e.total_frames == 0 {
                return Err(bad(format!(
                    "{}: frames_per_row and total_frames must be positive",
                    e.video_id
                )));
            }
            let path = self.resolve(e);
            let dims = read_dims(&path).map_err(|err| bad(format!("{}: {err}", e.video_id)))?;
            if dims.len() != 2 {
                return Err(bad(format!("{}: tensor must be rank 2, got {dims:?}", e.video_id)));
            }
            check_frame_cover(dims[0], e.frames_per_row, e.total_frames)
                .map_err(|reason| bad(format!("{}: {reason}", e.video_id)))?;
        }
        Ok(())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json("manifest", e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// `rows × fpr ≥ total > (rows − 1) × fpr`.
pub fn check_frame_cover(rows: usize, frames_per_row: usize, total_frames: usize) -> std::result::Result<(), String> {
    if rows == 0 || rows * frames_per_row < total_frames || (rows - 1) * frames_per_row >= total_frames {
        return Err(format!(
            "frame count inconsistency: {rows} rows × {frames_per_row} frames/row does not cover {total_frames} frames"
        ));
    }
    Ok(())
}

fn read_dims(path: &Path) -> std::result::Result<Vec<usize>, String> {
    let mut f = fs::File::open(path).map_err(|e| format!("missing tensor file {}: {e}", path.display()))?;
    let mut head = [0u8; 12];
    f.read_exact(&mut head)
        .map_err(|_| format!("truncated tensor {}", path.display()))?;
    if &head[..4] != MAGIC {
        return Err(format!("{} is not a PAVF file", path.display()));
    }
    let rank = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
    if !(1..=2).contains(&rank) {
        return Err(format!("bad rank {rank}"));
    }
    let mut dims = vec![0u8; 4 * rank];
    f.read_exact(&mut dims).map_err(|_| "truncated dims".to_string())?;
    Ok(dims
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect())
}

pub fn parse_manifest(text: &str, base_dir: impl Into<PathBuf>) -> Result<DatasetManifest> {
    let mut m: DatasetManifest = serde_json::from_str(text).map_err(|e| Error::json("manifest", e))?;
    m.base_dir = base_dir.into();
    m.validate()?;
    Ok(m)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_manifest(&text, base)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::pavf::write_tensor;

    fn entry(id: &str, path: &str, fpr: usize, total: usize) -> ManifestEntry {
        ManifestEntry {
            path: path.into(),
            video_id: id.into(),
            label: Label::Normal,
            domain: Domain::Real,
            scene_id: "s0".into(),
            frames_per_row: fpr,
            total_frames: total,
        }
    }

    fn write_rows(dir: &Path, name: &str, rows: usize) {
        let t = PavfTensor::matrix(rows, 2, vec![0.5; rows * 2]).unwrap();
        write_tensor(&t, dir.join(name)).unwrap();
    }

    #[test]
    fn empty_manifest_is_valid() {
        let m = parse_manifest(r#"{"entries": []}"#, ".").unwrap();
        assert!(m.entries.is_empty());
    }

    #[test]
    fn frame_cover_boundaries() {
        assert!(check_frame_cover(5, 16, 80).is_ok());
        assert!(check_frame_cover(5, 16, 65).is_ok());
        assert!(check_frame_cover(5, 16, 64).is_err());
        assert!(check_frame_cover(5, 16, 81).is_err());
    }

    #[test]
    fn accepts_consistent_entry() {
        let dir = tempfile::tempdir().unwrap();
        write_rows(dir.path(), "a.pavf", 5);
        let m = DatasetManifest {
            entries: vec![entry("a", "a.pavf", 16, 80)],
            base_dir: dir.path().into(),
        };
        m.validate().unwrap();
    }

    #[test]
    fn duplicate_id_names_the_duplicate() {
        let dir = tempfile::tempdir().unwrap();
        write_rows(dir.path(), "a.pavf", 1);
        let m = DatasetManifest {
            entries: vec![entry("dup", "a.pavf", 4, 4), entry("dup", "a.pavf", 4, 4)],
            base_dir: dir.path().into(),
        };
        match m.validate() {
            Err(Error::Manifest { index, reason }) => {
                assert_eq!(index, 1);
                assert!(reason.contains("dup"));
            }
            other => panic!("expected manifest error, got {other:?}"),
        }
    }

    #[test]
    fn missing_tensor_is_reported_with_index() {
        let m = DatasetManifest {
            entries: vec![entry("x", "nope.pavf", 4, 4)],
            base_dir: "/nonexistent".into(),
        };
        assert!(matches!(m.validate(), Err(Error::Manifest { index: 0, .. })));
    }

    #[test]
    fn training_rejects_real_abnormal() {
        let mut e = entry("x", "x.pavf", 1, 1);
        e.label = Label::Abnormal;
        let m = DatasetManifest {
            entries: vec![e],
            base_dir: ".".into(),
        };
        assert!(m.validate_training().is_err());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = r#"{"entries": [], "extra": 1}"#;
        assert!(matches!(parse_manifest(text, "."), Err(Error::Json { .. })));
    }
}
