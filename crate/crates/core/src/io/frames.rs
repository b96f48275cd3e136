//! Frame-level ground truth and segment-to-frame score expansion.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::manifest::DatasetManifest;

/// Ground truth as written on disk: half-open abnormal intervals `[start, end)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSpec {
    pub video_id: String,
    pub intervals: Vec<[usize; 2]>,
}

/// A compiled per-frame mask (`true` = abnormal frame).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameMask {
    pub video_id: String,
    pub mask: Vec<bool>,
}

impl MaskSpec {
    pub fn compile(&self, total_frames: usize) -> Result<FrameMask> {
        let mut mask = vec![false; total_frames];
        for &[start, end] in &self.intervals {
            if start >= end || end > total_frames {
                return Err(Error::InvalidArgument(format!(
                    "{}: interval [{start}, {end}) outside 0..{total_frames}",
                    self.video_id
                )));
            }
            mask[start..end].iter_mut().for_each(|m| *m = true);
        }
        Ok(FrameMask {
            video_id: self.video_id.clone(),
            mask,
        })
    }
}

impl FrameMask {
    /// Inverse of [`MaskSpec::compile`]: maximal runs of abnormal frames.
    pub fn to_spec(&self) -> MaskSpec {
        let mut intervals = Vec::new();
        let mut start = None;
        for (i, &m) in self.mask.iter().chain(std::iter::once(&false)).enumerate() {
            match (m, start) {
                (true, None) => start = Some(i),
                (false, Some(s)) => {
                    intervals.push([s, i]);
                    start = None;
                }
                _ => {}
            }
        }
        MaskSpec {
            video_id: self.video_id.clone(),
            intervals,
        }
    }
}

pub fn write_masks(specs: &[MaskSpec], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(specs).map_err(|e| Error::json("masks", e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a JSON array of mask specs and compiles each against the manifest's
/// frame counts. Videos without a spec get an all-normal mask.
pub fn read_masks(path: impl AsRef<Path>, manifest: &DatasetManifest) -> Result<Vec<FrameMask>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let specs: Vec<MaskSpec> = serde_json::from_str(&text).map_err(|e| Error::json("masks", e))?;
    compile_masks(&specs, manifest)
}

pub fn compile_masks(specs: &[MaskSpec], manifest: &DatasetManifest) -> Result<Vec<FrameMask>> {
    let mut by_id: HashMap<&str, &MaskSpec> = HashMap::new();
    for s in specs {
        if manifest.find(&s.video_id).is_none() {
            return Err(Error::InvalidArgument(format!(
                "mask for unknown video {:?}",
                s.video_id
            )));
        }
        if by_id.insert(&s.video_id, s).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate mask for {:?}", s.video_id)));
        }
    }
    manifest
        .entries
        .iter()
        .map(|e| match by_id.get(e.video_id.as_str()) {
            Some(s) => s.compile(e.total_frames),
            None => Ok(FrameMask {
                video_id: e.video_id.clone(),
                mask: vec![false; e.total_frames],
            }),
        })
        .collect()
}

/// Frame `f` receives `row_scores[f / frames_per_row]`.
pub fn expand_to_frames(row_scores: &[f64], frames_per_row: usize, total_frames: usize) -> Result<Vec<f64>> {
    if frames_per_row == 0 && total_frames > 0 {
        return Err(Error::InvalidArgument("frames_per_row must be positive".into()));
    }
    if row_scores.len() * frames_per_row < total_frames {
        return Err(Error::InvalidArgument(format!(
            "{} rows × {frames_per_row} frames/row cannot cover {total_frames} frames",
            row_scores.len()
        )));
    }
    Ok((0..total_frames).map(|f| row_scores[f / frames_per_row]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn expand_examples() {
        assert_eq!(expand_to_frames(&[0.2], 4, 4).unwrap(), vec![0.2; 4]);
        assert_eq!(expand_to_frames(&[0.1, 0.9], 2, 3).unwrap(), vec![0.1, 0.1, 0.9]);
        assert!(expand_to_frames(&[], 1, 0).unwrap().is_empty());
        assert!(expand_to_frames(&[0.1], 2, 3).is_err());
    }

    #[test]
    fn compile_intervals() {
        let s = MaskSpec {
            video_id: "v".into(),
            intervals: vec![[1, 3], [5, 6]],
        };
        let m = s.compile(7).unwrap();
        assert_eq!(m.mask, vec![false, true, true, false, false, true, false]);
        assert_eq!(m.to_spec(), s);
        assert!(MaskSpec {
            video_id: "v".into(),
            intervals: vec![[3, 3]]
        }
        .compile(7)
        .is_err());
        assert!(MaskSpec {
            video_id: "v".into(),
            intervals: vec![[5, 8]]
        }
        .compile(7)
        .is_err());
    }

    proptest! {
        #[test]
        fn same_row_frames_share_scores(
            scores in prop::collection::vec(0.0f64..1.0, 1..12),
            fpr in 1usize..6,
            cut in 0usize..6,
        ) {
            let total = (scores.len() * fpr).saturating_sub(cut.min(fpr - 1));
            let frames = expand_to_frames(&scores, fpr, total).unwrap();
            prop_assert_eq!(frames.len(), total);
            for i in 0..total {
                for j in 0..total {
                    if i / fpr == j / fpr {
                        prop_assert_eq!(frames[i], frames[j]);
                    }
                }
            }
        }
    }
}
