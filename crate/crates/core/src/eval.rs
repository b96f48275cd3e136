//! Frame-level ROC AUC and score-trace export.

use std::fs;
use std::path::Path;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::checkpoint::write_json;
use crate::error::{Error, Result};
use crate::io::{expand_to_frames, FrameMask};
use crate::model::{score_video, DarmParams};
use crate::train::{Dataset, Video};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreTrace {
    pub video_id: String,
    pub frame_scores: Vec<f64>,
}

/// Rank-statistic AUC with midranks for ties.
pub fn auc_from_labels(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::NonFinite {
            index: i,
            value: scores[i],
        });
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidArgument(
            "AUC needs at least one positive and one negative frame".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share their mean.
        let midrank = (i + j + 2) as f64 / 2.0;
        let tied_pos = order[i..=j].iter().filter(|&&k| labels[k]).count();
        rank_sum += midrank * tied_pos as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

fn pair_traces<'a>(traces: &'a [ScoreTrace], masks: &'a [FrameMask]) -> Result<Vec<(&'a ScoreTrace, &'a FrameMask)>> {
    traces
        .iter()
        .map(|t| {
            let m = masks
                .iter()
                .find(|m| m.video_id == t.video_id)
                .ok_or_else(|| Error::InvalidArgument(format!("no mask for video {}", t.video_id)))?;
            if m.mask.len() != t.frame_scores.len() {
                return Err(Error::InvalidArgument(format!(
                    "video {}: {} scores but mask covers {} frames",
                    t.video_id,
                    t.frame_scores.len(),
                    m.mask.len()
                )));
            }
            Ok((t, m))
        })
        .collect()
}

/// Micro-averaged AUC over the concatenated frames of all videos.
pub fn auc(traces: &[ScoreTrace], masks: &[FrameMask]) -> Result<f64> {
    let pairs = pair_traces(traces, masks)?;
    let scores: Vec<f64> = pairs.iter().flat_map(|(t, _)| t.frame_scores.iter().copied()).collect();
    let labels: Vec<bool> = pairs.iter().flat_map(|(_, m)| m.mask.iter().copied()).collect();
    auc_from_labels(&scores, &labels)
}

/// Mean per-video AUC over videos that contain both classes; `None` if there are none.
pub fn auc_macro(traces: &[ScoreTrace], masks: &[FrameMask]) -> Result<Option<f64>> {
    let pairs = pair_traces(traces, masks)?;
    let per: Vec<f64> = pairs
        .iter()
        .filter(|(_, m)| m.mask.iter().any(|&b| b) && m.mask.iter().any(|&b| !b))
        .map(|(t, m)| auc_from_labels(&t.frame_scores, &m.mask))
        .collect::<Result<_>>()?;
    Ok((!per.is_empty()).then(|| per.iter().sum::<f64>() / per.len() as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub auc_micro: f64,
    pub auc_macro: Option<f64>,
    pub n_frames: usize,
    pub n_videos: usize,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub metrics: Metrics,
    pub traces: Vec<ScoreTrace>,
}

/// Frame-level traces for every video, scored on all rows.
pub fn score_traces(params: &DarmParams, ds: &Dataset) -> Result<Vec<ScoreTrace>> {
    let trace_all = |videos: &[Video]| {
        videos
            .iter()
            .map(|v| {
                let rows = score_video(params, &v.features)?;
                Ok(ScoreTrace {
                    video_id: v.entry.video_id.clone(),
                    frame_scores: expand_to_frames(&rows, v.entry.frames_per_row, v.entry.total_frames)?,
                })
            })
            .collect::<Result<Vec<_>>>()
    };
    let workers = thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(ds.videos.len().max(1));
    if workers == 1 {
        return trace_all(&ds.videos);
    }
    let chunk = ds.videos.len().div_ceil(workers);
    thread::scope(|s| {
        let handles: Vec<_> = ds
            .videos
            .chunks(chunk)
            .map(|videos| s.spawn(move || trace_all(videos)))
            .collect();
        let mut out = Vec::with_capacity(ds.videos.len());
        for h in handles {
            out.extend(h.join().expect("scoring worker panicked")?);
        }
        Ok(out)
    })
}

pub fn evaluate(params: &DarmParams, ds: &Dataset, masks: &[FrameMask]) -> Result<EvalReport> {
    let traces = score_traces(params, ds)?;
    let metrics = Metrics {
        auc_micro: auc(&traces, masks)?,
        auc_macro: auc_macro(&traces, masks)?,
        n_frames: traces.iter().map(|t| t.frame_scores.len()).sum(),
        n_videos: traces.len(),
    };
    Ok(EvalReport { metrics, traces })
}

/// Writes `metrics.json` and `traces/<video_id>.json` under `out`.
pub fn write_report(report: &EvalReport, out: impl AsRef<Path>) -> Result<()> {
    let out = out.as_ref();
    let traces_dir = out.join("traces");
    fs::create_dir_all(&traces_dir).map_err(|e| Error::io(&traces_dir, e))?;
    write_json(out.join("metrics.json"), &report.metrics)?;
    for t in &report.traces {
        write_json(traces_dir.join(format!("{}.json", t.video_id)), t)?;
    }
    Ok(())
}
