//! Browser demo over the simulator: row-norm histograms, abnormal slot
//! usage and a short training run with its ROC curve.

use pavad_core::config::{ProfileName, RunProfile};
use pavad_core::eval::{evaluate, ScoreTrace};
use pavad_core::io::{Domain, FrameMask};
use pavad_core::losses::{stack_rows, usage_entropy, UsageStats};
use pavad_core::model::{embed_video, DarmParams};
use pavad_core::sim::{generate, mean_row_norm, SimData, Variant};
use pavad_core::train::{train, Stream};
use pavad_core::Result;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

/// Simulated data plus the most recently trained (or initial) parameters.
pub struct Session {
    profile: RunProfile,
    data: SimData,
    params: DarmParams,
}

impl Session {
    pub fn new(pseudo_norm_scale: f64, seed: u64) -> Result<Self> {
        let mut profile = RunProfile::named(ProfileName::Sim);
        profile.sim.pseudo_norm_scale = pseudo_norm_scale;
        profile.sim.seed = seed;
        profile.train.seed = seed;
        profile.sim.validate()?;
        let data = generate(&profile.sim)?;
        let params = DarmParams::init(&profile.model, seed)?;
        Ok(Self { profile, data, params })
    }

    /// Histograms of training row norms for the real and pseudo domains on shared bins.
    pub fn norm_histogram(&self, bins: usize) -> Value {
        let mut real = Vec::new();
        let mut pseudo = Vec::new();
        for (e, t) in &self.data.train {
            let dest = if e.domain == Domain::Real {
                &mut real
            } else {
                &mut pseudo
            };
            for r in 0..t.rows() {
                dest.push(t.row(r).iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt());
            }
        }
        let all = real.iter().chain(&pseudo);
        let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
        let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
        let bins = bins.max(1);
        let width = ((hi - lo) / bins as f64).max(f64::MIN_POSITIVE);
        let count = |xs: &[f64]| {
            let mut h = vec![0usize; bins];
            for &x in xs {
                h[(((x - lo) / width) as usize).min(bins - 1)] += 1;
            }
            h
        };
        json!({
            "lo": lo,
            "width": width,
            "real": count(&real),
            "pseudo": count(&pseudo),
            "real_mean": mean_row_norm(&self.data, Stream::RealNormal),
            "pseudo_mean": mean_row_norm(&self.data, Stream::PseudoAbnormal),
        })
    }

    /// Abnormal-bank usage over pseudo-abnormal training rows at temperature `tau`.
    pub fn slot_usage(&self, tau: f64) -> Result<Value> {
        let train_set = self.data.train_set()?;
        let parts = train_set
            .stream(Stream::PseudoAbnormal)
            .iter()
            .map(|v| embed_video(&self.params, &v.features))
            .collect::<Result<Vec<_>>>()?;
        let stats = UsageStats::compute(&stack_rows(&parts)?, &self.params.abnormal.slots, tau)?;
        Ok(json!({
            "usage": stats.usage,
            "entropy": usage_entropy(&stats.usage),
            "max_entropy": (stats.usage.len() as f64).ln(),
        }))
    }

    /// Trains the baseline or full variant from scratch and evaluates it on the test split.
    pub fn train(&mut self, full: bool, steps: usize) -> Result<Value> {
        let variant = if full { Variant::full() } else { Variant::baseline() };
        let mut cfg = self.profile.train.clone();
        cfg.steps = steps;
        cfg.loss_weights.lambda1 = variant.lambda1;
        cfg.loss_weights.lambda2 = variant.lambda2;
        let outcome = train(&cfg, &self.profile.model, &self.data.train_set()?)?;
        self.params = outcome.params;
        let masks = self.data.compiled_masks()?;
        let report = evaluate(&self.params, &self.data.test_set()?, &masks)?;
        let (fpr, tpr) = roc(&report.traces, &masks);
        Ok(json!({
            "variant": variant.name,
            "loss": outcome.log.iter().map(|r| r.losses.total).collect::<Vec<_>>(),
            "auc": report.metrics.auc_micro,
            "fpr": fpr,
            "tpr": tpr,
        }))
    }
}

/// ROC vertices over distinct thresholds, from (0, 0) to (1, 1).
pub fn roc(traces: &[ScoreTrace], masks: &[FrameMask]) -> (Vec<f64>, Vec<f64>) {
    let mut pairs: Vec<(f64, bool)> = Vec::new();
    for t in traces {
        if let Some(m) = masks.iter().find(|m| m.video_id == t.video_id) {
            pairs.extend(t.frame_scores.iter().copied().zip(m.mask.iter().copied()));
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let pos = pairs.iter().filter(|p| p.1).count().max(1) as f64;
    let neg = pairs.iter().filter(|p| !p.1).count().max(1) as f64;
    let (mut fpr, mut tpr) = (vec![0.0], vec![0.0]);
    let (mut tp, mut fp) = (0.0, 0.0);
    for (i, &(s, label)) in pairs.iter().enumerate() {
        if label {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        if pairs.get(i + 1).is_none_or(|n| n.0 != s) {
            fpr.push(fp / neg);
            tpr.push(tp / pos);
        }
    }
    (fpr, tpr)
}

fn to_js(v: Result<Value>) -> std::result::Result<String, JsError> {
    v.map(|v| v.to_string()).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub struct Demo(Session);

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(pseudo_norm_scale: f64, seed: u32) -> std::result::Result<Demo, JsError> {
        Session::new(pseudo_norm_scale, seed.into())
            .map(Demo)
            .map_err(|e| JsError::new(&e.to_string()))
    }

    #[wasm_bindgen(js_name = normHistogram)]
    pub fn norm_histogram(&self, bins: usize) -> String {
        self.0.norm_histogram(bins).to_string()
    }

    #[wasm_bindgen(js_name = slotUsage)]
    pub fn slot_usage(&self, tau: f64) -> std::result::Result<String, JsError> {
        to_js(self.0.slot_usage(tau))
    }

    pub fn train(&mut self, full: bool, steps: usize) -> std::result::Result<String, JsError> {
        to_js(self.0.train(full, steps))
    }
}
