//! Three-stream batching, Adam with decoupled weight decay, and the training loop.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::io::{DatasetManifest, Domain, Label, ManifestEntry, PavfTensor};
use crate::losses::{total_loss, BatchForward, LossBreakdown, LossWeights, TotalLoss, UsageStats};
use crate::model::{forward_video, DarmParams, DarmVars, ModelConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_videos_per_stream: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub segment_number: usize,
    pub steps: usize,
    pub seed: u64,
    pub loss_weights: LossWeights,
    #[serde(default)]
    pub optimizer: Optimizer,
    /// Random segment offsets instead of uniform spacing.
    #[serde(default)]
    pub random_segments: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be ≥ 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be finite and ≥ 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be finite and ≥ 0".into()));
        }
        if self.batch_videos_per_stream == 0 || self.segment_number == 0 {
            return Err(Error::Config(
                "batch_videos_per_stream and segment_number must be ≥ 1".into(),
            ));
        }
        self.loss_weights.validate()
    }
}

/// A manifest with every feature tensor loaded.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub videos: Vec<Video>,
}

#[derive(Clone, Debug)]
pub struct Video {
    pub entry: ManifestEntry,
    pub features: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    RealNormal,
    PseudoNormal,
    PseudoAbnormal,
}

impl Stream {
    pub fn of(entry: &ManifestEntry) -> Option<Self> {
        match (entry.label, entry.domain) {
            (Label::Normal, Domain::Real) => Some(Stream::RealNormal),
            (Label::Normal, Domain::Pseudo) => Some(Stream::PseudoNormal),
            (Label::Abnormal, Domain::Pseudo) => Some(Stream::PseudoAbnormal),
            (Label::Abnormal, Domain::Real) => None,
        }
    }
}

impl Dataset {
    pub fn load(manifest: &DatasetManifest) -> Result<Self> {
        let videos = manifest
            .entries
            .iter()
            .map(|e| {
                let t = manifest.load_features(e)?;
                Ok(Video {
                    entry: e.clone(),
                    features: to_tensor(&t)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { videos })
    }

    pub fn from_pairs(pairs: Vec<(ManifestEntry, PavfTensor)>) -> Result<Self> {
        let videos = pairs
            .into_iter()
            .map(|(entry, t)| {
                Ok(Video {
                    entry,
                    features: to_tensor(&t)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { videos })
    }

    pub fn stream(&self, s: Stream) -> Vec<&Video> {
        self.videos.iter().filter(|v| Stream::of(&v.entry) == Some(s)).collect()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.videos.first().map(|v| v.features.cols())
    }
}

pub fn to_tensor(t: &PavfTensor) -> Result<Tensor> {
    Tensor::matrix(t.rows(), t.cols(), t.to_f64())
}

/// Row indices used when a T-row video is reduced to S segments.
///
/// `T ≥ S`: `floor(i·T/S)`; `T < S`: rows repeated cyclically.
pub fn segment_indices(rows: usize, segments: usize) -> Vec<usize> {
    if rows >= segments {
        (0..segments).map(|i| i * rows / segments).collect()
    } else {
        (0..segments).map(|i| i % rows).collect()
    }
}

fn random_segment_indices(rows: usize, segments: usize, rng: &mut impl Rng) -> Vec<usize> {
    if rows <= segments {
        return segment_indices(rows, segments);
    }
    // One random row inside each of S equal-width bins.
    (0..segments)
        .map(|i| {
            let lo = i * rows / segments;
            let hi = ((i + 1) * rows / segments).max(lo + 1);
            rng.random_range(lo..hi)
        })
        .collect()
}

fn gather_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let c = t.cols();
    let data = idx.iter().flat_map(|&r| t.row(r).iter().copied()).collect();
    Tensor::matrix(idx.len(), c, data).unwrap()
}

/// Segment features for one step, by stream.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Batch {
    pub pseudo_abnormal: Vec<Tensor>,
    pub real_normal: Vec<Tensor>,
    pub pseudo_normal: Vec<Tensor>,
}

pub fn sample_batch(ds: &Dataset, cfg: &TrainConfig, rng: &mut impl Rng) -> Result<Batch> {
    let mut pick = |s: Stream, required: bool| -> Result<Vec<Tensor>> {
        let pool = ds.stream(s);
        if pool.is_empty() {
            if required {
                return Err(Error::InvalidArgument(format!("empty {s:?} stream")));
            }
            return Ok(Vec::new());
        }
        let b = cfg.batch_videos_per_stream;
        let chosen: Vec<usize> = if pool.len() >= b {
            sample(rng, pool.len(), b).into_vec()
        } else {
            (0..b).map(|_| rng.random_range(0..pool.len())).collect()
        };
        Ok(chosen
            .into_iter()
            .map(|i| {
                let f = &pool[i].features;
                let idx = if cfg.random_segments {
                    random_segment_indices(f.rows(), cfg.segment_number, rng)
                } else {
                    segment_indices(f.rows(), cfg.segment_number)
                };
                gather_rows(f, &idx)
            })
            .collect())
    };
    Ok(Batch {
        pseudo_abnormal: pick(Stream::PseudoAbnormal, true)?,
        real_normal: pick(Stream::RealNormal, true)?,
        pseudo_normal: pick(Stream::PseudoNormal, false)?,
    })
}

pub fn forward_batch(g: &mut Graph, vars: &DarmVars, batch: &Batch) -> Result<BatchForward> {
    let mut run = |videos: &[Tensor]| -> Result<Vec<_>> {
        videos
            .iter()
            .map(|f| {
                let x = g.constant(f.clone());
                forward_video(g, vars, x)
            })
            .collect()
    };
    Ok(BatchForward {
        pseudo_abnormal: run(&batch.pseudo_abnormal)?,
        real_normal: run(&batch.real_normal)?,
        pseudo_normal: run(&batch.pseudo_normal)?,
    })
}

/// Builds the graph for one batch and returns it with the loss nodes.
pub fn batch_loss(
    params: &DarmParams,
    batch: &Batch,
    w: &LossWeights,
    tau: f64,
    frozen: Option<&UsageStats>,
) -> Result<(Graph, DarmVars, TotalLoss)> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, true);
    let fwd = forward_batch(&mut g, &vars, batch)?;
    let loss = total_loss(&mut g, &fwd, &vars.disc, vars.abnormal, w, tau, frozen)?;
    Ok((g, vars, loss))
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64, params: &DarmParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut DarmParams, grads: &[Vec<f64>]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                *x -= self.lr * update + self.lr * self.weight_decay * *x;
            }
        }
    }
}

/// One line of the loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    #[serde(flatten)]
    pub losses: LossBreakdown,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub initial: DarmParams,
    pub params: DarmParams,
    pub log: Vec<LossRecord>,
    /// Usage statistics of the abnormal bank at the last step.
    pub final_usage: Vec<f64>,
}

pub fn collect_grads(g: &Graph, vars: &DarmVars, params: &DarmParams) -> Vec<Vec<f64>> {
    vars.all()
        .iter()
        .zip(params.tensors())
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect()
}

pub fn train(cfg: &TrainConfig, model: &ModelConfig, ds: &Dataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.validate()?;
    if let Some(d) = ds.feature_dim() {
        if d != model.input_dim {
            return Err(Error::Config(format!(
                "model input_dim {} but features have D={d}",
                model.input_dim
            )));
        }
    }
    let initial = DarmParams::init(model, cfg.seed)?;
    let mut params = initial.clone();
    let mut opt = Adam::new(cfg.learning_rate, cfg.weight_decay, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed_ba7c));
    let mut log = Vec::with_capacity(cfg.steps);
    let mut final_usage = Vec::new();
    for step in 0..cfg.steps {
        let batch = sample_batch(ds, cfg, &mut rng)?;
        let (mut g, vars, loss) = batch_loss(&params, &batch, &cfg.loss_weights, model.tau, None)?;
        let record = loss.breakdown(&g);
        if !record.total.is_finite() {
            return Err(Error::Divergence {
                step,
                value: record.total,
            });
        }
        g.backward(loss.total)?;
        let grads = collect_grads(&g, &vars, &params);
        opt.step(&mut params, &grads);
        if !params.all_finite() {
            return Err(Error::Divergence { step, value: f64::NAN });
        }
        final_usage = loss.stats.usage.clone();
        log.push(LossRecord { step, losses: record });
    }
    Ok(TrainOutcome {
        initial,
        params,
        log,
        final_usage,
    })
}

pub fn write_loss_log(log: &[LossRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for r in log {
        let line = serde_json::to_string(r).map_err(|e| Error::json("loss log", e))?;
        writeln!(out, "{line}").unwrap();
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
