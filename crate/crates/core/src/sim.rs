//! Synthetic feature streams with an inflated-norm pseudo domain, and the
//! baseline-vs-regularized ablation run on them.
//!
//! Every row is `norm · normalize(offset·μ₀ + z/√D [+ strength·c_j])` with
//! `z ~ N(0, I)`, a shared mean direction `μ₀` and abnormal mode centers
//! `c_j`. Row norms are drawn around the stream's target mean. Training
//! abnormal videos and pseudo normals carry the inflated norm; test videos are
//! all at the real norm.

use std::fs;
use std::path::Path;
use std::thread;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_json;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::io::{
    write_masks, write_tensor, DatasetManifest, Domain, FrameMask, Label, ManifestEntry, MaskSpec, PavfTensor,
};
use crate::losses::{stack_rows, LossWeights, UsageStats};
use crate::model::{embed_video, DarmParams, ModelConfig};
use crate::train::{train, Dataset, Stream, TrainConfig};

/// Real-domain mean feature norm.
pub const REAL_MEAN_NORM: f64 = 20.52;
/// Pseudo-domain mean feature norm.
pub const PSEUDO_MEAN_NORM: f64 = 23.03;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub dim: usize,
    /// Training videos in each of the three streams.
    pub videos_per_stream: usize,
    pub test_normal_videos: usize,
    pub test_abnormal_videos: usize,
    pub rows_per_video: usize,
    pub frames_per_row: usize,
    pub normal_mean_norm: f64,
    pub pseudo_norm_scale: f64,
    pub anomaly_fraction: f64,
    pub n_abnormal_modes: usize,
    /// Weight of the shared mean direction before normalization.
    pub mean_offset: f64,
    /// Weight of the mode center in abnormal rows.
    pub mode_strength: f64,
    /// Perturbation of mode centers per abnormal row.
    pub mode_spread: f64,
    /// Relative standard deviation of row norms.
    pub norm_jitter: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            videos_per_stream: 256,
            test_normal_videos: 16,
            test_abnormal_videos: 16,
            rows_per_video: 20,
            frames_per_row: 16,
            normal_mean_norm: REAL_MEAN_NORM,
            pseudo_norm_scale: PSEUDO_MEAN_NORM / REAL_MEAN_NORM,
            anomaly_fraction: 0.25,
            n_abnormal_modes: 3,
            mean_offset: 4.0,
            mode_strength: 0.35,
            mode_spread: 0.5,
            norm_jitter: 0.02,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rows_per_video < 2 {
            return Err(Error::Config("rows_per_video must be ≥ 2".into()));
        }
        if self.n_abnormal_modes == 0 {
            return Err(Error::Config("n_abnormal_modes must be ≥ 1".into()));
        }
        if self.dim == 0 || self.frames_per_row == 0 || self.videos_per_stream == 0 {
            return Err(Error::Config(
                "dim, frames_per_row and videos_per_stream must be ≥ 1".into(),
            ));
        }
        if !(self.pseudo_norm_scale > 0.0 && self.pseudo_norm_scale.is_finite()) {
            return Err(Error::Config("pseudo_norm_scale must be > 0".into()));
        }
        if !(self.anomaly_fraction > 0.0 && self.anomaly_fraction < 1.0) {
            return Err(Error::Config("anomaly_fraction must lie in (0, 1)".into()));
        }
        if self.normal_mean_norm.is_nan()
            || self.normal_mean_norm <= 0.0
            || self.norm_jitter.is_nan()
            || self.norm_jitter < 0.0
        {
            return Err(Error::Config("normal_mean_norm must be > 0 and norm_jitter ≥ 0".into()));
        }
        Ok(())
    }

    /// Abnormal rows per abnormal video.
    pub fn burst_rows(&self) -> usize {
        ((self.anomaly_fraction * self.rows_per_video as f64).round() as usize).clamp(1, self.rows_per_video - 1)
    }
}

/// A generated dataset held in memory.
#[derive(Clone, Debug)]
pub struct SimData {
    pub train: Vec<(ManifestEntry, PavfTensor)>,
    pub test: Vec<(ManifestEntry, PavfTensor)>,
    pub test_masks: Vec<MaskSpec>,
}

impl SimData {
    pub fn train_set(&self) -> Result<Dataset> {
        Dataset::from_pairs(self.train.clone())
    }

    pub fn test_set(&self) -> Result<Dataset> {
        Dataset::from_pairs(self.test.clone())
    }

    pub fn compiled_masks(&self) -> Result<Vec<FrameMask>> {
        let total = self.test.first().map_or(0, |(e, _)| e.total_frames);
        self.test_masks.iter().map(|m| m.compile(total)).collect()
    }
}

fn gaussian(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

struct Sampler<'a> {
    cfg: &'a SimConfig,
    mean_dir: Vec<f64>,
    modes: Vec<Vec<f64>>,
    rng: ChaCha8Rng,
}

impl Sampler<'_> {
    fn row(&mut self, target_norm: f64, mode: Option<usize>) -> Vec<f64> {
        let d = self.cfg.dim;
        let sd = 1.0 / (d as f64).sqrt();
        let z = gaussian(&mut self.rng, d);
        let mut v: Vec<f64> = (0..d)
            .map(|i| self.cfg.mean_offset * self.mean_dir[i] + sd * z[i])
            .collect();
        if let Some(j) = mode {
            let xi = gaussian(&mut self.rng, d);
            let mut c: Vec<f64> = (0..d)
                .map(|i| self.modes[j][i] + self.cfg.mode_spread * sd * xi[i])
                .collect();
            normalize(&mut c);
            v.iter_mut().zip(&c).for_each(|(x, c)| *x += self.cfg.mode_strength * c);
        }
        normalize(&mut v);
        let eps: f64 = self.rng.sample::<f64, _>(StandardNormal).clamp(-3.0, 3.0);
        let norm = target_norm * (1.0 + self.cfg.norm_jitter * eps);
        v.iter_mut().for_each(|x| *x *= norm);
        v
    }

    /// A T×D video and, if abnormal, the burst's row range.
    fn video(&mut self, target_norm: f64, abnormal: bool) -> (Vec<f64>, Option<(usize, usize)>) {
        let t = self.cfg.rows_per_video;
        let burst = abnormal.then(|| {
            let len = self.cfg.burst_rows();
            let start = self.rng.random_range(0..=t - len);
            (start, start + len)
        });
        let mode = self.rng.random_range(0..self.cfg.n_abnormal_modes);
        let mut data = Vec::with_capacity(t * self.cfg.dim);
        for r in 0..t {
            let in_burst = burst.is_some_and(|(s, e)| r >= s && r < e);
            data.extend(self.row(target_norm, in_burst.then_some(mode)));
        }
        (data, burst)
    }
}

pub fn generate(cfg: &SimConfig) -> Result<SimData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mean_dir = gaussian(&mut rng, cfg.dim);
    normalize(&mut mean_dir);
    let modes = (0..cfg.n_abnormal_modes)
        .map(|_| {
            let mut c = gaussian(&mut rng, cfg.dim);
            // Mode centers are orthogonal to the shared mean direction.
            let p: f64 = c.iter().zip(&mean_dir).map(|(a, b)| a * b).sum();
            c.iter_mut().zip(&mean_dir).for_each(|(a, b)| *a -= p * b);
            normalize(&mut c);
            c
        })
        .collect();
    let mut s = Sampler {
        cfg,
        mean_dir,
        modes,
        rng,
    };
    let (t, d) = (cfg.rows_per_video, cfg.dim);
    let real = cfg.normal_mean_norm;
    let pseudo = real * cfg.pseudo_norm_scale;
    let total_frames = t * cfg.frames_per_row;
    let entry = |id: String, label, domain| ManifestEntry {
        path: format!("features/{id}.pavf"),
        video_id: id,
        label,
        domain,
        scene_id: "sim".into(),
        frames_per_row: cfg.frames_per_row,
        total_frames,
    };

    let mut train = Vec::new();
    for (prefix, label, domain, norm) in [
        ("train_real_normal", Label::Normal, Domain::Real, real),
        ("train_pseudo_normal", Label::Normal, Domain::Pseudo, pseudo),
        ("train_pseudo_abnormal", Label::Abnormal, Domain::Pseudo, pseudo),
    ] {
        for i in 0..cfg.videos_per_stream {
            let (data, _) = s.video(norm, label == Label::Abnormal);
            train.push((
                entry(format!("{prefix}_{i:03}"), label, domain),
                PavfTensor::from_f64(vec![t, d], &data)?,
            ));
        }
    }

    let mut test = Vec::new();
    let mut test_masks = Vec::new();
    for i in 0..cfg.test_normal_videos + cfg.test_abnormal_videos {
        let abnormal = i >= cfg.test_normal_videos;
        let (data, burst) = s.video(real, abnormal);
        let (label, id) = if abnormal {
            (
                Label::Abnormal,
                format!("test_abnormal_{:03}", i - cfg.test_normal_videos),
            )
        } else {
            (Label::Normal, format!("test_normal_{i:03}"))
        };
        let intervals = burst
            .map(|(a, b)| vec![[a * cfg.frames_per_row, b * cfg.frames_per_row]])
            .unwrap_or_default();
        test_masks.push(MaskSpec {
            video_id: id.clone(),
            intervals,
        });
        test.push((entry(id, label, Domain::Real), PavfTensor::from_f64(vec![t, d], &data)?));
    }
    Ok(SimData {
        train,
        test,
        test_masks,
    })
}

pub const TRAIN_MANIFEST: &str = "train_manifest.json";
pub const TEST_MANIFEST: &str = "test_manifest.json";
pub const TEST_MASKS: &str = "test_masks.json";

/// Writes tensors under `features/`, both manifests, the test masks and the config.
pub fn write_sim(data: &SimData, cfg: &SimConfig, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let features = dir.join("features");
    fs::create_dir_all(&features).map_err(|e| Error::io(&features, e))?;
    for (split, name) in [(&data.train, TRAIN_MANIFEST), (&data.test, TEST_MANIFEST)] {
        for (e, t) in split {
            write_tensor(t, dir.join(&e.path))?;
        }
        let manifest = DatasetManifest {
            entries: split.iter().map(|(e, _)| e.clone()).collect(),
            base_dir: dir.to_path_buf(),
        };
        manifest.write(dir.join(name))?;
    }
    write_masks(&data.test_masks, dir.join(TEST_MASKS))?;
    write_json(dir.join("sim_config.json"), cfg)
}

/// Mean row norm of the training videos in `stream`.
pub fn mean_row_norm(data: &SimData, stream: Stream) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (e, t) in &data.train {
        if Stream::of(e) == Some(stream) {
            for r in 0..t.rows() {
                sum += t.row(r).iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
                n += 1;
            }
        }
    }
    sum / n.max(1) as f64
}

/// Shannon entropy (nats) of abnormal-bank usage over all pseudo-abnormal
/// training rows.
pub fn usage_entropy_of(params: &DarmParams, model: &ModelConfig, ds: &Dataset) -> Result<f64> {
    let parts = ds
        .stream(Stream::PseudoAbnormal)
        .iter()
        .map(|v| embed_video(params, &v.features))
        .collect::<Result<Vec<_>>>()?;
    let z = stack_rows(&parts)?;
    Ok(UsageStats::compute(&z, &params.abnormal.slots, model.tau)?.entropy())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Variant {
    pub fn baseline() -> Self {
        Self {
            name: "baseline".into(),
            lambda1: 0.0,
            lambda2: 0.0,
        }
    }

    pub fn full() -> Self {
        Self {
            name: "full".into(),
            lambda1: 1.0,
            lambda2: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub auc_micro: f64,
    pub usage_entropy: f64,
}

/// Everything a single train+evaluate cycle needs besides variant and seed.
#[derive(Clone, Debug)]
pub struct AblationSetup {
    pub sim: SimConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Trains one variant on freshly simulated data for `seed` and evaluates it.
pub fn run_one(setup: &AblationSetup, variant: &Variant, seed: u64) -> Result<AblationRow> {
    let sim = SimConfig {
        seed,
        ..setup.sim.clone()
    };
    let data = generate(&sim)?;
    let train_set = data.train_set()?;
    let cfg = TrainConfig {
        seed,
        loss_weights: LossWeights {
            lambda1: variant.lambda1,
            lambda2: variant.lambda2,
            ..setup.train.loss_weights.clone()
        },
        ..setup.train.clone()
    };
    let outcome = train(&cfg, &setup.model, &train_set)?;
    let report = evaluate(&outcome.params, &data.test_set()?, &data.compiled_masks()?)?;
    Ok(AblationRow {
        variant: variant.name.clone(),
        seed,
        auc_micro: report.metrics.auc_micro,
        usage_entropy: usage_entropy_of(&outcome.params, &setup.model, &train_set)?,
    })
}

/// One row per (variant, seed), in variant-major order. Runs execute on
/// scoped threads; results do not depend on scheduling.
pub fn run_ablation(setup: &AblationSetup, variants: &[Variant], seeds: &[u64]) -> Result<Vec<AblationRow>> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument(
            "ablation needs at least one variant and one seed".into(),
        ));
    }
    let jobs: Vec<(&Variant, u64)> = variants
        .iter()
        .flat_map(|v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let workers = thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len());
    if workers == 1 {
        return jobs.iter().map(|&(v, s)| run_one(setup, v, s)).collect();
    }
    let mut results: Vec<Option<Result<AblationRow>>> = (0..jobs.len()).map(|_| None).collect();
    thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let jobs = &jobs;
                s.spawn(move || {
                    (w..jobs.len())
                        .step_by(workers)
                        .map(|i| (i, run_one(setup, jobs[i].0, jobs[i].1)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("ablation worker panicked") {
                results[i] = Some(r);
            }
        }
    });
    results.into_iter().map(|r| r.expect("every job ran")).collect()
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Median of `field` over the rows of `variant`.
pub fn variant_median(rows: &[AblationRow], variant: &str, field: impl Fn(&AblationRow) -> f64) -> f64 {
    let vals: Vec<f64> = rows.iter().filter(|r| r.variant == variant).map(field).collect();
    median(&vals)
}
