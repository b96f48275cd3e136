//! Training objectives: MIL ranking and top-k classification, domain
//! alignment through gradient reversal, and the usage-aware slot update.

use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_in_place, Graph, Tensor, Var, NORM_EPS};
use crate::error::{Error, Result};
use crate::model::{discriminate, DiscVars, VideoForward};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the domain-alignment term.
    pub lambda1: f64,
    /// Weight of the usage-aware update term.
    pub lambda2: f64,
    /// Gradient reversal strength.
    pub lambda_da: f64,
    /// Weight of the explicit normal / pseudo-normal mean distance.
    pub lambda_dist: f64,
    /// Usage exponent.
    pub beta: f64,
    /// Usage guard in `ū / (u_k + ε)`.
    pub epsilon: f64,
    /// Segments averaged by the top-k classification term.
    pub topk: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.1,
            lambda_da: 0.2,
            lambda_dist: 0.01,
            beta: 1.0,
            epsilon: 1e-6,
            topk: 1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let vals = [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda_da", self.lambda_da),
            ("lambda_dist", self.lambda_dist),
            ("beta", self.beta),
            ("epsilon", self.epsilon),
        ];
        for (name, v) in vals {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and ≥ 0, got {v}")));
            }
        }
        if self.epsilon <= 0.0 {
            return Err(Error::Config("epsilon must be > 0".into()));
        }
        if self.topk == 0 {
            return Err(Error::Config("topk must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Discrimination-only ablation.
    pub fn baseline(&self) -> Self {
        Self {
            lambda1: 0.0,
            lambda2: 0.0,
            ..self.clone()
        }
    }
}

/// Per-term loss values of one step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mil_rank: f64,
    pub mil_cls: f64,
    pub da: f64,
    pub upd: f64,
    pub total: f64,
    /// Set when the batch had no pseudo-normal stream and alignment was skipped.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub da_skipped: bool,
}

/// `max(0, 1 − max(abnormal) + max(normal))`.
pub fn mil_rank_loss(g: &mut Graph, scores_abn: Var, scores_norm: Var) -> Result<Var> {
    let max_a = g.topk_mean(scores_abn, 1)?;
    let max_n = g.topk_mean(scores_norm, 1)?;
    let diff = g.sub(max_n, max_a)?;
    let margin = g.offset(diff, 1.0);
    Ok(g.hinge(margin))
}

/// BCE of the top-k mean score against a video label.
pub fn mil_cls_loss(g: &mut Graph, scores: Var, label: f64, k: usize) -> Result<Var> {
    let m = g.topk_mean(scores, k)?;
    g.bce(m, &[label])
}

#[derive(Clone, Copy, Debug)]
pub struct DomainAlignment {
    /// Both discriminator BCE terms; sits downstream of gradient reversal.
    pub adversarial: Var,
    /// `‖f̄_N − f̄_Ñ‖²`, unweighted.
    pub distance: Var,
    /// `adversarial + λ_dist · distance`.
    pub total: Var,
}

/// Real-normal means are labelled 0, pseudo-normal means 1.
pub fn domain_alignment_loss(
    g: &mut Graph,
    real_mean: Var,
    pseudo_mean: Var,
    disc: &DiscVars,
    w: &LossWeights,
) -> Result<DomainAlignment> {
    domain_alignment(g, real_mean, pseudo_mean, disc, w, true)
}

/// Same value as [`domain_alignment_loss`] with the reversal removed, so the
/// encoder receives the plain discriminator gradient.
pub fn domain_alignment_loss_without_reversal(
    g: &mut Graph,
    real_mean: Var,
    pseudo_mean: Var,
    disc: &DiscVars,
    w: &LossWeights,
) -> Result<DomainAlignment> {
    domain_alignment(g, real_mean, pseudo_mean, disc, w, false)
}

fn domain_alignment(
    g: &mut Graph,
    real_mean: Var,
    pseudo_mean: Var,
    disc: &DiscVars,
    w: &LossWeights,
    reverse: bool,
) -> Result<DomainAlignment> {
    let (rn, pn) = if reverse {
        (
            g.grad_reverse(real_mean, w.lambda_da),
            g.grad_reverse(pseudo_mean, w.lambda_da),
        )
    } else {
        (real_mean, pseudo_mean)
    };
    let p_real = discriminate(g, rn, disc)?;
    let p_pseudo = discriminate(g, pn, disc)?;
    let b_real = g.bce(p_real, &[0.0])?;
    let b_pseudo = g.bce(p_pseudo, &[1.0])?;
    let adversarial = g.add(b_real, b_pseudo)?;
    let diff = g.sub(real_mean, pseudo_mean)?;
    let distance = g.squared_l2_norm(diff);
    let weighted = g.scale(distance, w.lambda_dist);
    let total = g.add(adversarial, weighted)?;
    Ok(DomainAlignment {
        adversarial,
        distance,
        total,
    })
}

/// Responsibility-weighted centers and usage; treated as constants by the
/// update loss.
#[derive(Clone, Debug, PartialEq)]
pub struct UsageStats {
    /// K×d, row k is `μ_k`.
    pub centers: Tensor,
    /// `u_k`, sums to one.
    pub usage: Vec<f64>,
}

/// Plain-value soft assignments `softmax(Z̄ M̄ᵀ / τ)`, (B·T)×K.
pub fn soft_assignments(z: &Tensor, slots: &Tensor, tau: f64) -> Result<Tensor> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    let (n, d) = z.dims2();
    let (k, d2) = slots.dims2();
    if d != d2 {
        return Err(Error::shape("soft_assignments", format!("Z d={d}, slots d={d2}")));
    }
    let unit = |row: &[f64]| {
        let s = (row.iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt();
        row.iter().map(|v| v / s).collect::<Vec<_>>()
    };
    let ms: Vec<Vec<f64>> = (0..k).map(|j| unit(slots.row(j))).collect();
    let mut q = Vec::with_capacity(n * k);
    for i in 0..n {
        let zr = unit(z.row(i));
        let mut row: Vec<f64> = ms
            .iter()
            .map(|m| zr.iter().zip(m).map(|(a, b)| a * b).sum::<f64>() / tau)
            .collect();
        softmax_in_place(&mut row);
        q.extend(row);
    }
    Tensor::matrix(n, k, q)
}

impl UsageStats {
    pub fn from_assignments(q: &Tensor, z: &Tensor, slots: &Tensor) -> Result<Self> {
        let (n, k) = q.dims2();
        let (nz, d) = z.dims2();
        if n != nz || slots.dims2() != (k, d) {
            return Err(Error::shape(
                "usage_stats",
                format!("Q {:?}, Z {:?}, slots {:?}", q.shape(), z.shape(), slots.shape()),
            ));
        }
        let mut centers = vec![0.0; k * d];
        let mut mass = vec![0.0; k];
        for i in 0..n {
            let zr = z.row(i);
            for j in 0..k {
                let w = q.get(i, j);
                mass[j] += w;
                for (c, &zv) in centers[j * d..(j + 1) * d].iter_mut().zip(zr) {
                    *c += w * zv;
                }
            }
        }
        for j in 0..k {
            let row = &mut centers[j * d..(j + 1) * d];
            if mass[j] > 0.0 {
                row.iter_mut().for_each(|c| *c /= mass[j]);
            } else {
                row.copy_from_slice(slots.row(j));
            }
        }
        let usage = mass.iter().map(|m| m / n as f64).collect();
        Ok(Self {
            centers: Tensor::matrix(k, d, centers)?,
            usage,
        })
    }

    pub fn compute(z: &Tensor, slots: &Tensor, tau: f64) -> Result<Self> {
        let q = soft_assignments(z, slots, tau)?;
        Self::from_assignments(&q, z, slots)
    }

    /// `(ū / (u_k + ε))^β` per slot.
    pub fn slot_weights(&self, beta: f64, epsilon: f64) -> Vec<f64> {
        let mean = self.usage.iter().sum::<f64>() / self.usage.len() as f64;
        self.usage.iter().map(|u| (mean / (u + epsilon)).powf(beta)).collect()
    }

    /// Shannon entropy of the usage distribution in nats.
    pub fn entropy(&self) -> f64 {
        usage_entropy(&self.usage)
    }
}

pub fn usage_entropy(u: &[f64]) -> f64 {
    -u.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// `(1/K) Σ_k (ū/(u_k+ε))^β ‖m_k − μ_k‖²` with `μ`, `u` held constant.
pub fn usage_update_loss(g: &mut Graph, slots: Var, stats: &UsageStats, w: &LossWeights) -> Result<Var> {
    let (k, d) = g.value(slots).dims2();
    if stats.centers.dims2() != (k, d) {
        return Err(Error::shape("usage_update_loss", "centers do not match the bank"));
    }
    let weights = stats.slot_weights(w.beta, w.epsilon);
    let expanded: Vec<f64> = weights.iter().flat_map(|&wk| std::iter::repeat_n(wk, d)).collect();
    let centers = g.constant(stats.centers.clone());
    let wmat = g.constant(Tensor::matrix(k, d, expanded)?);
    let diff = g.sub(slots, centers)?;
    let sq = g.mul(diff, diff)?;
    let weighted = g.mul(sq, wmat)?;
    let s = g.sum(weighted);
    Ok(g.scale(s, 1.0 / k as f64))
}

/// Closed-form `∂L_upd/∂M`: row k is `(2/K) w_k (m_k − μ_k)`.
pub fn usage_update_grad(slots: &Tensor, stats: &UsageStats, w: &LossWeights) -> Vec<f64> {
    let (k, d) = slots.dims2();
    let weights = stats.slot_weights(w.beta, w.epsilon);
    (0..k * d)
        .map(|i| 2.0 / k as f64 * weights[i / d] * (slots.data()[i] - stats.centers.data()[i]))
        .collect()
}

/// Per-video forward results of one batch, by stream.
#[derive(Clone, Debug, Default)]
pub struct BatchForward {
    pub pseudo_abnormal: Vec<VideoForward>,
    pub real_normal: Vec<VideoForward>,
    pub pseudo_normal: Vec<VideoForward>,
}

#[derive(Clone, Debug)]
pub struct TotalLoss {
    pub mil_rank: Var,
    pub mil_cls: Var,
    pub da: Option<DomainAlignment>,
    pub upd: Var,
    pub total: Var,
    pub stats: UsageStats,
}

impl TotalLoss {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            mil_rank: g.item(self.mil_rank),
            mil_cls: g.item(self.mil_cls),
            da: self.da.map_or(0.0, |d| g.item(d.total)),
            upd: g.item(self.upd),
            total: g.item(self.total),
            da_skipped: self.da.is_none(),
        }
    }
}

fn stream_mean(g: &mut Graph, videos: &[VideoForward]) -> Result<Var> {
    let parts: Vec<Var> = videos.iter().map(|v| v.embedding).collect();
    let all = g.concat_rows(&parts)?;
    g.mean_axis(all, 0)
}

/// Mean of `terms`, which must be non-empty.
fn mean_of(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let stacked = g.concat_rows(terms)?;
    let s = g.sum(stacked);
    Ok(g.scale(s, 1.0 / terms.len() as f64))
}

/// Combined objective `(mil_rank + mil_cls) + λ₁·L_DA + λ₂·L_upd`.
///
/// `frozen` overrides the usage statistics (used by finite-difference checks,
/// which must hold the stop-gradient quantities fixed).
pub fn total_loss(
    g: &mut Graph,
    fwd: &BatchForward,
    disc: &DiscVars,
    abnormal_slots: Var,
    w: &LossWeights,
    tau: f64,
    frozen: Option<&UsageStats>,
) -> Result<TotalLoss> {
    if fwd.pseudo_abnormal.is_empty() || fwd.real_normal.is_empty() {
        return Err(Error::InvalidArgument(
            "batch needs at least one abnormal and one normal video".into(),
        ));
    }
    let (na, nn) = (fwd.pseudo_abnormal.len(), fwd.real_normal.len());
    let mut ranks = Vec::new();
    for i in 0..na.max(nn) {
        ranks.push(mil_rank_loss(
            g,
            fwd.pseudo_abnormal[i % na].scores,
            fwd.real_normal[i % nn].scores,
        )?);
    }
    let mil_rank = mean_of(g, &ranks)?;

    let mut cls = Vec::new();
    for (videos, label) in [(&fwd.pseudo_abnormal, 1.0), (&fwd.real_normal, 0.0)] {
        for v in videos.iter() {
            let k = w.topk.min(g.value(v.scores).numel());
            cls.push(mil_cls_loss(g, v.scores, label, k)?);
        }
    }
    let mil_cls = mean_of(g, &cls)?;

    let da = if fwd.pseudo_normal.is_empty() {
        None
    } else {
        let real = stream_mean(g, &fwd.real_normal)?;
        let pseudo = stream_mean(g, &fwd.pseudo_normal)?;
        Some(domain_alignment_loss(g, real, pseudo, disc, w)?)
    };

    let stats = match frozen {
        Some(s) => s.clone(),
        None => {
            let parts: Vec<Tensor> = fwd
                .pseudo_abnormal
                .iter()
                .map(|v| g.value(v.embedding).clone())
                .collect();
            let z = stack_rows(&parts)?;
            UsageStats::compute(&z, g.value(abnormal_slots), tau)?
        }
    };
    let upd = usage_update_loss(g, abnormal_slots, &stats, w)?;

    let disc_term = g.add(mil_rank, mil_cls)?;
    let mut total = disc_term;
    if let Some(d) = da {
        let t = g.scale(d.total, w.lambda1);
        total = g.add(total, t)?;
    }
    let u = g.scale(upd, w.lambda2);
    total = g.add(total, u)?;
    Ok(TotalLoss {
        mil_rank,
        mil_cls,
        da,
        upd,
        total,
        stats,
    })
}

pub fn stack_rows(parts: &[Tensor]) -> Result<Tensor> {
    let c = parts
        .first()
        .map(Tensor::cols)
        .ok_or_else(|| Error::shape("stack_rows", "empty"))?;
    let mut data = Vec::new();
    for p in parts {
        if p.cols() != c {
            return Err(Error::shape("stack_rows", "column mismatch"));
        }
        data.extend_from_slice(p.data());
    }
    Tensor::matrix(data.len() / c, c, data)
}
