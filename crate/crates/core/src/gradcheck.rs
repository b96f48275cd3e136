//! Finite-difference verification of every loss term against the graph's
//! analytic gradients, over randomly drawn small models and batches.
//!
//! Two details make the comparison well-posed:
//! * Usage statistics (`μ`, `u`) are stop-gradient, so they are frozen at the
//!   base point while differencing.
//! * Gradient reversal changes only the backward pass. The adversarial part of
//!   the objective is differenced separately and its contribution is scaled by
//!   `−λ_da` for parameters upstream of the reversal (the encoder) and by `1`
//!   for the discriminator.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::autodiff::check::{relative_error, FD_STEP};
use crate::autodiff::{Graph, Tensor};
use crate::error::Result;
use crate::losses::{domain_alignment_loss, domain_alignment_loss_without_reversal, LossWeights, UsageStats};
use crate::model::{DarmParams, ModelConfig, PARAM_NAMES};
use crate::train::{batch_loss, collect_grads, Batch};

pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    MilRank,
    MilCls,
    DomainAlignment,
    UsageUpdate,
    Total,
}

impl Term {
    pub const ALL: [Term; 5] = [
        Term::MilRank,
        Term::MilCls,
        Term::DomainAlignment,
        Term::UsageUpdate,
        Term::Total,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Term::MilRank => "mil_rank",
            Term::MilCls => "mil_cls",
            Term::DomainAlignment => "domain_alignment",
            Term::UsageUpdate => "usage_update",
            Term::Total => "total",
        }
    }
}

/// Problem sizes for the suite.
#[derive(Clone, Debug)]
pub struct GradCheckShape {
    pub input_dim: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub slots: usize,
    pub rows: usize,
    pub videos_per_stream: usize,
}

impl Default for GradCheckShape {
    fn default() -> Self {
        Self {
            input_dim: 10,
            embed_dim: 8,
            heads: 2,
            slots: 4,
            rows: 6,
            videos_per_stream: 2,
        }
    }
}

/// One random instance: model, batch, loss weights and frozen usage statistics.
#[derive(Clone, Debug)]
pub struct Problem {
    pub model: ModelConfig,
    pub params: DarmParams,
    pub batch: Batch,
    pub weights: LossWeights,
    pub frozen: UsageStats,
}

fn normal_tensor(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

impl Problem {
    pub fn random(shape: &GradCheckShape, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = ModelConfig {
            input_dim: shape.input_dim,
            embed_dim: shape.embed_dim,
            heads: shape.heads,
            abnormal_slots: shape.slots,
            normal_slots: shape.slots,
            tau: rng.random_range(0.1..0.5),
        };
        let mut params = DarmParams::init(&model, rng.random())?;
        // Non-zero biases so every term is exercised away from symmetric points.
        for t in [
            &mut params.encoder.conv_bias,
            &mut params.head.bias,
            &mut params.disc.b1,
            &mut params.disc.b2,
        ] {
            for x in t.data_mut() {
                *x = rng.random_range(-0.3..0.3);
            }
        }
        let weights = LossWeights {
            lambda1: rng.random_range(0.5..2.0),
            lambda2: rng.random_range(0.05..1.0),
            lambda_da: rng.random_range(0.05..1.0),
            lambda_dist: rng.random_range(0.005..0.2),
            beta: rng.random_range(0.5..2.0),
            epsilon: 1e-6,
            topk: rng.random_range(1..=3),
        };
        let mut videos = |n| -> Vec<Tensor> {
            (0..n)
                .map(|_| normal_tensor(&mut rng, shape.rows, shape.input_dim, 1.0))
                .collect()
        };
        let b = shape.videos_per_stream;
        let batch = Batch {
            pseudo_abnormal: videos(b),
            real_normal: videos(b),
            pseudo_normal: videos(b),
        };
        let (_, _, loss) = batch_loss(&params, &batch, &weights, model.tau, None)?;
        Ok(Self {
            model,
            params,
            batch,
            weights,
            frozen: loss.stats,
        })
    }

    /// Objective values with the adversarial part split out:
    /// `[mil_rank, mil_cls, da − adv, adv, upd, total − λ₁·adv, λ₁·adv]`.
    fn values(&self, params: &DarmParams) -> Result<[f64; 7]> {
        let (g, _, loss) = batch_loss(params, &self.batch, &self.weights, self.model.tau, Some(&self.frozen))?;
        let da = loss.da.expect("pseudo-normal stream present");
        let adv = g.item(da.adversarial);
        let total = g.item(loss.total);
        let l1 = self.weights.lambda1;
        Ok([
            g.item(loss.mil_rank),
            g.item(loss.mil_cls),
            g.item(da.total) - adv,
            adv,
            g.item(loss.upd),
            total - l1 * adv,
            l1 * adv,
        ])
    }

    /// Analytic gradients of `term` for every parameter tensor.
    pub fn analytic(&self, term: Term) -> Result<Vec<Vec<f64>>> {
        let (mut g, vars, loss) = batch_loss(
            &self.params,
            &self.batch,
            &self.weights,
            self.model.tau,
            Some(&self.frozen),
        )?;
        let root = match term {
            Term::MilRank => loss.mil_rank,
            Term::MilCls => loss.mil_cls,
            Term::DomainAlignment => loss.da.expect("pseudo-normal stream present").total,
            Term::UsageUpdate => loss.upd,
            Term::Total => loss.total,
        };
        g.backward(root)?;
        Ok(collect_grads(&g, &vars, &self.params))
    }

    /// Central-difference gradients of all value components, per parameter tensor.
    fn numeric(&self) -> Result<Vec<Vec<[f64; 7]>>> {
        let mut p = self.params.clone();
        let h = FD_STEP;
        let mut out = Vec::with_capacity(PARAM_NAMES.len());
        for ti in 0..PARAM_NAMES.len() {
            let n = p.tensors()[ti].numel();
            let mut per = Vec::with_capacity(n);
            for i in 0..n {
                let orig = p.tensors()[ti].data()[i];
                p.tensors_mut()[ti].data_mut()[i] = orig + h;
                let up = self.values(&p)?;
                p.tensors_mut()[ti].data_mut()[i] = orig - h;
                let down = self.values(&p)?;
                p.tensors_mut()[ti].data_mut()[i] = orig;
                let mut d = [0.0; 7];
                for j in 0..7 {
                    d[j] = (up[j] - down[j]) / (2.0 * h);
                }
                per.push(d);
            }
            out.push(per);
        }
        Ok(out)
    }

    /// Max relative error per term and the parameter tensor where it occurs.
    pub fn check(&self) -> Result<Vec<(Term, f64, &'static str)>> {
        let numeric = self.numeric()?;
        let mut out = Vec::new();
        for term in Term::ALL {
            let analytic = self.analytic(term)?;
            let mut worst = (0.0, PARAM_NAMES[0]);
            for (ti, name) in PARAM_NAMES.iter().enumerate() {
                let sign = if name.starts_with("encoder.") {
                    -self.weights.lambda_da
                } else {
                    1.0
                };
                let expected: Vec<f64> = numeric[ti]
                    .iter()
                    .map(|d| match term {
                        Term::MilRank => d[0],
                        Term::MilCls => d[1],
                        Term::DomainAlignment => d[2] + sign * d[3],
                        Term::UsageUpdate => d[4],
                        Term::Total => d[5] + sign * d[6],
                    })
                    .collect();
                let err = relative_error(&analytic[ti], &expected);
                if err > worst.0 {
                    worst = (err, name);
                }
            }
            out.push((term, worst.0, worst.1));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TermReport {
    pub term: Term,
    pub max_rel_error: f64,
    pub worst_param: &'static str,
    pub worst_config: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub configs: usize,
    pub tolerance: f64,
    pub elapsed_s: f64,
    pub terms: Vec<TermReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.terms.iter().all(|t| t.max_rel_error <= self.tolerance)
    }
}

/// Runs `configs` random problems seeded from `seed` and keeps the worst error per term.
pub fn run_suite(shape: &GradCheckShape, configs: usize, seed: u64) -> Result<GradCheckReport> {
    let start = Instant::now();
    let mut terms: Vec<TermReport> = Term::ALL
        .iter()
        .map(|&term| TermReport {
            term,
            max_rel_error: 0.0,
            worst_param: PARAM_NAMES[0],
            worst_config: 0,
        })
        .collect();
    for c in 0..configs {
        let problem = Problem::random(shape, seed.wrapping_add(c as u64))?;
        for (report, (_, err, name)) in terms.iter_mut().zip(problem.check()?) {
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = name;
                report.worst_config = c;
            }
        }
    }
    Ok(GradCheckReport {
        configs,
        tolerance: TOLERANCE,
        elapsed_s: start.elapsed().as_secs_f64(),
        terms,
    })
}

/// Largest absolute deviation between the encoder-side gradient of the
/// adversarial term and `−λ_da` times the same gradient with reversal removed.
pub fn grl_contract(lambda_da: f64, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = ModelConfig {
        input_dim: 8,
        embed_dim: 8,
        heads: 2,
        abnormal_slots: 4,
        normal_slots: 4,
        tau: 0.1,
    };
    let params = DarmParams::init(&model, rng.random())?;
    let w = LossWeights {
        lambda_da,
        ..LossWeights::default()
    };
    let real = normal_tensor(&mut rng, 1, 8, 1.0);
    let pseudo = normal_tensor(&mut rng, 1, 8, 1.0);
    let grads = |reverse: bool| -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::new();
        let vars = params.bind(&mut g, true);
        let r = g.param(real.clone());
        let p = g.param(pseudo.clone());
        let da = if reverse {
            domain_alignment_loss(&mut g, r, p, &vars.disc, &w)?
        } else {
            domain_alignment_loss_without_reversal(&mut g, r, p, &vars.disc, &w)?
        };
        g.backward(da.adversarial)?;
        let mut both = g.grad(r).unwrap().to_vec();
        both.extend_from_slice(g.grad(p).unwrap());
        let disc: Vec<f64> = [vars.disc.w1, vars.disc.b1, vars.disc.w2, vars.disc.b2]
            .iter()
            .flat_map(|&v| g.grad(v).unwrap().to_vec())
            .collect();
        Ok((both, disc))
    };
    let (rev, disc_rev) = grads(true)?;
    let (plain, disc_plain) = grads(false)?;
    let mut worst: f64 = 0.0;
    for (a, b) in rev.iter().zip(&plain) {
        worst = worst.max((a - (-lambda_da * b)).abs());
    }
    // Discriminator parameters are downstream of the reversal and unaffected.
    for (a, b) in disc_rev.iter().zip(&disc_plain) {
        worst = worst.max((a - b).abs());
    }
    Ok(worst)
}
