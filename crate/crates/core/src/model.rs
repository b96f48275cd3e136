//! The detector: temporal encoder, dual memory banks, score head and domain
//! discriminator.
//!
//! Parameters live outside any [`Graph`]; each forward pass binds them as
//! leaves with [`DarmParams::bind`] so that one graph corresponds to one step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub abnormal_slots: usize,
    pub normal_slots: usize,
    /// Temperature of the slot assignment softmax.
    pub tau: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_dim == 0 || self.embed_dim == 0 {
            return bad("input_dim and embed_dim must be positive".into());
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "embed_dim {} must be divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.embed_dim < 2 {
            return bad("embed_dim must be at least 2 for the discriminator".into());
        }
        if self.abnormal_slots == 0 || self.normal_slots == 0 {
            return bad("memory banks need at least one slot".into());
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        Ok(())
    }

    pub fn disc_hidden(&self) -> usize {
        (self.embed_dim / 2).max(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BankRole {
    Abnormal,
    Normal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    /// `[d, D, 3]`
    pub conv_weight: Tensor,
    pub conv_bias: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub heads: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    pub slots: Tensor,
    pub role: BankRole,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreHeadParams {
    /// `[1, 2d]`
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Two-layer perceptron `d → d/2 → 1` with relu and a sigmoid output.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DarmParams {
    pub encoder: EncoderParams,
    pub abnormal: MemoryBank,
    pub normal: MemoryBank,
    pub head: ScoreHeadParams,
    pub disc: DiscriminatorParams,
}

pub const PARAM_NAMES: [&str; 14] = [
    "encoder.conv.weight",
    "encoder.conv.bias",
    "encoder.attn.wq",
    "encoder.attn.wk",
    "encoder.attn.wv",
    "encoder.attn.wo",
    "memory.abnormal",
    "memory.normal",
    "head.weight",
    "head.bias",
    "disc.w1",
    "disc.b1",
    "disc.w2",
    "disc.b2",
];

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn init_slots(rng: &mut ChaCha8Rng, k: usize, d: usize) -> Tensor {
    let bound = 1.0 / (d as f64).sqrt();
    let mut data = Vec::with_capacity(k * d);
    for _ in 0..k {
        loop {
            let row: Vec<f64> = (0..d).map(|_| rng.random_range(-bound..bound)).collect();
            if row.iter().map(|v| v * v).sum::<f64>() > 1e-12 {
                data.extend(row);
                break;
            }
        }
    }
    Tensor::matrix(k, d, data).unwrap()
}

impl DarmParams {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d_in, d, h) = (cfg.input_dim, cfg.embed_dim, cfg.disc_hidden());
        let conv_bound = 1.0 / ((3 * d_in) as f64).sqrt();
        let proj = 1.0 / (d as f64).sqrt();
        let encoder = EncoderParams {
            conv_weight: uniform(&mut rng, &[d, d_in, 3], conv_bound),
            conv_bias: Tensor::zeros(&[d]),
            wq: uniform(&mut rng, &[d, d], proj),
            wk: uniform(&mut rng, &[d, d], proj),
            wv: uniform(&mut rng, &[d, d], proj),
            wo: uniform(&mut rng, &[d, d], proj),
            heads: cfg.heads,
        };
        let abnormal = MemoryBank {
            slots: init_slots(&mut rng, cfg.abnormal_slots, d),
            role: BankRole::Abnormal,
        };
        let normal = MemoryBank {
            slots: init_slots(&mut rng, cfg.normal_slots, d),
            role: BankRole::Normal,
        };
        let head = ScoreHeadParams {
            weight: uniform(&mut rng, &[1, 2 * d], 1.0 / ((2 * d) as f64).sqrt()),
            bias: Tensor::zeros(&[1]),
        };
        let disc = DiscriminatorParams {
            w1: uniform(&mut rng, &[d, h], proj),
            b1: Tensor::zeros(&[h]),
            w2: uniform(&mut rng, &[h, 1], 1.0 / (h as f64).sqrt()),
            b2: Tensor::zeros(&[1]),
        };
        Ok(Self {
            encoder,
            abnormal,
            normal,
            head,
            disc,
        })
    }

    /// Tensors in [`PARAM_NAMES`] order.
    pub fn tensors(&self) -> [&Tensor; 14] {
        let e = &self.encoder;
        [
            &e.conv_weight,
            &e.conv_bias,
            &e.wq,
            &e.wk,
            &e.wv,
            &e.wo,
            &self.abnormal.slots,
            &self.normal.slots,
            &self.head.weight,
            &self.head.bias,
            &self.disc.w1,
            &self.disc.b1,
            &self.disc.w2,
            &self.disc.b2,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 14] {
        let e = &mut self.encoder;
        [
            &mut e.conv_weight,
            &mut e.conv_bias,
            &mut e.wq,
            &mut e.wk,
            &mut e.wv,
            &mut e.wo,
            &mut self.abnormal.slots,
            &mut self.normal.slots,
            &mut self.head.weight,
            &mut self.head.bias,
            &mut self.disc.w1,
            &mut self.disc.b1,
            &mut self.disc.w2,
            &mut self.disc.b2,
        ]
    }

    pub fn named(&self) -> impl Iterator<Item = (&'static str, &Tensor)> {
        PARAM_NAMES.into_iter().zip(self.tensors())
    }

    /// Expected shapes for `cfg`, in [`PARAM_NAMES`] order.
    pub fn expected_shapes(cfg: &ModelConfig) -> [Vec<usize>; 14] {
        let (d_in, d, h) = (cfg.input_dim, cfg.embed_dim, cfg.disc_hidden());
        [
            vec![d, d_in, 3],
            vec![d],
            vec![d, d],
            vec![d, d],
            vec![d, d],
            vec![d, d],
            vec![cfg.abnormal_slots, d],
            vec![cfg.normal_slots, d],
            vec![1, 2 * d],
            vec![1],
            vec![d, h],
            vec![h],
            vec![h, 1],
            vec![1],
        ]
    }

    /// Rebuilds parameters from tensors in [`PARAM_NAMES`] order.
    pub fn from_tensors(cfg: &ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        cfg.validate()?;
        let shapes = Self::expected_shapes(cfg);
        if tensors.len() != shapes.len() {
            return Err(Error::Config(format!("expected {} tensors", shapes.len())));
        }
        for ((t, s), name) in tensors.iter().zip(&shapes).zip(PARAM_NAMES) {
            if t.shape() != s.as_slice() {
                return Err(Error::shape(
                    "checkpoint",
                    format!("{name}: expected {s:?}, got {:?}", t.shape()),
                ));
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().unwrap();
        Ok(Self {
            encoder: EncoderParams {
                conv_weight: next(),
                conv_bias: next(),
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
                heads: cfg.heads,
            },
            abnormal: MemoryBank {
                slots: next(),
                role: BankRole::Abnormal,
            },
            normal: MemoryBank {
                slots: next(),
                role: BankRole::Normal,
            },
            head: ScoreHeadParams {
                weight: next(),
                bias: next(),
            },
            disc: DiscriminatorParams {
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
            },
        })
    }

    /// Adds every tensor to `g`, as differentiable leaves when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> DarmVars {
        let vars: Vec<Var> = self
            .tensors()
            .into_iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        DarmVars {
            encoder: EncoderVars {
                conv_weight: vars[0],
                conv_bias: vars[1],
                wq: vars[2],
                wk: vars[3],
                wv: vars[4],
                wo: vars[5],
                heads: self.encoder.heads,
            },
            abnormal: vars[6],
            normal: vars[7],
            head: HeadVars {
                weight: vars[8],
                bias: vars[9],
            },
            disc: DiscVars {
                w1: vars[10],
                b1: vars[11],
                w2: vars[12],
                b2: vars[13],
            },
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub conv_weight: Var,
    pub conv_bias: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub heads: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct DiscVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct DarmVars {
    pub encoder: EncoderVars,
    pub abnormal: Var,
    pub normal: Var,
    pub head: HeadVars,
    pub disc: DiscVars,
}

impl DarmVars {
    /// Vars in [`PARAM_NAMES`] order.
    pub fn all(&self) -> [Var; 14] {
        let e = &self.encoder;
        [
            e.conv_weight,
            e.conv_bias,
            e.wq,
            e.wk,
            e.wv,
            e.wo,
            self.abnormal,
            self.normal,
            self.head.weight,
            self.head.bias,
            self.disc.w1,
            self.disc.b1,
            self.disc.w2,
            self.disc.b2,
        ]
    }
}

/// `f̃ = c + MHA(c)` with `c = Conv1dSame(f)`.
pub fn encode(g: &mut Graph, features: Var, enc: &EncoderVars) -> Result<Var> {
    let c = g.conv1d_same(features, enc.conv_weight, enc.conv_bias)?;
    let q = g.matmul(c, enc.wq)?;
    let k = g.matmul(c, enc.wk)?;
    let v = g.matmul(c, enc.wv)?;
    let a = g.attention(q, k, v, enc.heads)?;
    let o = g.matmul(a, enc.wo)?;
    g.add(c, o)
}

/// Attention read of a memory bank: `softmax(f̃ Mᵀ / √d) M`.
pub fn memory_read(g: &mut Graph, f_tilde: Var, slots: Var) -> Result<Var> {
    let d = g.value(f_tilde).cols();
    if g.value(slots).cols() != d {
        return Err(Error::shape(
            "memory_read",
            format!("features d={d}, slots d={}", g.value(slots).cols()),
        ));
    }
    let mt = g.transpose(slots)?;
    let logits = g.matmul(f_tilde, mt)?;
    let logits = g.scale(logits, 1.0 / (d as f64).sqrt());
    let attn = g.softmax(logits)?;
    g.matmul(attn, slots)
}

/// Per-row anomaly score `σ(W [f̃ ; h_A + h_N] + b)`, returned as T×1.
pub fn score(g: &mut Graph, f_tilde: Var, h_abn: Var, h_norm: Var, head: &HeadVars) -> Result<Var> {
    let h = g.add(h_abn, h_norm)?;
    let cat = g.concat_cols(f_tilde, h)?;
    let wt = g.transpose(head.weight)?;
    let z = g.matmul(cat, wt)?;
    let z = g.add(z, head.bias)?;
    Ok(g.sigmoid(z))
}

/// Soft assignments `Q = softmax(Z̄ M̄ᵀ / τ)` and usage `u = mean_rows(Q)`.
pub fn assignments_and_usage(g: &mut Graph, z: Var, slots: Var, tau: f64) -> Result<(Var, Var)> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    if g.value(z).cols() != g.value(slots).cols() {
        return Err(Error::shape("assignments", "feature and slot dims differ"));
    }
    let zn = g.row_l2_normalize(z);
    let mn = g.row_l2_normalize(slots);
    let mt = g.transpose(mn)?;
    let logits = g.matmul(zn, mt)?;
    let logits = g.scale(logits, 1.0 / tau);
    let q = g.softmax(logits)?;
    let u = g.mean_axis(q, 0)?;
    Ok((q, u))
}

pub fn discriminate(g: &mut Graph, f_bar: Var, disc: &DiscVars) -> Result<Var> {
    let h = g.matmul(f_bar, disc.w1)?;
    let h = g.add(h, disc.b1)?;
    let h = g.relu(h);
    let o = g.matmul(h, disc.w2)?;
    let o = g.add(o, disc.b2)?;
    Ok(g.sigmoid(o))
}

/// Embedding and scores of one video, both as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct VideoForward {
    pub embedding: Var,
    pub scores: Var,
}

pub fn forward_video(g: &mut Graph, vars: &DarmVars, features: Var) -> Result<VideoForward> {
    let f = encode(g, features, &vars.encoder)?;
    let ha = memory_read(g, f, vars.abnormal)?;
    let hn = memory_read(g, f, vars.normal)?;
    let scores = score(g, f, ha, hn, &vars.head)?;
    Ok(VideoForward { embedding: f, scores })
}

/// Inference-only row scores for one T×D feature matrix.
pub fn score_video(params: &DarmParams, features: &Tensor) -> Result<Vec<f64>> {
    let expected = params.encoder.conv_weight.shape()[1];
    if features.cols() != expected {
        return Err(Error::shape(
            "score_video",
            format!("features have D={}, model expects {expected}", features.cols()),
        ));
    }
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let x = g.constant(features.clone());
    let out = forward_video(&mut g, &vars, x)?;
    Ok(g.value(out.scores).data().to_vec())
}

/// Embeddings `f̃` for one video without gradients.
pub fn embed_video(params: &DarmParams, features: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let x = g.constant(features.clone());
    let f = encode(&mut g, x, &vars.encoder)?;
    Ok(g.value(f).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            input_dim: 16,
            embed_dim: 8,
            heads: 2,
            abnormal_slots: 4,
            normal_slots: 3,
            tau: 0.1,
        }
    }

    #[test]
    fn init_is_deterministic_and_well_shaped() {
        let a = DarmParams::init(&cfg(), 7).unwrap();
        let b = DarmParams::init(&cfg(), 7).unwrap();
        assert_eq!(a, b);
        for (t, s) in a.tensors().iter().zip(DarmParams::expected_shapes(&cfg())) {
            assert_eq!(t.shape(), s.as_slice());
        }
        for r in 0..4 {
            assert!(a.abnormal.slots.row(r).iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn heads_must_divide_dim() {
        let mut c = cfg();
        c.heads = 3;
        assert!(DarmParams::init(&c, 0).is_err());
    }

    #[test]
    fn single_slot_read_returns_the_slot() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::matrix(3, 2, vec![1.0, 2.0, -3.0, 0.5, 0.0, 0.0]).unwrap());
        let m = g.constant(Tensor::matrix(1, 2, vec![0.7, -0.2]).unwrap());
        let h = memory_read(&mut g, f, m).unwrap();
        for r in 0..3 {
            assert_eq!(g.value(h).row(r), &[0.7, -0.2]);
        }
    }

    #[test]
    fn orthogonal_read_is_slot_mean() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::matrix(1, 3, vec![0.0, 0.0, 2.0]).unwrap());
        let m = g.constant(Tensor::matrix(2, 3, vec![1.0, 0.0, 0.0, 0.0, 3.0, 0.0]).unwrap());
        let h = memory_read(&mut g, f, m).unwrap();
        assert_eq!(g.value(h).data(), &[0.5, 1.5, 0.0]);
    }

    #[test]
    fn two_slot_read_matches_hand_softmax() {
        // logits = [1·1, 1·0]/√2 → weights (0.6698, 0.3302)
        let mut g = Graph::new();
        let f = g.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let m = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let h = memory_read(&mut g, f, m).unwrap();
        let out = g.value(h).data();
        assert!((out[0] - 0.670).abs() < 5e-4, "{out:?}");
        assert!((out[1] - 0.330).abs() < 5e-4, "{out:?}");
    }

    #[test]
    fn zero_head_scores_half() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let h = g.constant(Tensor::matrix(2, 2, vec![0.1; 4]).unwrap());
        let head = HeadVars {
            weight: g.constant(Tensor::zeros(&[1, 4])),
            bias: g.constant(Tensor::zeros(&[1])),
        };
        let s = score(&mut g, f, h, h, &head).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
        let head = HeadVars {
            weight: head.weight,
            bias: g.constant(Tensor::scalar(20.0)),
        };
        let s = score(&mut g, f, h, h, &head).unwrap();
        assert!(g.value(s).data().iter().all(|v| (1.0 - 1e-8..1.0).contains(v)));
    }

    #[test]
    fn score_matches_hand_dot_product() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::matrix(1, 2, vec![0.5, -1.0]).unwrap());
        let ha = g.constant(Tensor::matrix(1, 2, vec![0.2, 0.1]).unwrap());
        let hn = g.constant(Tensor::matrix(1, 2, vec![0.1, 0.3]).unwrap());
        let head = HeadVars {
            weight: g.constant(Tensor::matrix(1, 4, vec![1.0, 0.5, -2.0, 1.0]).unwrap()),
            bias: g.constant(Tensor::scalar(0.1)),
        };
        let s = score(&mut g, f, ha, hn, &head).unwrap();
        // 0.5 − 0.5 − 0.6 + 0.4 + 0.1 = −0.1
        let expected = 1.0 / (1.0 + 0.1f64.exp());
        assert!((g.value(s).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_input_zero_output() {
        let mut p = DarmParams::init(&cfg(), 1).unwrap();
        p.encoder.conv_bias = Tensor::zeros(&[8]);
        let out = embed_video(&p, &Tensor::zeros(&[5, 16])).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_attention_is_value_projection() {
        let p = DarmParams::init(&cfg(), 3).unwrap();
        let x = Tensor::matrix(1, 16, (0..16).map(|i| i as f64 * 0.1 - 0.7).collect()).unwrap();
        let out = embed_video(&p, &x).unwrap();
        let mut g = Graph::new();
        let vars = p.bind(&mut g, false);
        let xv = g.constant(x);
        let c = g
            .conv1d_same(xv, vars.encoder.conv_weight, vars.encoder.conv_bias)
            .unwrap();
        let v = g.matmul(c, vars.encoder.wv).unwrap();
        let o = g.matmul(v, vars.encoder.wo).unwrap();
        let expected = g.add(c, o).unwrap();
        for (a, b) in out.data().iter().zip(g.value(expected).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_discriminator_is_half_and_bias_monotone() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::matrix(1, 4, vec![1.0, -2.0, 0.3, 4.0]).unwrap());
        let disc = DiscVars {
            w1: g.constant(Tensor::zeros(&[4, 2])),
            b1: g.constant(Tensor::zeros(&[2])),
            w2: g.constant(Tensor::zeros(&[2, 1])),
            b2: g.constant(Tensor::zeros(&[1])),
        };
        let p = discriminate(&mut g, f, &disc).unwrap();
        assert_eq!(g.value(p).item(), 0.5);
        let mut last = 0.0;
        for b in [-1.0, 0.0, 0.5, 2.0] {
            let d2 = DiscVars {
                b2: g.constant(Tensor::scalar(b)),
                ..disc
            };
            let p = discriminate(&mut g, f, &d2).unwrap();
            assert!(g.value(p).item() > last);
            last = g.value(p).item();
        }
    }

    #[test]
    fn assignment_errors() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let m = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        assert!(assignments_and_usage(&mut g, z, m, 0.0).is_err());
        assert!(assignments_and_usage(&mut g, z, m, -1.0).is_err());
        let (q, _) = assignments_and_usage(&mut g, z, m, 1.0).unwrap();
        let e1 = 1f64.exp();
        assert!((g.value(q).get(0, 0) - e1 / (e1 + 1.0)).abs() < 1e-9);
    }
}
