//! Three-branch answer model with counterfactual debiasing.
//!
//! Factual scores fuse three heads over the question encoding `q`, image
//! encoding `v` and fused knowledge `k`:
//!
//! ```text
//! TE  = h(Z_q(q),  Z_v(v),  Z_k(k))                      biased prediction
//! NDE = h(Z_q(q),  Z_v(v*), Z_k(fuse(q*, v*)))           question-only prediction
//! TIE = TE − NDE                                         debiased prediction
//! ```
//!
//! `q*` and `v*` are learnable vectors standing in for absent inputs, so the
//! counterfactual branch keeps only what the question alone implies. With
//! `h = SUM` the `Z_q` terms cancel exactly in `TIE`.

mod model;

pub use model::{CausalModel, Checkpoint, EncodedSample, ForwardNodes, ModelConfig};

use serde::Serialize;

use crate::encoders::{init_uniform, Linear};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{ParamId, ParamStore, Tape, Var};

/// Logit fusion `h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    /// `Z_k + Z_q + Z_v`
    #[default]
    Sum,
    /// `log(σ(Z_k)·σ(Z_q)·σ(Z_v))`
    Hm,
}

impl std::str::FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sum" => Ok(Fusion::Sum),
            "hm" => Ok(Fusion::Hm),
            other => Err(Error::Config(format!("unknown fusion `{other}` (sum|hm)"))),
        }
    }
}

impl std::fmt::Display for Fusion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Fusion::Sum => "sum",
            Fusion::Hm => "hm",
        })
    }
}

/// Which shortcut the counterfactual branch isolates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BiasSource {
    /// Keep factual `Z_q`; replace vision and knowledge.
    #[default]
    Question,
    /// Keep factual `Z_v`; replace question and knowledge.
    Vision,
}

impl std::str::FromStr for BiasSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "question" | "q" => Ok(BiasSource::Question),
            "vision" | "v" | "image" => Ok(BiasSource::Vision),
            other => Err(Error::Config(format!(
                "unknown bias source `{other}` (question|vision)"
            ))),
        }
    }
}

impl std::fmt::Display for BiasSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BiasSource::Question => "question",
            BiasSource::Vision => "vision",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadParams {
    pub question: Linear,
    pub vision: Linear,
    pub knowledge: Linear,
}

impl HeadParams {
    pub fn register(
        store: &mut ParamStore,
        d_q: usize,
        d_v: usize,
        d_k: usize,
        n_answers: usize,
        rng: &mut Rng,
    ) -> Self {
        Self {
            question: Linear::register(store, "head_q", d_q, n_answers, rng),
            vision: Linear::register(store, "head_v", d_v, n_answers, rng),
            knowledge: Linear::register(store, "head_k", d_k, n_answers, rng),
        }
    }

    pub fn lookup(store: &ParamStore) -> Option<Self> {
        Some(Self {
            question: Linear::lookup(store, "head_q")?,
            vision: Linear::lookup(store, "head_v")?,
            knowledge: Linear::lookup(store, "head_k")?,
        })
    }
}

/// Learnable stand-ins `q*`, `v*` for absent inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CounterfactualParams {
    pub q_star: ParamId,
    pub v_star: ParamId,
}

impl CounterfactualParams {
    pub fn register(store: &mut ParamStore, d_q: usize, d_v: usize, rng: &mut Rng) -> Self {
        Self {
            q_star: store.add("q_star", init_uniform(&[d_q], d_q, rng)),
            v_star: store.add("v_star", init_uniform(&[d_v], d_v, rng)),
        }
    }

    pub fn lookup(store: &ParamStore) -> Option<Self> {
        Some(Self {
            q_star: store.id_of("q_star")?,
            v_star: store.id_of("v_star")?,
        })
    }
}

/// Per-answer scores of the three heads, as tape nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BranchLogits {
    pub z_q: Var,
    pub z_v: Var,
    pub z_k: Var,
}

/// `Z_q = head_q(q)`, `Z_v = head_v(v)`, `Z_k = head_k(k)`.
pub fn branch_logits(
    tape: &mut Tape<'_>,
    heads: &HeadParams,
    q: Var,
    v: Var,
    k: Var,
) -> Result<BranchLogits> {
    Ok(BranchLogits {
        z_q: heads.question.forward(tape, q, false)?,
        z_v: heads.vision.forward(tape, v, false)?,
        z_k: heads.knowledge.forward(tape, k, false)?,
    })
}

pub fn fuse_logits(tape: &mut Tape<'_>, b: BranchLogits, fusion: Fusion) -> Result<Var> {
    match fusion {
        Fusion::Sum => {
            let kq = tape.add(b.z_k, b.z_q)?;
            tape.add(kq, b.z_v)
        }
        Fusion::Hm => {
            let sk = tape.sigmoid(b.z_k);
            let sq = tape.sigmoid(b.z_q);
            let sv = tape.sigmoid(b.z_v);
            let p = tape.mul(sk, sq)?;
            let p = tape.mul(p, sv)?;
            Ok(tape.log(p))
        }
    }
}

/// Elementwise `te − nde`.
pub fn debias(te: &[f32], nde: &[f32]) -> Vec<f32> {
    te.iter().zip(nde).map(|(t, n)| t - n).collect()
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f32]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Biased total effect, question-only direct effect and their difference.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CausalScores {
    pub te: Vec<f32>,
    pub nde: Vec<f32>,
    pub tie: Vec<f32>,
}

impl CausalScores {
    pub fn new(te: Vec<f32>, nde: Vec<f32>) -> Self {
        let tie = debias(&te, &nde);
        Self { te, nde, tie }
    }

    pub fn scores(&self, mode: Mode) -> &[f32] {
        match mode {
            Mode::Biased => &self.te,
            Mode::Debiased => &self.tie,
        }
    }
}

/// Prediction mode: conventional fused prediction or counterfactually debiased.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Biased,
    Debiased,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "biased" | "vqa" => Ok(Mode::Biased),
            "debiased" | "cfvqa" => Ok(Mode::Debiased),
            other => Err(Error::Config(format!(
                "unknown mode `{other}` (biased|debiased)"
            ))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Biased => "biased",
            Mode::Debiased => "debiased",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn sum_fusion_additive_identity() {
        let mut t = Tape::new();
        let e1 = t.constant(Tensor::vector(vec![1.0, 0.0, 0.0]));
        let z = t.constant(Tensor::zeros(&[3]));
        let out = fuse_logits(
            &mut t,
            BranchLogits {
                z_q: z,
                z_v: z,
                z_k: e1,
            },
            Fusion::Sum,
        )
        .unwrap();
        assert_eq!(t.value(out), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn hm_fusion_at_zero() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::zeros(&[4]));
        let out = fuse_logits(
            &mut t,
            BranchLogits {
                z_q: z,
                z_v: z,
                z_k: z,
            },
            Fusion::Hm,
        )
        .unwrap();
        for v in t.value(out) {
            assert!((v - (0.125f32).ln()).abs() < 1e-6);
            assert!((v + 2.0794).abs() < 1e-4);
        }
    }

    #[test]
    fn sum_and_hm_agree_when_one_answer_dominates() {
        // answer 2 is largest in every branch; both fusions are monotone per branch
        let mut t = Tape::new();
        let zq = t.constant(Tensor::vector(vec![0.1, -0.4, 1.3, 0.2]));
        let zv = t.constant(Tensor::vector(vec![-0.3, 0.5, 0.9, -1.0]));
        let zk = t.constant(Tensor::vector(vec![0.7, 0.0, 2.1, 0.6]));
        let b = BranchLogits {
            z_q: zq,
            z_v: zv,
            z_k: zk,
        };
        let s = fuse_logits(&mut t, b, Fusion::Sum).unwrap();
        let h = fuse_logits(&mut t, b, Fusion::Hm).unwrap();
        assert_eq!(argmax(t.value(s)), 2);
        assert_eq!(argmax(t.value(h)), 2);
    }

    #[test]
    fn debias_examples() {
        let te = [2.0, 1.0, 0.0];
        assert_eq!(debias(&te, &te), vec![0.0; 3]);
        let s = CausalScores::new(te.to_vec(), vec![1.5, 0.2, 0.0]);
        assert_eq!(s.tie, vec![0.5, 0.8, 0.0]);
        assert_eq!(argmax(s.scores(Mode::Biased)), 0);
        assert_eq!(argmax(s.scores(Mode::Debiased)), 1);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn constant_nde_keeps_argmax() {
        let te = [0.3, 1.7, -0.2, 1.1];
        let s = CausalScores::new(te.to_vec(), vec![2.5; 4]);
        assert_eq!(argmax(&s.te), argmax(&s.tie));
    }
}
