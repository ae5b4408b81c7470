//! Late fusion with global contrastive alignment, plus dual-branch
//! cross-attention maps aligned by a contrastive loss over map cosines.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::encoders::{AttentionPair, CrossAttentionBlock, EncoderError, Linear};
use crate::numerics::{Graph, Params, Rng, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("contrastive batch needs at least 2 items, got {0}")]
    BatchTooSmall(usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("{name} = {value} outside [0, 1]")]
    MixingWeight { name: &'static str, value: f64 },
    #[error("temperature must be positive and finite, got {0}")]
    Temperature(f64),
    #[error("invalid negatives mode {0:?} (expected as_written or in_batch)")]
    Mode(String),
    #[error("reference and target branches disagree: {0}")]
    BranchMismatch(String),
    #[error("every loss term is disabled")]
    NothingToOptimize,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

/// Which similarities populate a contrastive denominator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NegativesMode {
    /// Only matched pairs `s_jj`, exactly as the objective is printed.
    AsWritten,
    /// Row `i` against every column `j` (standard InfoNCE).
    InBatch,
}

impl FromStr for NegativesMode {
    type Err = LossError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "as_written" => Ok(Self::AsWritten),
            "in_batch" => Ok(Self::InBatch),
            other => Err(LossError::Mode(other.to_string())),
        }
    }
}

impl fmt::Display for NegativesMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::AsWritten => "as_written",
            Self::InBatch => "in_batch",
        })
    }
}

pub(crate) fn check_unit_interval(name: &'static str, value: f64) -> Result<(), LossError> {
    if !(0.0..=1.0).contains(&value) {
        return Err(LossError::MixingWeight { name, value });
    }
    Ok(())
}

pub(crate) fn check_tau(tau: f64) -> Result<(), LossError> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(LossError::Temperature(tau));
    }
    Ok(())
}

pub(crate) fn check_batch(b: usize) -> Result<(), LossError> {
    match b {
        0 => Err(LossError::EmptyBatch),
        1 => Err(LossError::BatchTooSmall(1)),
        _ => Ok(()),
    }
}

/// `−mean_i log softmax(row_i / τ)[i]` over a square logit matrix.
pub(crate) fn diagonal_infonce(g: &mut Graph, sims: Var, tau: f64) -> Result<Var, LossError> {
    let b = g.value(sims).rows();
    let logits = g.scale(sims, 1.0 / tau);
    let targets: Vec<usize> = (0..b).collect();
    Ok(g.cross_entropy_rows(logits, &targets)?)
}

/// `−mean_i log(exp(s_i/τ) / Σ_j exp(s_j/τ)) = lse(s/τ) − mean(s/τ)`.
pub(crate) fn matched_infonce(g: &mut Graph, sims: Var, tau: f64) -> Var {
    let z = g.scale(sims, 1.0 / tau);
    let lse = g.log_sum_exp(z);
    let mean = g.mean(z);
    g.sub(lse, mean).expect("scalars")
}

/// Two-layer GELU perceptron `d → hidden → d` applied to fused vectors.
#[derive(Clone, Debug)]
pub struct FusionMlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FusionMlp {
    pub fn new(params: &mut Params, rng: &mut Rng, name: &str, dim: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::new(params, rng, &format!("{name}.fc1"), dim, hidden, true),
            fc2: Linear::new(params, rng, &format!("{name}.fc2"), hidden, dim, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, params: &Params, x: Var) -> Result<Var, TensorError> {
        let h = self.fc1.forward(g, params, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, params, h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionConfig {
    pub lambda1: f64,
    pub tau: f64,
}

impl FusionConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        check_unit_interval("lambda1", self.lambda1)?;
        check_tau(self.tau)
    }
}

/// Convex combination `λ1·img + (1 − λ1)·txt`.
pub fn fuse(g: &mut Graph, img_pooled: Var, txt_pooled: Var, lambda1: f64) -> Result<Var, LossError> {
    check_unit_interval("lambda1", lambda1)?;
    let a = g.scale(img_pooled, lambda1);
    let b = g.scale(txt_pooled, 1.0 - lambda1);
    Ok(g.add(a, b)?)
}

/// Global late-fusion contrastive loss over cosine similarities between the
/// projected fused rows `[B×d]` and target rows `[B×d]`, in-batch negatives.
pub fn loss_late(g: &mut Graph, projected: Var, targets: Var, tau: f64) -> Result<Var, LossError> {
    check_tau(tau)?;
    check_batch(g.value(projected).rows())?;
    let p = g.normalize_rows(projected)?;
    let v = g.normalize_rows(targets)?;
    let sims = g.matmul_nt(p, v)?;
    diagonal_infonce(g, sims, tau)
}

/// Reference and target maps against the same text features through one
/// shared block.
pub fn attention_pair(
    g: &mut Graph,
    params: &Params,
    block: &CrossAttentionBlock,
    ref_regions: Var,
    tgt_regions: Var,
    text_feats: Var,
) -> Result<AttentionPair, LossError> {
    let (r, t) = (g.value(ref_regions).shape(), g.value(tgt_regions).shape());
    if r != t {
        return Err(LossError::BranchMismatch(format!("regions {r:?} vs {t:?}")));
    }
    let reference = block.forward(g, params, ref_regions, text_feats)?.map;
    let target = block.forward(g, params, tgt_regions, text_feats)?.map;
    Ok(AttentionPair { reference, target })
}

/// Contrastive alignment of reference/target attention maps, compared by
/// the cosine of the flattened maps.
pub fn loss_attention(g: &mut Graph, pairs: &[AttentionPair], tau: f64, mode: NegativesMode) -> Result<Var, LossError> {
    check_tau(tau)?;
    check_batch(pairs.len())?;
    let shape = g.value(pairs[0].reference).shape().to_vec();
    for p in pairs {
        if g.value(p.reference).shape() != shape.as_slice() || g.value(p.target).shape() != shape.as_slice() {
            return Err(LossError::BranchMismatch("attention maps differ in shape".into()));
        }
    }
    match mode {
        NegativesMode::AsWritten => {
            let mut sims = Vec::with_capacity(pairs.len());
            for p in pairs {
                sims.push(g.cosine(p.reference, p.target)?);
            }
            let s = g.stack(&sims)?;
            Ok(matched_infonce(g, s, tau))
        }
        NegativesMode::InBatch => {
            let n: usize = shape.iter().product();
            let mut refs = Vec::with_capacity(pairs.len());
            let mut tgts = Vec::with_capacity(pairs.len());
            for p in pairs {
                refs.push(g.reshape(p.reference, &[1, n])?);
                tgts.push(g.reshape(p.target, &[1, n])?);
            }
            let r = g.concat_rows(&refs)?;
            let t = g.concat_rows(&tgts)?;
            let r = g.normalize_rows(r)?;
            let t = g.normalize_rows(t)?;
            let sims = g.matmul_nt(r, t)?;
            diagonal_infonce(g, sims, tau)
        }
    }
}

/// Enabled ESAM terms and their sum.
#[derive(Clone, Copy, Debug)]
pub struct EsamTerms {
    pub late: Option<Var>,
    pub attention: Option<Var>,
}

/// `L_late + L_attention` over whichever terms are present.
pub fn loss_esam(g: &mut Graph, terms: EsamTerms) -> Result<Option<Var>, LossError> {
    sum_terms(g, &[terms.late, terms.attention])
}

pub(crate) fn sum_terms(g: &mut Graph, terms: &[Option<Var>]) -> Result<Option<Var>, LossError> {
    let mut acc: Option<Var> = None;
    for t in terms.iter().flatten() {
        acc = Some(match acc {
            None => *t,
            Some(a) => g.add(a, *t)?,
        });
    }
    Ok(acc)
}
