//! Early-fusion retrieval objectives: uncertainty-perturbed targets mixed
//! into a resilience loss, and prompt-to-image alignment.
//!
//! The perturbation `v̂ = α⊙v + β` draws `α ~ N(1, σ_t)` and
//! `β ~ N(μ_t, σ_t)` per entry, where `(μ_t, σ_t)` are scalar statistics of
//! the target embeddings. Noise enters the tape as constants.

use std::fmt;
use std::str::FromStr;

use crate::encoders::TextEncoder;
use crate::esam::{check_batch, check_tau, check_unit_interval, diagonal_infonce, matched_infonce, sum_terms};
use crate::numerics::{Graph, Params, Rng, Tensor, Var};

pub use crate::esam::{LossError, NegativesMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StatsMode {
    PerBatch,
    Running,
}

impl FromStr for StatsMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "per_batch" => Ok(Self::PerBatch),
            "running" => Ok(Self::Running),
            other => Err(format!("invalid stats mode {other:?} (expected per_batch or running)")),
        }
    }
}

impl fmt::Display for StatsMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PerBatch => "per_batch",
            Self::Running => "running",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerturbationConfig {
    pub lambda2: f64,
    pub stats_mode: StatsMode,
    pub rng_stream_id: u64,
}

impl PerturbationConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        check_unit_interval("lambda2", self.lambda2)
    }
}

/// Scalar mean and population standard deviation of target entries.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TargetStats {
    pub mean: f64,
    pub std: f64,
}

pub fn estimate_target_stats(v: &Tensor) -> Result<TargetStats, LossError> {
    let n = v.numel() as f64;
    if v.numel() == 0 {
        return Err(LossError::EmptyBatch);
    }
    let mean = v.data().iter().sum::<f64>() / n;
    let var = v.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Ok(TargetStats {
        mean,
        std: var.sqrt(),
    })
}

/// Exponential moving average of per-batch statistics (momentum 0.9).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RunningStats {
    pub current: Option<TargetStats>,
}

impl RunningStats {
    pub const MOMENTUM: f64 = 0.9;

    pub fn update(&mut self, batch: TargetStats) -> TargetStats {
        let next = match self.current {
            None => batch,
            Some(prev) => TargetStats {
                mean: Self::MOMENTUM * prev.mean + (1.0 - Self::MOMENTUM) * batch.mean,
                std: Self::MOMENTUM * prev.std + (1.0 - Self::MOMENTUM) * batch.std,
            },
        };
        self.current = Some(next);
        next
    }
}

/// Multiplicative and additive noise, each shaped like the targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Noise {
    pub alpha: Tensor,
    pub beta: Tensor,
}

/// Draws every α first, then every β, in row-major order.
pub fn sample_noise(shape: &[usize], stats: TargetStats, rng: &mut Rng) -> Noise {
    let n: usize = shape.iter().product();
    let alpha: Vec<f64> = (0..n).map(|_| rng.normal(1.0, stats.std)).collect();
    let beta: Vec<f64> = (0..n).map(|_| rng.normal(stats.mean, stats.std)).collect();
    Noise {
        alpha: Tensor::new(shape.to_vec(), alpha).expect("shape"),
        beta: Tensor::new(shape.to_vec(), beta).expect("shape"),
    }
}

/// `α⊙v + β` on plain values.
pub fn perturb(v: &Tensor, stats: TargetStats, rng: &mut Rng) -> Tensor {
    let noise = sample_noise(v.shape(), stats, rng);
    apply_noise(v, &noise)
}

pub fn apply_noise(v: &Tensor, noise: &Noise) -> Tensor {
    let data = v
        .data()
        .iter()
        .zip(noise.alpha.data())
        .zip(noise.beta.data())
        .map(|((x, a), b)| a * x + b)
        .collect();
    Tensor::new(v.shape().to_vec(), data).expect("shape")
}

/// `α⊙v + β` on the tape; gradients reach `v` through `α` only.
pub fn perturb_var(g: &mut Graph, v: Var, noise: &Noise) -> Result<Var, LossError> {
    let alpha = g.constant(noise.alpha.clone());
    let beta = g.constant(noise.beta.clone());
    let scaled = g.mul(v, alpha)?;
    Ok(g.add(scaled, beta)?)
}

/// Dot-product contrastive objective between `u` and `v★` rows.
///
/// `InBatch`: row `i` scored against every `v★_j`. `AsWritten`: the
/// denominator sums `exp(u_jᵀv★_j / τ)` over matched pairs only.
pub fn retrieval_loss(g: &mut Graph, u: Var, v_star: Var, tau: f64, mode: NegativesMode) -> Result<Var, LossError> {
    check_tau(tau)?;
    check_batch(g.value(u).rows())?;
    let sims = g.matmul_nt(u, v_star)?;
    match mode {
        NegativesMode::InBatch => diagonal_infonce(g, sims, tau),
        NegativesMode::AsWritten => {
            let d = g.diag(sims)?;
            Ok(matched_infonce(g, d, tau))
        }
    }
}

/// `λ2·L(u, v) + (1 − λ2)·L(u, v̂)`.
pub fn loss_res(
    g: &mut Graph,
    u: Var,
    v: Var,
    v_hat: Var,
    tau: f64,
    lambda2: f64,
    mode: NegativesMode,
) -> Result<Var, LossError> {
    check_unit_interval("lambda2", lambda2)?;
    let early = retrieval_loss(g, u, v, tau, mode)?;
    let uncertain = retrieval_loss(g, u, v_hat, tau, mode)?;
    let a = g.scale(early, lambda2);
    let b = g.scale(uncertain, 1.0 - lambda2);
    Ok(g.add(a, b)?)
}

/// Pooled text-encoder output for `[prompt ; tokens]`, unit norm.
pub fn prompt_embed(
    g: &mut Graph,
    params: &Params,
    text: &TextEncoder,
    prompt: Var,
    tokens: &[usize],
) -> Result<Var, LossError> {
    Ok(text.encode_with_prompt(g, params, prompt, tokens)?.pooled)
}

pub fn loss_pi(g: &mut Graph, u_prime: Var, v: Var, tau: f64, mode: NegativesMode) -> Result<Var, LossError> {
    retrieval_loss(g, u_prime, v, tau, mode)
}

#[derive(Clone, Copy, Debug)]
pub struct ArmTerms {
    pub res: Option<Var>,
    pub pi: Option<Var>,
}

pub fn loss_arm(g: &mut Graph, terms: ArmTerms) -> Result<Option<Var>, LossError> {
    sum_terms(g, &[terms.res, terms.pi])
}

/// ESAM + ARM; at least one must be present.
pub fn loss_total(g: &mut Graph, esam: Option<Var>, arm: Option<Var>) -> Result<Var, LossError> {
    sum_terms(g, &[esam, arm])?.ok_or(LossError::NothingToOptimize)
}
