//! Fusion strategies combining the main and question-only answer
//! distributions during training.

use std::str::FromStr;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::data::AnswerDistribution;

use super::math::{log_softmax, sigmoid, softmax};

/// How the two branch distributions are combined (the function `M`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    /// No fusion: the main branch output is used unchanged.
    None,
    /// Renormalized elementwise product of the two distributions.
    ProductOfExperts,
    /// Main-branch log-probabilities scaled elementwise by the sigmoid of
    /// the question-only log-probabilities, then softmaxed.
    SigmoidMask,
    /// `softmax(log p_vqa + g * log p_q)` with a nonnegative scalar gate.
    LearnedMixin,
}

impl FusionKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            FusionKind::None => "none",
            FusionKind::ProductOfExperts => "product_of_experts",
            FusionKind::SigmoidMask => "sigmoid_mask",
            FusionKind::LearnedMixin => "learned_mixin",
        }
    }
}

impl FromStr for FusionKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(FusionKind::None),
            "product_of_experts" | "poe" => Ok(FusionKind::ProductOfExperts),
            "sigmoid_mask" => Ok(FusionKind::SigmoidMask),
            "learned_mixin" | "lmh" => Ok(FusionKind::LearnedMixin),
            other => Err(format!("unknown fusion kind {other:?}")),
        }
    }
}

/// Fusion kind plus its scalar parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionStrategy {
    pub kind: FusionKind,
    /// Gate applied by the standalone [`fuse`] for `LearnedMixin`; during
    /// training the gate is the learned function of the question summary.
    pub mixin_gate: f64,
    /// Weight of the entropy bonus on the scaled bias distribution
    /// (`LearnedMixin` only).
    pub entropy_weight: f64,
}

impl FusionStrategy {
    pub fn new(kind: FusionKind) -> Self {
        FusionStrategy {
            kind,
            ..Self::default()
        }
    }
}

impl Default for FusionStrategy {
    fn default() -> Self {
        FusionStrategy {
            kind: FusionKind::None,
            mixin_gate: 1.0,
            entropy_weight: 0.36,
        }
    }
}

/// Fused pre-softmax scores from the two branch log-probabilities.
///
/// `FusionKind::None` is handled by callers (the fused distribution is the
/// main branch output itself), so this only covers the real combinations.
pub(crate) fn fused_scores(
    log_p_vqa: &Array1<f64>,
    log_p_q: &Array1<f64>,
    kind: FusionKind,
    gate: f64,
) -> Array1<f64> {
    match kind {
        FusionKind::None => log_p_vqa.clone(),
        FusionKind::ProductOfExperts => log_p_vqa + log_p_q,
        FusionKind::SigmoidMask => {
            Array1::from_shape_fn(log_p_vqa.len(), |a| log_p_vqa[a] * sigmoid(log_p_q[a]))
        }
        FusionKind::LearnedMixin => log_p_vqa + &(log_p_q * gate),
    }
}

/// Combine two answer distributions. With `kind = None` the main branch
/// distribution is returned unchanged.
pub fn fuse(
    p_vqa: &AnswerDistribution,
    p_q: &AnswerDistribution,
    strategy: &FusionStrategy,
) -> AnswerDistribution {
    assert_eq!(p_vqa.len(), p_q.len(), "distribution lengths must match");
    if strategy.kind == FusionKind::None {
        return p_vqa.clone();
    }
    if strategy.kind == FusionKind::ProductOfExperts {
        let product: Vec<f64> = p_vqa
            .probs
            .iter()
            .zip(&p_q.probs)
            .map(|(a, b)| a * b)
            .collect();
        let total: f64 = product.iter().sum();
        return AnswerDistribution::new(product.iter().map(|v| v / total).collect());
    }
    let lp = Array1::from_iter(p_vqa.probs.iter().map(|p| p.ln()));
    let lq = Array1::from_iter(p_q.probs.iter().map(|p| p.ln()));
    let scores = fused_scores(&lp, &lq, strategy.kind, strategy.mixin_gate);
    AnswerDistribution::new(softmax(&scores).to_vec())
}

/// Log-probabilities of the entropy-bonus target `softmax(gate * log p_q)`.
pub(crate) fn scaled_bias_log_probs(log_p_q: &Array1<f64>, gate: f64) -> Array1<f64> {
    log_softmax(&(log_p_q * gate))
}
