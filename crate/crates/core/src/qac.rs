//! Quantization-aware confidence and the confidence-weighted loss.

use serde::{Deserialize, Serialize};

use crate::codec::{dct2d, Block8};
use crate::jpeg::Qst;
use crate::nn::{softmax_cross_entropy, NnError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QacConfig {
    pub normalizer: f64,
    pub enabled: bool,
}

impl QacConfig {
    pub const DEFAULT_NORMALIZER: f64 = 1.0 / 128.0;

    pub fn raw() -> Self {
        Self {
            normalizer: 1.0,
            enabled: true,
        }
    }

    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }
}

impl Default for QacConfig {
    fn default() -> Self {
        Self {
            normalizer: Self::DEFAULT_NORMALIZER,
            enabled: true,
        }
    }
}

/// `normalizer · Σ 1/q` over all 128 steps, or 1 when disabled.
pub fn qac(q: &Qst, cfg: &QacConfig) -> f64 {
    if !cfg.enabled {
        return 1.0;
    }
    cfg.normalizer * q.iter().map(|s| 1.0 / s as f64).sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Divide by the sum of the batch weights.
    #[default]
    Mean,
    Sum,
}

/// Weighted softmax cross-entropy with its logit gradient.
pub fn weighted_ce_loss(
    logits: &Tensor,
    labels: &[usize],
    weights: &[f64],
    reduction: Reduction,
) -> Result<(f64, Tensor), NnError> {
    let divisor = match reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => weights.iter().sum(),
    };
    weighted_ce_loss_over(logits, labels, weights, divisor)
}

/// As [`weighted_ce_loss`] with an explicit divisor, for batches evaluated
/// in several groups that share one normalization.
pub fn weighted_ce_loss_over(
    logits: &Tensor,
    labels: &[usize],
    weights: &[f64],
    divisor: f64,
) -> Result<(f64, Tensor), NnError> {
    if weights.iter().any(|w| !(*w > 0.0)) {
        return Err(NnError::ShapeMismatch("sample weights must be positive".into()));
    }
    softmax_cross_entropy(logits, labels, weights, divisor)
}

/// Loss gradient with respect to the DCT coefficients of one block, given
/// the gradient with respect to its (level-shifted) pixels. The inverse DCT
/// is orthonormal, so its adjoint is the forward transform.
pub fn frequency_gradient(pixel_grad: &Block8) -> Block8 {
    dct2d(pixel_grad)
}
