//! Mask schedules, forward corruption and the masked cross-entropy loss.
//!
//! Training corrupts a target block by independently replacing each position
//! with `<mask>` with probability `f_modal(t)`, then scores the model only on
//! the masked positions. Text uses the linear schedule, image and action the
//! cosine schedule; action training always draws `t = 1` (fully masked), which
//! is what makes one-step action decoding match the training condition.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{Modal, TokenId, UnifiedVocab};

/// Lower bound of the `t` distribution during training; avoids the 1/t
/// factor blowing up on nearly uncorrupted samples.
pub const T_EPSILON: f64 = 1e-3;

/// Masking probability schedule f(t): [0,1] -> [0,1].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskSchedule {
    /// f(t) = t
    Linear,
    /// f(t) = cos(pi/2 * (1 - t)), evaluated as sin(pi/2 * t) so the
    /// endpoints f(0) = 0 and f(1) = 1 are exact in floating point.
    Cosine,
}

impl MaskSchedule {
    /// Schedule used when corrupting or decoding a block of this modality.
    pub fn for_modal(modal: Modal) -> MaskSchedule {
        match modal {
            Modal::Text => MaskSchedule::Linear,
            Modal::Action | Modal::Image => MaskSchedule::Cosine,
        }
    }

    /// Evaluates the masking probability f(t).
    pub fn eval(self, t: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("schedule time {t} outside [0, 1]")));
        }
        Ok(match self {
            MaskSchedule::Linear => t,
            MaskSchedule::Cosine => (std::f64::consts::FRAC_PI_2 * t).sin(),
        })
    }
}

/// Per-modality loss weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub action: f64,
    pub text: f64,
    pub image: f64,
}

impl LossWeights {
    pub fn get(&self, modal: Modal) -> f64 {
        match modal {
            Modal::Action => self.action,
            Modal::Text => self.text,
            Modal::Image => self.image,
        }
    }

    /// Stage 1 trains text and image understanding only.
    pub fn stage1() -> Self {
        LossWeights { action: 0.0, text: 1.0, image: 1.0 }
    }

    /// Stage 2 baseline: action only.
    pub fn stage2_action_only() -> Self {
        LossWeights { action: 1.0, text: 0.0, image: 0.0 }
    }

    /// Stage 2 with both auxiliary generation losses.
    pub fn stage2_joint() -> Self {
        LossWeights { action: 1.0, text: 0.05, image: 0.05 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("action", self.action), ("text", self.text), ("image", self.image)] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Config(format!(
                    "loss weight for {name} must be finite and nonnegative, got {w}"
                )));
            }
        }
        Ok(())
    }
}

/// Outcome of corrupting one target block.
#[derive(Clone, Debug, PartialEq)]
pub struct CorruptionResult {
    pub t: f64,
    /// Block with masked positions replaced by `<mask>`.
    pub x_t: Vec<TokenId>,
    /// `mask_flags[i]` iff position `i` was masked.
    pub mask_flags: Vec<bool>,
    /// The original block.
    pub x_0: Vec<TokenId>,
}

impl CorruptionResult {
    pub fn masked_count(&self) -> usize {
        self.mask_flags.iter().filter(|&&m| m).count()
    }
}

/// Independently masks each position with probability `f(t)`.
pub fn corrupt_block(
    x_0: &[TokenId],
    t: f64,
    schedule: MaskSchedule,
    rng: &mut impl Rng,
    vocab: &UnifiedVocab,
) -> Result<CorruptionResult> {
    if x_0.is_empty() {
        return Err(Error::Shape("cannot corrupt an empty block".into()));
    }
    if t <= 0.0 {
        return Err(Error::Domain(format!("corruption time {t} must be in (0, 1]")));
    }
    let p_mask = schedule.eval(t)?;
    let mask = vocab.mask();
    let mut x_t = Vec::with_capacity(x_0.len());
    let mut mask_flags = Vec::with_capacity(x_0.len());
    for &id in x_0 {
        // Strict inequality: p_mask = 0 never masks, p_mask = 1 always does
        // (the uniform draw lives in [0, 1)).
        let masked = rng.random::<f64>() < p_mask;
        mask_flags.push(masked);
        x_t.push(if masked { mask } else { id });
    }
    Ok(CorruptionResult {
        t,
        x_t,
        mask_flags,
        x_0: x_0.to_vec(),
    })
}

/// Draws the corruption time for a training sample.
///
/// Action blocks always use `t = 1` so training matches the fully masked
/// one-step decoding condition; text and image draw `t ~ Uniform(eps, 1]`.
pub fn sample_train_t(modal: Modal, rng: &mut impl Rng) -> f64 {
    match modal {
        Modal::Action => 1.0,
        Modal::Text | Modal::Image => {
            let u: f64 = rng.random(); // [0, 1)
            T_EPSILON + (1.0 - T_EPSILON) * (1.0 - u)
        }
    }
}

/// Masked cross entropy for one block:
/// `(lambda / t) * mean over masked positions of -log p(x_0[i])`.
///
/// `logits` is row-major, one row of `vocab_size` reals per block position.
/// Returns 0 when nothing is masked.
pub fn masked_ce_loss(
    logits: &[f64],
    vocab_size: usize,
    x_0: &[TokenId],
    mask_flags: &[bool],
    t: f64,
    lambda: f64,
) -> Result<f64> {
    if t <= 0.0 {
        return Err(Error::Domain(format!("loss time {t} must be positive")));
    }
    if logits.len() != x_0.len() * vocab_size || x_0.len() != mask_flags.len() {
        return Err(Error::Shape(format!(
            "loss over {} positions expects {} logits and {} flags, got {} and {}",
            x_0.len(),
            x_0.len() * vocab_size,
            x_0.len(),
            logits.len(),
            mask_flags.len()
        )));
    }
    let mut sum = 0.0;
    let mut masked = 0usize;
    for (i, (&target, &is_masked)) in x_0.iter().zip(mask_flags).enumerate() {
        if !is_masked {
            continue;
        }
        let row = &logits[i * vocab_size..(i + 1) * vocab_size];
        sum += neg_log_softmax(row, target as usize);
        masked += 1;
    }
    if masked == 0 {
        return Ok(0.0);
    }
    Ok(lambda / t * (sum / masked as f64))
}

/// Numerically stable `-log softmax(row)[target]`.
pub fn neg_log_softmax(row: &[f64], target: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum: f64 = row.iter().map(|&l| (l - max).exp()).sum::<f64>().ln() + max;
    log_sum - row[target]
}

/// Weighted sum of per-modal losses. Modalities with weight 0 are skipped
/// entirely; a missing loss for a positively weighted modality is an error.
pub fn combine_modal_losses(losses: [Option<f64>; 3], weights: &LossWeights) -> Result<f64> {
    let mut total = 0.0;
    for modal in Modal::ALL {
        let w = weights.get(modal);
        if w == 0.0 {
            continue;
        }
        match losses[modal.index()] {
            Some(loss) => total += w * loss,
            None => {
                return Err(Error::Config(format!(
                    "loss weight for {} is {w} but no {} loss was computed",
                    modal.name(),
                    modal.name()
                )))
            }
        }
    }
    Ok(total)
}
