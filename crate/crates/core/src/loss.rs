//! Hardest-negative hinge loss with a semantically adjusted margin.
//!
//! For each relevant pair `p` of a batch, with `S[p][q] = s(I_p, D_q)` and
//! `C[p][q] = cos(D'_p, D'_q)`:
//!
//! ```text
//! loss_p = max_q [α + λ C[p][q] + S[p][q] − S[p][p]]₊      (hardest negative description)
//!        + max_q [α + λ C[p][q] + S[q][p] − S[p][p]]₊      (hardest negative image)
//! ```
//!
//! and the batch loss is the mean over `p`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub alpha: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Multiplier applied to the learning rate from `decay_epoch` (1-based) onward.
    pub lr_decay: f64,
    pub decay_epoch: usize,
    pub d5: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Seeds batch shuffling.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.185,
            lambda: 0.025,
            batch_size: 128,
            epochs: 20,
            learning_rate: 4e-4,
            lr_decay: 0.1,
            decay_epoch: 5,
            d5: 32,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(Error::Param(msg.into())) };
        check(self.alpha > 0.0 && self.alpha.is_finite(), "alpha must be > 0")?;
        check(self.lambda >= 0.0 && self.lambda.is_finite(), "lambda must be ≥ 0")?;
        check(self.batch_size >= 2, "batch size must be ≥ 2")?;
        check(self.learning_rate > 0.0 && self.learning_rate.is_finite(), "learning rate must be > 0")?;
        check(self.lr_decay > 0.0 && self.lr_decay.is_finite(), "learning-rate decay must be > 0")?;
        check(self.d5 >= 1, "d5 must be ≥ 1")?;
        check((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2), "Adam betas must lie in [0, 1)")?;
        check(self.epsilon > 0.0, "Adam epsilon must be > 0")
    }

    /// Learning rate used during `epoch` (1-based).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        if epoch >= self.decay_epoch {
            self.learning_rate * self.lr_decay
        } else {
            self.learning_rate
        }
    }
}

/// A hinge that is strictly positive: `margin + s(I_image, D_description) − s(I_anchor, D_anchor)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActiveHinge {
    pub anchor: usize,
    pub image: usize,
    pub description: usize,
    /// `α + λ C[p][q]`.
    pub margin: f64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LsehOutcome {
    pub loss: f64,
    pub active: Vec<ActiveHinge>,
}

/// Batch loss with every `q ≠ p` admissible as a negative.
pub fn lseh_loss(scores: &Tensor, cosines: &Tensor, config: &TrainConfig) -> Result<f64> {
    Ok(lseh_outcome(scores, cosines, config, |p, q| p != q)?.loss)
}

/// Batch loss and its active hinges; `admissible(p, q)` selects the negatives of `p`.
///
/// Ties among hardest negatives go to the lowest index. An anchor without an
/// admissible negative contributes 0.
pub fn lseh_outcome(
    scores: &Tensor,
    cosines: &Tensor,
    config: &TrainConfig,
    admissible: impl Fn(usize, usize) -> bool,
) -> Result<LsehOutcome> {
    let b = scores.rows();
    if b < 2 {
        return Err(Error::Param(format!("batch size must be ≥ 2, got {b}")));
    }
    if scores.shape() != [b, b] || cosines.shape() != scores.shape() {
        return Err(Error::shape("lseh_loss", scores.shape(), cosines.shape()));
    }
    let (alpha, lambda) = (config.alpha, config.lambda);
    let mut total = 0.0;
    let mut active = Vec::new();
    for p in 0..b {
        let positive = scores.get(p, p);
        // (hinge argument, image, description)
        let mut hardest_description: Option<(f64, usize)> = None;
        let mut hardest_image: Option<(f64, usize)> = None;
        for q in (0..b).filter(|&q| admissible(p, q)) {
            let margin = alpha + lambda * cosines.get(p, q);
            let d = margin + scores.get(p, q) - positive;
            let i = margin + scores.get(q, p) - positive;
            if hardest_description.is_none_or(|(best, _)| d > best) {
                hardest_description = Some((d, q));
            }
            if hardest_image.is_none_or(|(best, _)| i > best) {
                hardest_image = Some((i, q));
            }
        }
        for (hinge, image, description) in [
            hardest_description.map(|(v, q)| (v, p, q)),
            hardest_image.map(|(v, q)| (v, q, p)),
        ]
        .into_iter()
        .flatten()
        {
            // NaN propagates into the total so the caller can detect it
            if hinge > 0.0 || hinge.is_nan() {
                total += hinge;
                let q = if image == p { description } else { image };
                active.push(ActiveHinge {
                    anchor: p,
                    image,
                    description,
                    margin: alpha + lambda * cosines.get(p, q),
                    value: hinge,
                });
            }
        }
    }
    Ok(LsehOutcome {
        loss: total / b as f64,
        active,
    })
}
