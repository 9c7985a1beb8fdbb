use std::f64::consts::FRAC_2_PI;

use serde::{Deserialize, Serialize};
use voxgrad::Var;

use crate::error::{Error, Result};
use crate::metrics::{diff, SsimConfig};

pub const DEFAULT_PSNR_CAP: f64 = 50.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CycleLossWeights {
    pub lambda_cycle_ulf: f64,
    pub lambda_cycle_hf: f64,
    pub lambda_adv: f64,
    pub lambda_paired_max: f64,
    /// Arctangent time constant, epochs.
    pub tau: f64,
    pub psnr_cap: f64,
}

impl Default for CycleLossWeights {
    fn default() -> Self {
        Self {
            lambda_cycle_ulf: 10.0,
            lambda_cycle_hf: 10.0,
            lambda_adv: 1.0,
            lambda_paired_max: 1.0,
            tau: 10.0,
            psnr_cap: DEFAULT_PSNR_CAP,
        }
    }
}

impl CycleLossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_cycle_ulf,
            self.lambda_cycle_hf,
            self.lambda_adv,
            self.lambda_paired_max,
            self.tau,
        ];
        if all.iter().any(|w| !(*w >= 0.0 && w.is_finite())) || !(self.psnr_cap > 0.0) {
            return Err(Error::InvalidArgument(format!("invalid loss weights {self:?}")));
        }
        Ok(())
    }
}

fn same_shape(a: &Var, b: &Var, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Mean absolute difference between an input and its round trip through both generators.
pub fn cycle_loss(original: &Var, reconstructed: &Var) -> Result<Var> {
    same_shape(original, reconstructed, "cycle_loss")?;
    Ok(reconstructed.sub(original).abs().mean())
}

/// Negative weighted challenge score of `enhanced` against `hf`, PSNR held at `psnr_cap`.
pub fn paired_challenge_loss(enhanced: &Var, hf: &Var, psnr_cap: f64, ssim: &SsimConfig) -> Result<Var> {
    same_shape(enhanced, hf, "paired_challenge_loss")?;
    if enhanced.shape().len() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "paired_challenge_loss expects [C, D, H, W], got {:?}",
            enhanced.shape()
        )));
    }
    Ok(diff::weighted_score(enhanced, hf, ssim, psnr_cap).neg())
}

/// `λ_max · (2/π) · atan(epoch / τ)`; with `τ = 0` the full weight applies from epoch 1.
pub fn penalty_schedule(epoch: usize, weights: &CycleLossWeights) -> f64 {
    if epoch == 0 {
        return 0.0;
    }
    if weights.tau == 0.0 {
        return weights.lambda_paired_max;
    }
    weights.lambda_paired_max * FRAC_2_PI * (epoch as f64 / weights.tau).atan()
}
