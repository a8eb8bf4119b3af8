//! Recurrence label model: incomplete encirclement drives recurrence.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::lesions::LesionPlan;
use super::rng_for;
use crate::error::{Result, SofaError};
use crate::study::ScarMask;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelModelConfig {
    pub beta0: f64,
    pub beta1: f64,
}

impl Default for LabelModelConfig {
    fn default() -> Self {
        Self {
            beta0: -2.0,
            beta1: 4.0,
        }
    }
}

impl LabelModelConfig {
    /// `beta1 = 0` is accepted as the no-signal control; negative slopes are not.
    pub fn validate(&self) -> Result<()> {
        if self.beta0.is_finite() && self.beta1.is_finite() && self.beta1 >= 0.0 {
            Ok(())
        } else {
            Err(SofaError::Config(format!("invalid label model {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabelOutcome {
    pub y: u8,
    pub p: f64,
    pub gap_fraction: f64,
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Share of planned path pixels, over all views, not covered by scar.
pub fn scar_gap_fraction(scars: &[ScarMask], path_pixels: &[Vec<(usize, usize)>]) -> f64 {
    let (mut open, mut total) = (0usize, 0usize);
    for (scar, pixels) in scars.iter().zip(path_pixels) {
        for &ix in pixels {
            total += 1;
            if scar.0[ix] < 0.5 {
                open += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        open as f64 / total as f64
    }
}

pub fn recurrence_probability(gap_fraction: f64, lm: &LabelModelConfig) -> f64 {
    logistic(lm.beta0 + lm.beta1 * gap_fraction)
}

/// Draws `y ~ Bernoulli(p)` from the study's label stream. The uniform draw
/// depends only on `seed`, so relabeling with another model is coupled.
pub fn sample_label(gap_fraction: f64, lm: &LabelModelConfig, seed: u64) -> LabelOutcome {
    let p = recurrence_probability(gap_fraction, lm);
    let u: f64 = rng_for(seed, "label", 0).random();
    LabelOutcome {
        y: u8::from(u < p),
        p,
        gap_fraction,
    }
}

pub fn label_recurrence(
    scars: &[ScarMask],
    plan: &LesionPlan,
    lm: &LabelModelConfig,
    seed: u64,
) -> LabelOutcome {
    let resolution = scars.first().map(|s| s.0.nrows()).unwrap_or(0);
    let gap = scar_gap_fraction(scars, &plan.path_pixels(resolution));
    sample_label(gap, lm, seed)
}
