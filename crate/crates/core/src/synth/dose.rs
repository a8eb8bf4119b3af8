//! Ground-truth tissue response: parameter maps to scar and post-ablation image.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SofaError};
use crate::io::quantize_u8;
use crate::study::{ParamChannel, ParamMaps, RgbImage, ScarMask};

pub const SCAR_COLOR: [f32; 3] = [0.98, 0.86, 0.18];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DoseModelConfig {
    pub blur_sigma: f64,
    pub threshold: f64,
    pub exp_duration: f64,
    pub exp_power: f64,
    pub exp_force: f64,
    /// Normalized temperature band with full effect.
    pub temp_gate: (f64, f64),
    /// Width of the linear fall-off outside the band.
    pub temp_ramp: f64,
    /// Convex blend weight toward [`SCAR_COLOR`] inside the scar.
    pub scar_blend: f32,
}

impl Default for DoseModelConfig {
    fn default() -> Self {
        Self {
            blur_sigma: 1.5,
            threshold: 0.15,
            exp_duration: 1.0,
            exp_power: 1.0,
            exp_force: 0.5,
            temp_gate: (0.4, 0.95),
            temp_ramp: 0.05,
            scar_blend: 0.8,
        }
    }
}

impl DoseModelConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.blur_sigma > 0.0
            && self.threshold > 0.0
            && self.threshold < 1.0
            && self.exp_duration > 0.0
            && self.exp_power > 0.0
            && self.exp_force > 0.0
            && 0.0 <= self.temp_gate.0
            && self.temp_gate.0 < self.temp_gate.1
            && self.temp_gate.1 <= 1.0
            && self.temp_ramp > 0.0
            && (0.0..=1.0).contains(&self.scar_blend);
        if ok {
            Ok(())
        } else {
            Err(SofaError::Config(format!("invalid dose model {self:?}")))
        }
    }

    /// Kernel half-width. Truncated at three sigma so no scar can appear
    /// further than that from the nearest energized pixel.
    pub fn blur_radius(&self) -> usize {
        ((3.0 * self.blur_sigma).floor() as usize).max(1)
    }
}

pub fn temperature_gate(t: f64, dm: &DoseModelConfig) -> f64 {
    let (lo, hi) = dm.temp_gate;
    if t < lo {
        (1.0 - (lo - t) / dm.temp_ramp).max(0.0)
    } else if t > hi {
        (1.0 - (t - hi) / dm.temp_ramp).max(0.0)
    } else {
        1.0
    }
}

/// Unblurred pointwise dose.
pub fn dose_field(params: &ParamMaps, dm: &DoseModelConfig) -> Array2<f64> {
    let ch = |c: ParamChannel| params.channels.index_axis(Axis(0), c.index());
    let (dur, force, temp, pow) = (
        ch(ParamChannel::Duration),
        ch(ParamChannel::Force),
        ch(ParamChannel::Temperature),
        ch(ParamChannel::Power),
    );
    Array2::from_shape_fn((params.height(), params.width()), |ix| {
        (dur[ix] as f64).powf(dm.exp_duration)
            * (pow[ix] as f64).powf(dm.exp_power)
            * (force[ix] as f64).powf(dm.exp_force)
            * temperature_gate(temp[ix] as f64, dm)
    })
}

pub fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let raw: Vec<f64> = (-r..=r)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur with zero padding.
pub fn gaussian_blur(field: &Array2<f64>, sigma: f64, radius: usize) -> Array2<f64> {
    let kernel = gaussian_kernel(sigma, radius);
    let (h, w) = field.dim();
    let r = radius as isize;
    let pass = |src: &Array2<f64>, horizontal: bool| {
        Array2::from_shape_fn((h, w), |(i, j)| {
            let mut acc = 0.0;
            for (t, k) in kernel.iter().enumerate() {
                let off = t as isize - r;
                let (ii, jj) = if horizontal {
                    (i as isize, j as isize + off)
                } else {
                    (i as isize + off, j as isize)
                };
                if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                    acc += k * src[[ii as usize, jj as usize]];
                }
            }
            acc
        })
    };
    let tmp = pass(field, true);
    pass(&tmp, false)
}

pub fn blurred_dose(params: &ParamMaps, dm: &DoseModelConfig) -> Array2<f64> {
    gaussian_blur(&dose_field(params, dm), dm.blur_sigma, dm.blur_radius())
}

/// Scar where the blurred dose reaches the threshold (inclusive) on tissue.
pub fn threshold_scar(blurred: &Array2<f64>, tissue: &Array2<bool>, threshold: f64) -> ScarMask {
    ScarMask(Array2::from_shape_fn(blurred.dim(), |ix| {
        if tissue[ix] && blurred[ix] >= threshold {
            1.0
        } else {
            0.0
        }
    }))
}

/// Oracle tissue response. Scar only forms on tissue (nonzero pre pixels);
/// inside the scar the pre image is blended toward the scar color.
pub fn apply_dose_model(
    pre: &RgbImage,
    params: &ParamMaps,
    dm: &DoseModelConfig,
) -> Result<(RgbImage, ScarMask)> {
    if (pre.height(), pre.width()) != (params.height(), params.width()) {
        return Err(SofaError::Shape(format!(
            "pre {:?} vs params {:?}",
            pre.0.shape(),
            params.channels.shape()
        )));
    }
    let scar = threshold_scar(&blurred_dose(params, dm), &pre.foreground(), dm.threshold);
    let mut post = pre.0.clone();
    for ((c, i, j), v) in post.indexed_iter_mut() {
        if scar.0[[i, j]] == 1.0 {
            *v = quantize_u8(*v + dm.scar_blend * (SCAR_COLOR[c] - *v));
        }
    }
    Ok((RgbImage(post), scar))
}
