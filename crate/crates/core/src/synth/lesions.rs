//! Lesion plans and their rasterization into parameter maps.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::atrium::ViewAnatomy;
use super::{rng_for, SynthConfig};
use crate::error::{Result, SofaError};
use crate::study::{ParamChannel, ParamMaps, ParamRanges, ViewId, NUM_PARAM_CHANNELS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    PviComplete,
    PviWithGaps,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::PviComplete => "pvi_complete",
            Strategy::PviWithGaps => "pvi_with_gaps",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = SofaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pvi_complete" => Ok(Strategy::PviComplete),
            "pvi_with_gaps" => Ok(Strategy::PviWithGaps),
            other => Err(SofaError::InvalidValue(format!(
                "unknown lesion strategy `{other}`"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LesionConfig {
    /// Ribbon width around each path, pixels.
    pub ribbon_width: f32,
    /// Length of one energy application along the path, fraction of the side.
    pub application_length: f32,
    /// Probability that a generated study uses `pvi_with_gaps`.
    pub gap_strategy_fraction: f64,
    /// Length range of one explicit gap, fraction of the path.
    pub gap_length: (f32, f32),
    /// Share of weak applications for the best and worst operator quality.
    pub weak_fraction: (f32, f32),
}

impl Default for LesionConfig {
    fn default() -> Self {
        Self {
            ribbon_width: 5.0,
            application_length: 0.06,
            gap_strategy_fraction: 0.5,
            gap_length: (0.08, 0.25),
            weak_fraction: (0.0, 0.85),
        }
    }
}

/// One planned lesion path. `params` holds physical values per point in
/// channel order; `gap_spans` are arclength fractions left unablated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionPath {
    pub points: Vec<[f32; 2]>,
    pub closed: bool,
    pub gap_spans: Vec<(f32, f32)>,
    pub params: Vec<[f32; NUM_PARAM_CHANNELS]>,
}

impl LesionPath {
    pub fn arclength(&self) -> f32 {
        let mut len: f32 = self.points.windows(2).map(|w| dist(w[0], w[1])).sum();
        if self.closed && self.points.len() > 1 {
            len += dist(self.points[self.points.len() - 1], self.points[0]);
        }
        len
    }

    /// Arclength fraction of point `k`. Points are evenly spaced.
    pub fn fraction(&self, k: usize) -> f32 {
        let n = self.points.len();
        if self.closed {
            k as f32 / n as f32
        } else if n > 1 {
            k as f32 / (n - 1) as f32
        } else {
            0.0
        }
    }

    pub fn in_gap(&self, k: usize) -> bool {
        let s = self.fraction(k);
        self.gap_spans.iter().any(|&(a, b)| s >= a && s < b)
    }

    pub fn gap_fraction(&self) -> f32 {
        self.gap_spans.iter().map(|(a, b)| b - a).sum()
    }
}

fn dist(a: [f32; 2], b: [f32; 2]) -> f32 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewPlan {
    pub view: ViewId,
    pub paths: Vec<LesionPath>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionPlan {
    pub strategy: Strategy,
    /// Operator quality in `[0, 1]`; lower quality means more weak applications.
    pub quality: f32,
    pub views: Vec<ViewPlan>,
}

impl LesionPlan {
    /// Length-weighted share of planned path left as explicit gaps.
    pub fn planned_gap_fraction(&self) -> f64 {
        let (mut gap, mut total) = (0.0f64, 0.0f64);
        for p in self.views.iter().flat_map(|v| &v.paths) {
            let len = p.arclength() as f64;
            gap += len * p.gap_fraction() as f64;
            total += len;
        }
        if total > 0.0 {
            gap / total
        } else {
            0.0
        }
    }

    /// Rasterized centerline pixels `(row, col)` per view, including gaps.
    pub fn path_pixels(&self, resolution: usize) -> Vec<Vec<(usize, usize)>> {
        self.views
            .iter()
            .map(|v| {
                let mut px: Vec<(usize, usize)> = v
                    .paths
                    .iter()
                    .flat_map(|p| p.points.iter())
                    .filter_map(|&[x, y]| {
                        let (i, j) = (y.round(), x.round());
                        (i >= 0.0
                            && j >= 0.0
                            && (i as usize) < resolution
                            && (j as usize) < resolution)
                            .then_some((i as usize, j as usize))
                    })
                    .collect();
                px.sort_unstable();
                px.dedup();
                px
            })
            .collect()
    }
}

fn ring(center: [f32; 2], radius: f32, phase: f32) -> Vec<[f32; 2]> {
    let n = ((std::f32::consts::TAU * radius).ceil() as usize).max(8);
    (0..n)
        .map(|k| {
            let a = phase + std::f32::consts::TAU * k as f32 / n as f32;
            [center[0] + radius * a.cos(), center[1] + radius * a.sin()]
        })
        .collect()
}

fn sample_gaps<R: Rng>(rng: &mut R, cfg: &LesionConfig) -> Vec<(f32, f32)> {
    let count = match rng.random_range(0..10) {
        0..=1 => 0,
        2..=6 => 1,
        _ => 2,
    };
    let mut spans: Vec<(f32, f32)> = Vec::new();
    for _ in 0..count {
        for _attempt in 0..20 {
            let len = rng.random_range(cfg.gap_length.0..=cfg.gap_length.1);
            let start = rng.random_range(0.0..1.0f32);
            let end = (start + len).min(1.0);
            if spans.iter().all(|&(a, b)| end <= a || start >= b) {
                spans.push((start, end));
                break;
            }
        }
    }
    spans.sort_by(|a, b| a.0.total_cmp(&b.0));
    spans
}

/// Normalized (duration, force, temperature, power) for one application.
fn sample_application<R: Rng>(rng: &mut R, weak: bool) -> [f32; NUM_PARAM_CHANNELS] {
    let (dur, pow) = if weak {
        (rng.random_range(0.10..0.40), rng.random_range(0.10..0.40))
    } else {
        (rng.random_range(0.60..1.0), rng.random_range(0.60..1.0))
    };
    let force = rng.random_range(0.30..1.0);
    let temp = rng.random_range(0.45..0.90);
    [dur, force, temp, pow]
}

/// Plans encircling lesions around every ostium of every view and rasterizes
/// them into normalized parameter maps.
pub fn plan_lesions(
    seed: u64,
    anatomy: &[ViewAnatomy],
    cfg: &SynthConfig,
    strategy: Strategy,
) -> (LesionPlan, Vec<ParamMaps>) {
    let mut rng = rng_for(seed, "lesions", 0);
    let quality: f32 = rng.random();
    let lc = &cfg.lesions;
    let weak_share =
        lc.weak_fraction.0 + (lc.weak_fraction.1 - lc.weak_fraction.0) * (1.0 - quality);
    let app_len = ((lc.application_length * cfg.resolution as f32).round() as usize).max(2);

    let mut views = Vec::with_capacity(anatomy.len());
    for va in anatomy {
        let mut paths = Vec::new();
        for o in &va.ostia {
            let points = ring(
                o.center,
                o.ring_radius,
                rng.random_range(0.0..std::f32::consts::TAU),
            );
            let gap_spans = match strategy {
                Strategy::PviComplete => Vec::new(),
                Strategy::PviWithGaps => sample_gaps(&mut rng, lc),
            };
            let mut params = Vec::with_capacity(points.len());
            let mut current = [0.0; NUM_PARAM_CHANNELS];
            for k in 0..points.len() {
                if k % app_len == 0 {
                    let weak = rng.random::<f32>() < weak_share;
                    let norm = sample_application(&mut rng, weak);
                    for c in ParamChannel::ALL {
                        current[c.index()] = cfg.ranges.denormalize_value(c, norm[c.index()]);
                    }
                }
                params.push(current);
            }
            paths.push(LesionPath {
                points,
                closed: true,
                gap_spans,
                params,
            });
        }
        views.push(ViewPlan {
            view: va.view,
            paths,
        });
    }
    let plan = LesionPlan {
        strategy,
        quality,
        views,
    };
    let maps = anatomy
        .iter()
        .zip(&plan.views)
        .map(|(va, vp)| rasterize(vp, &va.tissue, lc.ribbon_width, cfg.ranges))
        .collect();
    (plan, maps)
}

/// Stamps every non-gap path point as a disk of diameter `width`. Each covered
/// tissue pixel takes the parameters of its nearest point.
pub fn rasterize(
    plan: &ViewPlan,
    tissue: &Array2<bool>,
    width: f32,
    ranges: ParamRanges,
) -> ParamMaps {
    let (h, w) = tissue.dim();
    let half = 0.5 * width;
    let mut best = Array2::<f32>::from_elem((h, w), f32::INFINITY);
    let mut out = Array3::<f32>::zeros((NUM_PARAM_CHANNELS, h, w));
    for path in &plan.paths {
        for (k, (&[x, y], phys)) in path.points.iter().zip(&path.params).enumerate() {
            if path.in_gap(k) {
                continue;
            }
            let i0 = (y - half).floor().max(0.0) as usize;
            let i1 = ((y + half).ceil() as usize).min(h.saturating_sub(1));
            let j0 = (x - half).floor().max(0.0) as usize;
            let j1 = ((x + half).ceil() as usize).min(w.saturating_sub(1));
            for i in i0..=i1 {
                for j in j0..=j1 {
                    let d2 = (i as f32 - y).powi(2) + (j as f32 - x).powi(2);
                    if d2 > half * half || !tissue[[i, j]] || d2 >= best[[i, j]] {
                        continue;
                    }
                    best[[i, j]] = d2;
                    for c in ParamChannel::ALL {
                        out[[c.index(), i, j]] = ranges.normalize_value(c, phys[c.index()]);
                    }
                }
            }
        }
    }
    ParamMaps {
        channels: out,
        ranges,
    }
}
