//! Procedural chamber renderings standing in for the six atrial views.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{rng_for, SynthConfig};
use crate::io::quantize_u8;
use crate::study::{RgbImage, ViewId};

pub const HEALTHY_COLOR: [f32; 3] = [0.22, 0.34, 0.80];
pub const FIBROSIS_COLOR: [f32; 3] = [0.30, 0.82, 0.38];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtriumConfig {
    /// Semi-axis range of the chamber ellipse, as a fraction of the image side.
    pub semi_axis: (f32, f32),
    /// Vein ostium radius range, fraction of the image side.
    pub ostium_radius: (f32, f32),
    /// Distance from ostium rim to the encircling lesion path, fraction of side.
    pub ring_offset: (f32, f32),
    pub fibrosis_blobs: (u32, u32),
}

impl Default for AtriumConfig {
    fn default() -> Self {
        Self {
            semi_axis: (0.30, 0.40),
            ostium_radius: (0.045, 0.06),
            ring_offset: (0.03, 0.06),
            fibrosis_blobs: (5, 10),
        }
    }
}

/// Pulmonary-vein opening: a hole in the tissue with a planned encircling
/// lesion of radius `ring_radius`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ostium {
    pub center: [f32; 2],
    pub radius: f32,
    pub ring_radius: f32,
}

#[derive(Clone, Debug)]
pub struct ViewAnatomy {
    pub view: ViewId,
    pub pre: RgbImage,
    pub tissue: Array2<bool>,
    pub ostia: Vec<Ostium>,
}

struct Body {
    center: [f32; 2],
    axes: [f32; 2],
    angle: f32,
    harmonics: Vec<(f32, f32, f32)>,
}

impl Body {
    /// Normalized elliptical radius and the boundary radius at that angle.
    fn polar(&self, x: f32, y: f32) -> (f32, f32) {
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        let (s, c) = self.angle.sin_cos();
        let u = (dx * c + dy * s) / self.axes[0];
        let v = (-dx * s + dy * c) / self.axes[1];
        let rho = (u * u + v * v).sqrt();
        let theta = v.atan2(u);
        let edge = 1.0
            + self
                .harmonics
                .iter()
                .map(|&(k, amp, ph)| amp * (k * theta + ph).cos())
                .sum::<f32>();
        (rho, edge)
    }

    fn contains(&self, x: f32, y: f32) -> bool {
        let (rho, edge) = self.polar(x, y);
        rho <= edge
    }

    fn point(&self, u: f32, v: f32) -> [f32; 2] {
        let (s, c) = self.angle.sin_cos();
        let (px, py) = (u * self.axes[0], v * self.axes[1]);
        [
            self.center[0] + px * c - py * s,
            self.center[1] + px * s + py * c,
        ]
    }
}

fn ostium_count(view: ViewId) -> usize {
    match view {
        ViewId::Anterior | ViewId::Inferior => 1,
        _ => 2,
    }
}

fn sample_body(rng: &mut ChaCha8Rng, side: f32, cfg: &AtriumConfig) -> Body {
    let jitter = 0.03 * side;
    Body {
        center: [
            0.5 * side + rng.random_range(-jitter..=jitter),
            0.5 * side + rng.random_range(-jitter..=jitter),
        ],
        axes: [
            rng.random_range(cfg.semi_axis.0..=cfg.semi_axis.1) * side,
            rng.random_range(cfg.semi_axis.0..=cfg.semi_axis.1) * side,
        ],
        angle: rng.random_range(0.0..std::f32::consts::PI),
        harmonics: (2..=4)
            .map(|k| {
                (
                    k as f32,
                    rng.random_range(0.0..0.05),
                    rng.random_range(0.0..std::f32::consts::TAU),
                )
            })
            .collect(),
    }
}

fn place_ostia(
    rng: &mut ChaCha8Rng,
    body: &Body,
    count: usize,
    side: f32,
    cfg: &AtriumConfig,
    ribbon_width: f32,
) -> Vec<Ostium> {
    let margin = 0.5 * ribbon_width + 1.0;
    let ring_fits = |center: [f32; 2], ring: f32| {
        (0..48).all(|k| {
            let a = k as f32 * std::f32::consts::TAU / 48.0;
            body.contains(
                center[0] + (ring + margin) * a.cos(),
                center[1] + (ring + margin) * a.sin(),
            )
        })
    };
    let mut out: Vec<Ostium> = Vec::new();
    for _ in 0..count {
        let radius = rng.random_range(cfg.ostium_radius.0..=cfg.ostium_radius.1) * side;
        let ring_radius = radius + rng.random_range(cfg.ring_offset.0..=cfg.ring_offset.1) * side;
        for _attempt in 0..400 {
            let r = 0.8 * rng.random::<f32>().sqrt();
            let a = rng.random_range(0.0..std::f32::consts::TAU);
            let center = body.point(r * a.cos(), r * a.sin());
            let separated = out.iter().all(|o| {
                let d =
                    ((o.center[0] - center[0]).powi(2) + (o.center[1] - center[1]).powi(2)).sqrt();
                d >= o.ring_radius + ring_radius + ribbon_width + 1.0
            });
            if separated && ring_fits(center, ring_radius) {
                out.push(Ostium {
                    center,
                    radius,
                    ring_radius,
                });
                break;
            }
        }
    }
    if out.is_empty() {
        // Fall back to a centered ring, shrunk until it fits.
        let mut ring_radius = (cfg.ostium_radius.0 + cfg.ring_offset.0) * side;
        while ring_radius > 2.0 && !ring_fits(body.center, ring_radius) {
            ring_radius *= 0.9;
        }
        out.push(Ostium {
            center: body.center,
            radius: (ring_radius * 0.6).max(1.0),
            ring_radius,
        });
    }
    out
}

fn render_view(seed: u64, view: ViewId, cfg: &SynthConfig) -> ViewAnatomy {
    let n = cfg.resolution;
    let side = n as f32;
    let mut rng = rng_for(seed, "atrium", view.index() as u64);
    let body = sample_body(&mut rng, side, &cfg.atrium);
    let ostia = place_ostia(
        &mut rng,
        &body,
        ostium_count(view),
        side,
        &cfg.atrium,
        cfg.lesions.ribbon_width,
    );

    let blobs: Vec<([f32; 2], f32, f32)> = (0..rng
        .random_range(cfg.atrium.fibrosis_blobs.0..=cfg.atrium.fibrosis_blobs.1))
        .map(|_| {
            let r = 0.9 * rng.random::<f32>().sqrt();
            let a = rng.random_range(0.0..std::f32::consts::TAU);
            (
                body.point(r * a.cos(), r * a.sin()),
                rng.random_range(0.03..0.08) * side,
                rng.random_range(0.3..1.0),
            )
        })
        .collect();

    let mut data = Array3::<f32>::zeros((3, n, n));
    let mut tissue = Array2::<bool>::from_elem((n, n), false);
    for i in 0..n {
        for j in 0..n {
            let (x, y) = (j as f32, i as f32);
            // Speckle is drawn for every pixel so the stream does not depend on
            // the silhouette.
            let speckle: f32 = rng.random_range(-0.04..0.04);
            let (rho, edge) = body.polar(x, y);
            if rho > edge {
                continue;
            }
            let in_hole = ostia.iter().any(|o| {
                (x - o.center[0]).powi(2) + (y - o.center[1]).powi(2) <= o.radius * o.radius
            });
            if in_hole {
                continue;
            }
            let fib = blobs
                .iter()
                .map(|(c, s, amp)| {
                    let d2 = (x - c[0]).powi(2) + (y - c[1]).powi(2);
                    amp * (-d2 / (2.0 * s * s)).exp()
                })
                .sum::<f32>()
                .min(1.0);
            let shade = 0.72 + 0.28 * (1.0 - (rho / edge).min(1.0).powi(2));
            for c in 0..3 {
                let base = HEALTHY_COLOR[c] + 0.75 * fib * (FIBROSIS_COLOR[c] - HEALTHY_COLOR[c]);
                data[[c, i, j]] = quantize_u8((shade * base + speckle).clamp(0.02, 1.0));
            }
            tissue[[i, j]] = true;
        }
    }
    ViewAnatomy {
        view,
        pre: RgbImage(data),
        tissue,
        ostia,
    }
}

/// Renders the six views of one synthetic atrium. Pure in `(seed, cfg)`;
/// background pixels are exactly zero.
pub fn synth_atrium(seed: u64, cfg: &SynthConfig) -> Vec<ViewAnatomy> {
    ViewId::ALL
        .iter()
        .map(|&v| render_view(seed, v, cfg))
        .collect()
}
