//! Brute-force reference implementations and the checks that compare the
//! library against them. Shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sofa_core::generator::{
    cross_attention_fuse, dice_term, phase1_loss, FusionWeights, GeneratorConfig, GeneratorState,
};
use sofa_core::optimize::{masked_step, RiskModel};
use sofa_core::recurrence::{bce_loss, bce_loss_tensor, ClassifierConfig, ClassifierState};
use sofa_core::{ParamMaps, ParamRanges, RgbImage, Study, ViewId, ViewSample};

/// Worst error of one comparison against its tolerance.
#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub worst: f64,
    pub tol: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.worst.is_finite() && self.worst <= self.tol
    }

    pub fn line(&self) -> String {
        format!(
            "{:<34} worst {:.3e} (tol {:.0e}) {}",
            self.name,
            self.worst,
            self.tol,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

pub const VALUE_TOL: f64 = 1e-6;
pub const GRAD_REL_TOL: f64 = 1e-3;
/// Below this magnitude both gradients count as zero and the absolute gap is
/// compared instead.
const GRAD_FLOOR: f64 = 1e-7;
const FD_STEP: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

fn dev() -> Device {
    Device::Cpu
}

fn grad_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < GRAD_FLOOR {
        (analytic - numeric).abs() / GRAD_FLOOR * GRAD_REL_TOL
    } else {
        (analytic - numeric).abs() / scale
    }
}

fn central_difference(f: &mut dyn FnMut(f64) -> f64, x: f64) -> f64 {
    central_difference_step(f, x, FD_STEP)
}

fn central_difference_step(f: &mut dyn FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

// ---------------------------------------------------------------------------
// Reference formulas on plain vectors, f64 throughout.

/// `m` row-major `[C, C]`, `x` a length-C vector.
fn matvec(m: &[f64], x: &[f64]) -> Vec<f64> {
    let c = x.len();
    (0..c)
        .map(|r| (0..c).map(|k| m[r * c + k] * x[k]).sum())
        .collect()
}

/// Dense cross-attention for one sample. `z_pre`/`z_feat` are `[C][N]`
/// channel-major, as stored in `[C, Hb, Wb]`. Returns `[C][N]`.
pub fn fuse_reference(
    z_pre: &[f64],
    z_feat: &[f64],
    w: [&[f64]; 4],
    c: usize,
    n: usize,
) -> Vec<f64> {
    let col = |z: &[f64], i: usize| (0..c).map(|k| z[k * n + i]).collect::<Vec<_>>();
    let q: Vec<Vec<f64>> = (0..n).map(|i| matvec(w[0], &col(z_pre, i))).collect();
    let k: Vec<Vec<f64>> = (0..n).map(|j| matvec(w[1], &col(z_feat, j))).collect();
    let v: Vec<Vec<f64>> = (0..n).map(|j| matvec(w[2], &col(z_feat, j))).collect();
    let mut out = vec![0.0; c * n];
    for i in 0..n {
        let scores: Vec<f64> = (0..n)
            .map(|j| (0..c).map(|t| q[i][t] * k[j][t]).sum::<f64>() / (c as f64).sqrt())
            .collect();
        let denom: f64 = scores.iter().map(|s| s.exp()).sum();
        let mut mixed = vec![0.0; c];
        for j in 0..n {
            let a = scores[j].exp() / denom;
            for t in 0..c {
                mixed[t] += a * v[j][t];
            }
        }
        let o = matvec(w[3], &mixed);
        for t in 0..c {
            out[t * n + i] = o[t];
        }
    }
    out
}

pub fn dice_reference(p: &[f64], t: &[f64], eps: f64) -> f64 {
    let inter: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
    let sp: f64 = p.iter().sum();
    let st: f64 = t.iter().sum();
    1.0 - (2.0 * inter + eps) / (sp + st + eps)
}

/// Mean L1 over all elements plus `lambda` times the batch-mean dice term.
/// Images are `[B][...]` flattened per sample.
pub fn phase1_reference(
    post_hat: &[Vec<f64>],
    post: &[Vec<f64>],
    m_hat: &[Vec<f64>],
    m: &[Vec<f64>],
    lambda: f64,
    eps: f64,
) -> f64 {
    let count: usize = post.iter().map(|p| p.len()).sum();
    let l1: f64 = post_hat
        .iter()
        .zip(post)
        .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
        .sum::<f64>()
        / count as f64;
    let dice: f64 = m_hat
        .iter()
        .zip(m)
        .map(|(p, t)| dice_reference(p, t, eps))
        .sum::<f64>()
        / m.len() as f64;
    l1 + lambda * dice
}

/// `-y log s - (1 - y) log(1 - s)` evaluated literally.
pub fn bce_reference(logit: f64, y: u8) -> f64 {
    let s = 1.0 / (1.0 + (-logit).exp());
    if y == 1 {
        -s.ln()
    } else {
        -(1.0 - s).ln()
    }
}

/// `-log(1 - sigmoid(logit)) + lambda * ||x - x0||^2`, literally.
pub fn phase3_reference(logit: f64, x: &[f64], x0: &[f64], lambda: f64) -> f64 {
    let s = 1.0 / (1.0 + (-logit).exp());
    let d2: f64 = x.iter().zip(x0).map(|(a, b)| (a - b).powi(2)).sum();
    -(1.0 - s).ln() + lambda * d2
}

/// `M (x - eta g) + (1 - M) x0`, clamped inside the mask.
pub fn masked_step_reference(x: f64, g: f64, eta: f64, m: f64, x0: f64, clamp: bool) -> f64 {
    let moved = x - eta * g;
    let moved = if clamp { moved.clamp(0.0, 1.0) } else { moved };
    m * moved + (1.0 - m) * x0
}

// ---------------------------------------------------------------------------
// Helpers for building library inputs.

fn t4(v: &[f64], shape: (usize, usize, usize, usize)) -> Tensor {
    Tensor::from_slice(v, shape, &dev()).unwrap()
}

fn random_fusion(r: &mut ChaCha8Rng, c: usize) -> ([Vec<f64>; 4], FusionWeights) {
    let ws: [Vec<f64>; 4] = std::array::from_fn(|_| uniform(r, c * c, -1.0, 1.0));
    let t = |v: &Vec<f64>| Tensor::from_slice(v, (c, c), &dev()).unwrap();
    let fw = FusionWeights {
        wq: t(&ws[0]),
        wk: t(&ws[1]),
        wv: t(&ws[2]),
        wo: t(&ws[3]),
    };
    (ws, fw)
}

/// A six-view study at `res` pixels with random images and partial support.
pub fn random_study(seed: u64, res: usize) -> Study {
    let mut r = rng(seed);
    let samples = ViewId::ALL
        .iter()
        .map(|&view| {
            let pre = Array3::from_shape_fn((3, res, res), |_| r.random_range(0.0..1.0f32));
            let support = Array2::from_shape_fn((res, res), |_| r.random_bool(0.4));
            let params = Array3::from_shape_fn((4, res, res), |(_, i, j)| {
                if support[[i, j]] {
                    r.random_range(0.05..0.95f32)
                } else {
                    0.0
                }
            });
            ViewSample {
                view,
                pre: RgbImage(pre),
                params: ParamMaps::new(params, ParamRanges::default()).unwrap(),
                target: None,
            }
        })
        .collect();
    Study {
        id: format!("probe_{seed}"),
        samples,
        label: None,
        meta: BTreeMap::new(),
    }
}

/// Overwrites every classifier parameter with uniform noise so the risk path
/// has a nonzero gradient.
pub fn randomize_classifier(clf: &ClassifierState, seed: u64, bound: f64) {
    let mut r = rng(seed);
    for var in clf.store().vars() {
        let n = var.elem_count();
        let v = Tensor::from_vec(uniform(&mut r, n, -bound, bound), var.shape(), &dev())
            .unwrap()
            .to_dtype(var.dtype())
            .unwrap();
        var.set(&v).unwrap();
    }
}

/// f64 probe generator and a randomized classifier bound to it.
pub fn probe_models(seed: u64) -> (GeneratorState, ClassifierState) {
    let cfg = GeneratorConfig {
        seed,
        ..GeneratorConfig::probe()
    };
    let gen = GeneratorState::new(&cfg, DType::F64).unwrap();
    let c = cfg.channels;
    let clf = ClassifierState::new(
        c,
        &ClassifierConfig {
            hidden: 8,
            ..Default::default()
        },
        &gen.hash().unwrap(),
        vec![0.0; c],
        vec![1.0; c],
        DType::F64,
    )
    .unwrap();
    randomize_classifier(&clf, seed ^ 0x5eed, 1.0);
    (gen, clf)
}

// ---------------------------------------------------------------------------
// Checks.

pub fn check_fuse_values() -> Check {
    let mut worst: f64 = 0.0;
    for trial in 0..20u64 {
        let mut r = rng(100 + trial);
        let (c, h, w) = (
            r.random_range(1..6),
            r.random_range(1..4),
            r.random_range(1..4),
        );
        let n = h * w;
        let zp = uniform(&mut r, c * n, -2.0, 2.0);
        let zf = uniform(&mut r, c * n, -2.0, 2.0);
        let (ws, fw) = random_fusion(&mut r, c);
        let got = cross_attention_fuse(&t4(&zp, (1, c, h, w)), &t4(&zf, (1, c, h, w)), &fw)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let want = fuse_reference(&zp, &zf, [&ws[0], &ws[1], &ws[2], &ws[3]], c, n);
        for (a, b) in got.iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    Check {
        name: "cross_attention_fuse value",
        worst,
        tol: VALUE_TOL,
    }
}

pub fn check_fuse_gradients() -> Check {
    let mut r = rng(7);
    let (c, h, w) = (4, 2, 2);
    let n = h * w;
    let zp = uniform(&mut r, c * n, -1.5, 1.5);
    let zf = uniform(&mut r, c * n, -1.5, 1.5);
    let (ws, _) = random_fusion(&mut r, c);
    // Scalar probe: weighted sum of the fused output.
    let probe = uniform(&mut r, c * n, -1.0, 1.0);
    let objective = |zp: &[f64], zf: &[f64], ws: &[Vec<f64>; 4]| -> f64 {
        fuse_reference(zp, zf, [&ws[0], &ws[1], &ws[2], &ws[3]], c, n)
            .iter()
            .zip(&probe)
            .map(|(a, b)| a * b)
            .sum()
    };
    let vzp = Var::from_tensor(&t4(&zp, (1, c, h, w))).unwrap();
    let vzf = Var::from_tensor(&t4(&zf, (1, c, h, w))).unwrap();
    let vws: Vec<Var> = ws
        .iter()
        .map(|v| Var::from_tensor(&Tensor::from_slice(v, (c, c), &dev()).unwrap()).unwrap())
        .collect();
    let fw = FusionWeights {
        wq: vws[0].as_tensor().clone(),
        wk: vws[1].as_tensor().clone(),
        wv: vws[2].as_tensor().clone(),
        wo: vws[3].as_tensor().clone(),
    };
    let out = cross_attention_fuse(vzp.as_tensor(), vzf.as_tensor(), &fw).unwrap();
    let loss = (out * t4(&probe, (1, c, h, w))).unwrap().sum_all().unwrap();
    let grads = loss.backward().unwrap();
    let flat = |v: &Var| {
        grads
            .get(v.as_tensor())
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap()
    };
    let mut worst: f64 = 0.0;
    let g_zp = flat(&vzp);
    let g_zf = flat(&vzf);
    for i in 0..c * n {
        let mut f = |x: f64| {
            let mut z = zp.clone();
            z[i] = x;
            objective(&z, &zf, &ws)
        };
        worst = worst.max(grad_error(g_zp[i], central_difference(&mut f, zp[i])));
        let mut f = |x: f64| {
            let mut z = zf.clone();
            z[i] = x;
            objective(&zp, &z, &ws)
        };
        worst = worst.max(grad_error(g_zf[i], central_difference(&mut f, zf[i])));
    }
    for (m, v) in vws.iter().enumerate() {
        let g = flat(v);
        for i in 0..c * c {
            let mut f = |x: f64| {
                let mut w2 = ws.clone();
                w2[m][i] = x;
                objective(&zp, &zf, &w2)
            };
            worst = worst.max(grad_error(g[i], central_difference(&mut f, ws[m][i])));
        }
    }
    Check {
        name: "cross_attention_fuse gradient",
        worst,
        tol: GRAD_REL_TOL,
    }
}

fn random_masks(r: &mut ChaCha8Rng, b: usize, n: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let soft: Vec<Vec<f64>> = (0..b).map(|_| uniform(r, n, 0.0, 1.0)).collect();
    let hard: Vec<Vec<f64>> = (0..b)
        .map(|_| {
            (0..n)
                .map(|_| f64::from(u8::from(r.random_bool(0.3))))
                .collect()
        })
        .collect();
    (soft, hard)
}

pub fn check_dice_values() -> Check {
    let mut worst: f64 = 0.0;
    for trial in 0..20u64 {
        let mut r = rng(200 + trial);
        let (b, h, w) = (
            r.random_range(1..4),
            r.random_range(1..6),
            r.random_range(1..6),
        );
        let (p, t) = random_masks(&mut r, b, h * w);
        let eps = [1e-6, 1e-3, 1.0][trial as usize % 3];
        let got = dice_term(
            &t4(&p.concat(), (b, 1, h, w)),
            &t4(&t.concat(), (b, 1, h, w)),
            eps,
        )
        .unwrap()
        .to_vec1::<f64>()
        .unwrap();
        for (k, g) in got.iter().enumerate() {
            worst = worst.max((g - dice_reference(&p[k], &t[k], eps)).abs());
        }
    }
    Check {
        name: "dice_term value",
        worst,
        tol: VALUE_TOL,
    }
}

pub fn check_phase1_values() -> Check {
    let mut worst: f64 = 0.0;
    for trial in 0..20u64 {
        let mut r = rng(300 + trial);
        let (b, h, w) = (
            r.random_range(1..4),
            r.random_range(2..6),
            r.random_range(2..6),
        );
        let img = |r: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..b).map(|_| uniform(r, 3 * h * w, 0.0, 1.0)).collect()
        };
        let (ph, p) = (img(&mut r), img(&mut r));
        let (mh, m) = random_masks(&mut r, b, h * w);
        let lambda = r.random_range(0.0..3.0);
        let got = phase1_loss(
            &t4(&ph.concat(), (b, 3, h, w)),
            &t4(&p.concat(), (b, 3, h, w)),
            &t4(&mh.concat(), (b, 1, h, w)),
            &t4(&m.concat(), (b, 1, h, w)),
            lambda,
            1e-6,
        )
        .unwrap()
        .to_scalar::<f64>()
        .unwrap();
        worst = worst.max((got - phase1_reference(&ph, &p, &mh, &m, lambda, 1e-6)).abs());
    }
    Check {
        name: "phase1_loss value",
        worst,
        tol: VALUE_TOL,
    }
}

pub fn check_phase1_gradients() -> Check {
    let mut r = rng(31);
    let (b, h, w) = (2, 3, 3);
    let img = |r: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..b).map(|_| uniform(r, 3 * h * w, 0.0, 1.0)).collect()
    };
    let (ph, p) = (img(&mut r), img(&mut r));
    let (mh, m) = random_masks(&mut r, b, h * w);
    let lambda = 0.7;
    let vph = Var::from_tensor(&t4(&ph.concat(), (b, 3, h, w))).unwrap();
    let vmh = Var::from_tensor(&t4(&mh.concat(), (b, 1, h, w))).unwrap();
    let loss = phase1_loss(
        vph.as_tensor(),
        &t4(&p.concat(), (b, 3, h, w)),
        vmh.as_tensor(),
        &t4(&m.concat(), (b, 1, h, w)),
        lambda,
        1e-6,
    )
    .unwrap();
    let grads = loss.backward().unwrap();
    let g_ph = grads
        .get(vph.as_tensor())
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1::<f64>()
        .unwrap();
    let g_mh = grads
        .get(vmh.as_tensor())
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1::<f64>()
        .unwrap();
    let mut worst: f64 = 0.0;
    let per = 3 * h * w;
    for i in 0..b * per {
        let mut f = |x: f64| {
            let mut a = ph.clone();
            a[i / per][i % per] = x;
            phase1_reference(&a, &p, &mh, &m, lambda, 1e-6)
        };
        worst = worst.max(grad_error(
            g_ph[i],
            central_difference(&mut f, ph[i / per][i % per]),
        ));
    }
    let per = h * w;
    for i in 0..b * per {
        let mut f = |x: f64| {
            let mut a = mh.clone();
            a[i / per][i % per] = x;
            phase1_reference(&ph, &p, &a, &m, lambda, 1e-6)
        };
        worst = worst.max(grad_error(
            g_mh[i],
            central_difference(&mut f, mh[i / per][i % per]),
        ));
    }
    Check {
        name: "phase1_loss gradient",
        worst,
        tol: GRAD_REL_TOL,
    }
}

/// Backprop through the whole probe generator against central differences,
/// two random elements of every parameter tensor.
pub fn check_generator_parameter_gradients() -> Check {
    let cfg = GeneratorConfig {
        seed: 3,
        ..GeneratorConfig::probe()
    };
    let gen = GeneratorState::new(&cfg, DType::F64).unwrap();
    let res = cfg.resolution;
    let mut r = rng(41);
    let b = 2;
    let pre = t4(
        &uniform(&mut r, b * 3 * res * res, 0.0, 1.0),
        (b, 3, res, res),
    );
    let feat = t4(
        &uniform(&mut r, b * 4 * res * res, 0.0, 1.0),
        (b, 4, res, res),
    );
    let post = t4(
        &uniform(&mut r, b * 3 * res * res, 0.0, 1.0),
        (b, 3, res, res),
    );
    let scar: Vec<f64> = (0..b * res * res)
        .map(|_| f64::from(u8::from(r.random_bool(0.3))))
        .collect();
    let scar = t4(&scar, (b, 1, res, res));
    let loss_of = |g: &GeneratorState| {
        let out = g.forward(&pre, &feat).unwrap();
        phase1_loss(&out.post, &post, &out.mask, &scar, 1.0, 1e-6).unwrap()
    };
    let grads = loss_of(&gen).backward().unwrap();
    let mut worst: f64 = 0.0;
    for var in gen.store().vars() {
        let analytic = grads
            .get(var.as_tensor())
            .expect("every parameter reaches the loss")
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let base = var.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for _ in 0..2 {
            let i = r.random_range(0..base.len());
            let mut f = |x: f64| {
                let mut v = base.clone();
                v[i] = x;
                var.set(&Tensor::from_vec(v, var.shape(), &dev()).unwrap())
                    .unwrap();
                loss_of(&gen).to_scalar::<f64>().unwrap()
            };
            // Many parameter gradients are near 1e-7, where a 1e-6 step is
            // dominated by roundoff.
            let numeric = central_difference_step(&mut f, base[i], 1e-4);
            var.set(&Tensor::from_vec(base.clone(), var.shape(), &dev()).unwrap())
                .unwrap();
            worst = worst.max(grad_error(analytic[i], numeric));
        }
    }
    Check {
        name: "generator parameter gradient",
        worst,
        tol: GRAD_REL_TOL,
    }
}

pub fn check_bce_values() -> Check {
    let mut r = rng(51);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let x = r.random_range(-15.0..15.0);
        let y = u8::from(r.random_bool(0.5));
        worst = worst.max((bce_loss(x, y) - bce_reference(x, y)).abs());
    }
    Check {
        name: "bce_loss value",
        worst,
        tol: VALUE_TOL,
    }
}

pub fn check_bce_gradients() -> Check {
    let mut r = rng(52);
    let xs = uniform(&mut r, 16, -8.0, 8.0);
    let ys: Vec<f64> = (0..16)
        .map(|_| f64::from(u8::from(r.random_bool(0.5))))
        .collect();
    let v = Var::from_slice(&xs, 16, &dev()).unwrap();
    let loss =
        bce_loss_tensor(v.as_tensor(), &Tensor::from_slice(&ys, 16, &dev()).unwrap()).unwrap();
    let g = loss
        .backward()
        .unwrap()
        .get(v.as_tensor())
        .unwrap()
        .to_vec1::<f64>()
        .unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..16 {
        let mut f = |x: f64| {
            let mut a = xs.clone();
            a[i] = x;
            a.iter()
                .zip(&ys)
                .map(|(&x, &y)| bce_reference(x, y as u8))
                .sum::<f64>()
                / 16.0
        };
        worst = worst.max(grad_error(g[i], central_difference(&mut f, xs[i])));
    }
    Check {
        name: "bce_loss gradient",
        worst,
        tol: GRAD_REL_TOL,
    }
}

fn flat_params(params: &[ParamMaps]) -> Vec<f64> {
    params
        .iter()
        .flat_map(|p| p.channels.iter().map(|&v| v as f64))
        .collect()
}

fn perturbed(params: &[ParamMaps], flat_index: usize, value: f64) -> Vec<ParamMaps> {
    let mut out = params.to_vec();
    let per = out[0].channels.len();
    let (v, k) = (flat_index / per, flat_index % per);
    let slot = out[v].channels.as_slice_mut().unwrap();
    slot[k] = value as f32;
    out
}

/// Loss returned by the risk path against the literal formula evaluated on
/// the same logit and maps.
pub fn check_phase3_values() -> Check {
    let (gen, clf) = probe_models(11);
    let model = RiskModel::new(&gen, &clf).unwrap();
    let mut worst: f64 = 0.0;
    for trial in 0..5u64 {
        let study = random_study(600 + trial, gen.config().resolution);
        let anchor = study.params().unwrap();
        let ctx = model.context(&study, &anchor).unwrap();
        let mut r = rng(700 + trial);
        let moved: Vec<ParamMaps> = anchor
            .iter()
            .map(|p| {
                let mut q = p.clone();
                q.channels
                    .mapv_inplace(|v| (v + r.random_range(-0.1..0.1f32)).clamp(0.0, 1.0));
                q
            })
            .collect();
        let lambda = [0.0, 0.1, 2.0, 0.1, 0.5][trial as usize];
        let e = model.evaluate(&ctx, &moved, lambda, false).unwrap();
        let want = phase3_reference(e.logit, &flat_params(&moved), &flat_params(&anchor), lambda);
        worst = worst.max((e.loss - want).abs());
    }
    Check {
        name: "phase3_loss value",
        worst,
        tol: VALUE_TOL,
    }
}

/// Analytic gradient of the optimizer objective against central differences
/// at 20 random map entries of an f64 probe model.
pub fn check_phase3_gradients() -> Check {
    let (gen, clf) = probe_models(12);
    let model = RiskModel::new(&gen, &clf).unwrap();
    let study = random_study(800, gen.config().resolution);
    let anchor = study.params().unwrap();
    let ctx = model.context(&study, &anchor).unwrap();
    let mut r = rng(801);
    let start: Vec<ParamMaps> = anchor
        .iter()
        .map(|p| {
            let mut q = p.clone();
            q.channels
                .mapv_inplace(|v| (v + r.random_range(0.0..0.2f32)).min(1.0));
            q
        })
        .collect();
    // Maps are stored as f32; a power-of-two step keeps both probes exact.
    let e = model.evaluate(&ctx, &start, 0.1, true).unwrap();
    let grad = e.grad.unwrap();
    let flat_grad: Vec<f64> = grad
        .iter()
        .flat_map(|g| g.iter().map(|&v| v as f64))
        .collect();
    let base = flat_params(&start);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let i = r.random_range(0..base.len());
        let h = 2f64.powi(-10);
        let up = model
            .evaluate(&ctx, &perturbed(&start, i, base[i] + h), 0.1, false)
            .unwrap()
            .loss;
        let down = model
            .evaluate(&ctx, &perturbed(&start, i, base[i] - h), 0.1, false)
            .unwrap()
            .loss;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(grad_error(flat_grad[i], numeric));
    }
    Check {
        name: "phase3_loss gradient",
        worst,
        tol: GRAD_REL_TOL,
    }
}

pub fn check_masked_step_values() -> Check {
    let mut r = rng(61);
    let mut worst: f64 = 0.0;
    for trial in 0..50 {
        let (h, w) = (r.random_range(1..8), r.random_range(1..8));
        let x = Array3::from_shape_fn((4, h, w), |_| r.random_range(0.0..1.0f32));
        let g = Array3::from_shape_fn((4, h, w), |_| r.random_range(-10.0..10.0f32));
        let x0 = Array3::from_shape_fn((4, h, w), |_| r.random_range(0.0..1.0f32));
        let m = Array2::from_shape_fn((h, w), |_| f32::from(u8::from(r.random_bool(0.5))));
        let eta = r.random_range(0.001..0.3);
        let clamp = trial % 2 == 0;
        let out = masked_step(x.view(), g.view(), eta, m.view(), x0.view(), clamp).unwrap();
        for ((k, i, j), &o) in out.indexed_iter() {
            let want = masked_step_reference(
                x[[k, i, j]] as f64,
                g[[k, i, j]] as f64,
                eta,
                m[[i, j]] as f64,
                x0[[k, i, j]] as f64,
                clamp,
            );
            worst = worst.max((o as f64 - want).abs());
        }
    }
    Check {
        name: "masked_step value",
        worst,
        tol: VALUE_TOL,
    }
}

pub fn fidelity_checks() -> Vec<Check> {
    vec![
        check_fuse_values(),
        check_fuse_gradients(),
        check_dice_values(),
        check_phase1_values(),
        check_phase1_gradients(),
        check_generator_parameter_gradients(),
        check_bce_values(),
        check_bce_gradients(),
        check_phase3_values(),
        check_phase3_gradients(),
        check_masked_step_values(),
    ]
}

/// Random masked steps on one 64 px view; returns the number of steps after
/// which some outside-mask value differed from the anchor bit-for-bit.
pub fn freeze_violations(steps: usize, seed: u64) -> usize {
    let mut r = rng(seed);
    let res = 64;
    let x0 = Array3::from_shape_fn((4, res, res), |_| r.random_range(0.0..1.0f32));
    let mask = Array2::from_shape_fn((res, res), |_| f32::from(u8::from(r.random_bool(0.3))));
    let mut x = x0.clone();
    let mut bad = 0;
    for t in 0..steps {
        let scale = [1e-3f32, 1.0, 1e3][t % 3];
        let g = Array3::from_shape_fn((4, res, res), |_| r.random_range(-1.0..1.0f32) * scale);
        let eta = r.random_range(0.001..0.5);
        x = masked_step(x.view(), g.view(), eta, mask.view(), x0.view(), t % 2 == 0).unwrap();
        let frozen_ok = x
            .indexed_iter()
            .all(|((k, i, j), v)| mask[[i, j]] > 0.5 || v.to_bits() == x0[[k, i, j]].to_bits());
        if !frozen_ok {
            bad += 1;
        }
    }
    bad
}
