//! Image, mask and classification metrics, fold splitting and summaries.

use ndarray::{Array2, ArrayView2, ArrayView3, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SofaError};
use crate::synth::rng_for;

pub const PSNR_CAP_DB: f64 = 99.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub max_val: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            max_val: 1.0,
        }
    }
}

fn same_shape(a: &[usize], b: &[usize]) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(SofaError::Shape(format!("{a:?} vs {b:?}")))
    }
}

pub fn mse(a: ArrayView3<f32>, b: ArrayView3<f32>) -> Result<f64> {
    same_shape(a.shape(), b.shape())?;
    let n = a.len().max(1) as f64;
    Ok(a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / n)
}

/// `10 log10(max^2 / mse)`, capped at [`PSNR_CAP_DB`].
pub fn psnr_from_mse(mse: f64, max_val: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (max_val * max_val / mse).log10()).min(PSNR_CAP_DB)
}

pub fn psnr(a: ArrayView3<f32>, b: ArrayView3<f32>, max_val: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?, max_val))
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering with a 1D kernel along both axes.
fn filter_valid(x: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    let (h, w) = x.dim();
    let n = k.len();
    let (ho, wo) = (h + 1 - n, w + 1 - n);
    let rows: Array2<f64> = Array2::from_shape_fn((h, wo), |(i, j)| {
        (0..n).map(|t| k[t] * x[[i, j + t]]).sum::<f64>()
    });
    Array2::from_shape_fn((ho, wo), |(i, j)| {
        (0..n).map(|t| k[t] * rows[[i + t, j]]).sum::<f64>()
    })
}

/// Mean SSIM over all full Gaussian windows of one channel.
pub fn ssim_channel(a: ArrayView2<f32>, b: ArrayView2<f32>, cfg: &SsimConfig) -> Result<f64> {
    same_shape(a.shape(), b.shape())?;
    let (h, w) = a.dim();
    if h < cfg.window || w < cfg.window {
        return Err(SofaError::Shape(format!(
            "ssim needs at least {0}x{0} pixels, got {h}x{w}",
            cfg.window
        )));
    }
    let k = gaussian_window(cfg.window, cfg.sigma);
    let x = a.mapv(|v| v as f64);
    let y = b.mapv(|v| v as f64);
    let mx = filter_valid(&x, &k);
    let my = filter_valid(&y, &k);
    let sxx = filter_valid(&(&x * &x), &k);
    let syy = filter_valid(&(&y * &y), &k);
    let sxy = filter_valid(&(&x * &y), &k);
    let c1 = (cfg.k1 * cfg.max_val).powi(2);
    let c2 = (cfg.k2 * cfg.max_val).powi(2);
    let mut total = 0.0;
    for (((&mx, &my), (&sxx, &syy)), &sxy) in mx
        .iter()
        .zip(my.iter())
        .zip(sxx.iter().zip(syy.iter()))
        .zip(sxy.iter())
    {
        let vx = sxx - mx * mx;
        let vy = syy - my * my;
        let cov = sxy - mx * my;
        total +=
            ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    Ok(total / mx.len() as f64)
}

/// Channel-averaged SSIM of `[C, H, W]` images.
pub fn ssim(a: ArrayView3<f32>, b: ArrayView3<f32>, cfg: &SsimConfig) -> Result<f64> {
    same_shape(a.shape(), b.shape())?;
    let c = a.len_of(Axis(0));
    let mut total = 0.0;
    for ch in 0..c {
        total += ssim_channel(a.index_axis(Axis(0), ch), b.index_axis(Axis(0), ch), cfg)?;
    }
    Ok(total / c as f64)
}

/// Dice of the two masks after thresholding both at `threshold` (strictly
/// greater). Two empty masks score 1.
pub fn dice_score(pred: ArrayView2<f32>, gt: ArrayView2<f32>, threshold: f32) -> Result<f64> {
    same_shape(pred.shape(), gt.shape())?;
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        let (p, g) = (p > threshold, g > threshold);
        inter += usize::from(p && g);
        a += usize::from(p);
        b += usize::from(g);
    }
    Ok(if a + b == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (a + b) as f64
    })
}

/// Rank-based AUC (Mann-Whitney U), ties counted as one half. `None` unless
/// both classes are present.
pub fn auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    if scores.len() != labels.len() {
        return None;
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Average 1-based ranks over tie groups.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if labels[k] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// Share of `(score >= threshold) == (label == 1)`.
pub fn accuracy(scores: &[f64], labels: &[u8], threshold: f64) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &y)| (s >= threshold) == (y == 1))
        .count();
    hits as f64 / scores.len() as f64
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub seed: u64,
    pub folds: Vec<Vec<String>>,
}

impl FoldSplit {
    /// Ids outside fold `k`.
    pub fn train_ids(&self, k: usize) -> Vec<String> {
        self.folds
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != k)
            .flat_map(|(_, f)| f.iter().cloned())
            .collect()
    }
}

/// Seeded shuffle, then contiguous chunks whose sizes differ by at most one.
pub fn kfold_split(ids: &[String], k: usize, seed: u64) -> Result<FoldSplit> {
    let n = ids.len();
    if k == 0 || k > n {
        return Err(SofaError::InvalidValue(format!(
            "cannot split {n} ids into {k} folds"
        )));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut rng_for(seed, "kfold", 0));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        folds.push(shuffled[start..start + len].to_vec());
        start += len;
    }
    Ok(FoldSplit { seed, folds })
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `100 (before - after) / before`.
pub fn percent_reduction(before: f64, after: f64) -> f64 {
    100.0 * (before - after) / before
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
    pub per_fold: Vec<f64>,
}

impl MetricSummary {
    pub fn from_folds(per_fold: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&per_fold);
        Self {
            mean,
            std,
            per_fold,
        }
    }
}
