//! Risk-lowering refinement of procedural parameter maps.
//!
//! The objective is `softplus(logit) + reg_weight * sum((p - p0)^2)`, where
//! `softplus(logit) = -log(1 - sigmoid(logit))` and the logit comes from the
//! full six-view embedding path. Steps only move pixels inside the closed
//! support of the initial plan; every other pixel is pinned to its initial
//! value.

use std::path::Path;

use candle_core::{DType, Tensor, Var};
use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SofaError};
use crate::generator::{stack_images, GeneratorState};
use crate::hash::config_hash;
use crate::io::{f32_to_le_bytes, write_json_file};
use crate::morphology::build_ablation_mask;
use crate::nn::{scalar, softplus};
use crate::recurrence::{probability, ClassifierState};
use crate::study::{ParamChannel, ParamMaps, ScarMask, Study, ViewId, NUM_VIEWS};

pub const TRACE_FILE: &str = "trace.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub step_size: f64,
    /// Zero evaluates the start only.
    pub max_steps: usize,
    pub reg_weight: f64,
    pub closing_radius: usize,
    /// A step "stalls" when the loss drops by less than this.
    pub stop_tolerance: f64,
    /// Consecutive stalled steps before stopping.
    pub patience: usize,
    pub clamp: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            step_size: 0.05,
            max_steps: 100,
            reg_weight: 0.1,
            closing_radius: 2,
            stop_tolerance: 1e-5,
            patience: 10,
            clamp: true,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SofaError::Config(format!("optimizer: {m}")));
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad("step_size must be positive");
        }
        if !(self.reg_weight >= 0.0 && self.reg_weight.is_finite()) {
            return bad("reg_weight must be non-negative");
        }
        if self.closing_radius == 0 {
            return bad("closing_radius must be at least 1");
        }
        if self.stop_tolerance.is_nan() || self.stop_tolerance < 0.0 {
            return bad("stop_tolerance must be non-negative");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        Ok(())
    }

    pub fn hash(&self) -> Result<String> {
        config_hash(self)
    }
}

/// `-log(1 - sigmoid(logit)) + reg_weight * sq_dist`, in scalar form.
pub fn phase3_objective(logit: f64, sq_dist: f64, reg_weight: f64) -> f64 {
    let softplus = logit.max(0.0) + (-logit.abs()).exp().ln_1p();
    softplus + reg_weight * sq_dist
}

/// One masked descent step for one view:
/// `M * (p - step * grad) + (1 - M) * p0`, optionally clamped to `[0, 1]`.
///
/// `M` is hard, so the blend is evaluated as a select; outside-mask pixels are
/// copied from `p0` bit-for-bit even if the gradient there is not finite.
pub fn masked_step(
    current: ArrayView3<f32>,
    grad: ArrayView3<f32>,
    step_size: f64,
    mask: ArrayView2<f32>,
    initial: ArrayView3<f32>,
    clamp: bool,
) -> Result<Array3<f32>> {
    let (c, h, w) = current.dim();
    if grad.dim() != (c, h, w) || initial.dim() != (c, h, w) || mask.dim() != (h, w) {
        return Err(SofaError::Shape(format!(
            "step shapes {:?} {:?} {:?} {:?}",
            current.shape(),
            grad.shape(),
            initial.shape(),
            mask.shape()
        )));
    }
    let eta = step_size as f32;
    Ok(Array3::from_shape_fn((c, h, w), |(k, i, j)| {
        if mask[[i, j]] > 0.5 {
            let v = current[[k, i, j]] - eta * grad[[k, i, j]];
            if clamp {
                v.clamp(0.0, 1.0)
            } else {
                v
            }
        } else {
            initial[[k, i, j]]
        }
    }))
}

/// Optimized minus original, per channel. Positive means the optimizer
/// raised the value (drawn blue); negative means it lowered it (drawn red).
pub fn diff_maps(original: &ParamMaps, optimized: &ParamMaps) -> Result<Array3<f32>> {
    if original.channels.dim() != optimized.channels.dim() {
        return Err(SofaError::Shape(format!(
            "{:?} vs {:?}",
            original.channels.shape(),
            optimized.channels.shape()
        )));
    }
    Ok(&optimized.channels - &original.channels)
}

/// Frozen generator and classifier evaluated as one differentiable function
/// of the parameter maps.
pub struct RiskModel {
    gen: GeneratorState,
    clf: ClassifierState,
}

/// Per-study constants of the risk path.
pub struct StudyContext {
    z_pre: Tensor,
    initial: Tensor,
    dims: (usize, usize, usize, usize),
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: f64,
    pub logit: f64,
    pub risk: f64,
    pub reg: f64,
    /// `[views][4, H, W]` gradient of the loss, when requested.
    pub grad: Option<Vec<Array3<f32>>>,
}

impl RiskModel {
    pub fn new(gen: &GeneratorState, clf: &ClassifierState) -> Result<Self> {
        clf.check_extractor(gen)?;
        Ok(Self {
            gen: gen.frozen()?,
            clf: clf.frozen()?,
        })
    }

    /// Same models converted to `dtype` (f64 for finite-difference checks).
    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            gen: self.gen.to_dtype(dtype)?.frozen()?,
            clf: self.clf.to_dtype(dtype)?.frozen()?,
        })
    }

    pub fn dtype(&self) -> DType {
        self.gen.dtype()
    }

    pub fn generator_hash(&self) -> Result<String> {
        self.gen.hash()
    }

    pub fn classifier_hash(&self) -> Result<String> {
        self.clf.hash()
    }

    pub fn context(&self, study: &Study, anchor: &[ParamMaps]) -> Result<StudyContext> {
        let samples = study.ordered_samples()?;
        if anchor.len() != NUM_VIEWS {
            return Err(SofaError::Shape(format!(
                "expected {NUM_VIEWS} parameter maps, got {}",
                anchor.len()
            )));
        }
        let pre = stack_images(samples.iter().map(|s| s.pre.0.view()), self.dtype())?;
        let initial = stack_params(anchor, self.dtype())?;
        Ok(StudyContext {
            z_pre: self.gen.encode_pre(&pre)?,
            dims: initial.dims4()?,
            initial,
        })
    }

    fn logit_tensor(&self, ctx: &StudyContext, feat: &Tensor) -> Result<Tensor> {
        let fused = self.gen.fuse(&ctx.z_pre, &self.gen.encode_feat(feat)?)?;
        let z_bar = fused.mean((2, 3))?.mean_keepdim(0)?;
        self.clf.logits(&z_bar)
    }

    /// Loss terms and, optionally, the gradient with respect to the maps.
    pub fn evaluate(
        &self,
        ctx: &StudyContext,
        params: &[ParamMaps],
        reg_weight: f64,
        with_grad: bool,
    ) -> Result<Evaluation> {
        let x = stack_params(params, self.dtype())?;
        if x.dims4()? != ctx.dims {
            return Err(SofaError::Shape(format!(
                "maps {:?} vs context {:?}",
                x.dims(),
                ctx.dims
            )));
        }
        let var = Var::from_tensor(&x)?;
        let feat = var.as_tensor();
        let logit = self.logit_tensor(ctx, feat)?;
        let reg = (feat - &ctx.initial)?.sqr()?.sum_all()?;
        let loss = (softplus(&logit)?.sum_all()? + (&reg * reg_weight)?)?;
        let value = scalar(&loss)?;
        if !value.is_finite() {
            return Err(SofaError::NonFiniteLoss {
                value,
                context: "parameter optimization".into(),
            });
        }
        let grad = if with_grad {
            let grads = loss.backward()?;
            let g = grads
                .get(feat)
                .ok_or_else(|| SofaError::InvalidValue("no gradient reached the maps".into()))?;
            Some(unstack(g)?)
        } else {
            None
        };
        let logit = scalar(&logit)?;
        Ok(Evaluation {
            loss: value,
            logit,
            risk: probability(logit),
            reg: scalar(&reg)?,
            grad,
        })
    }
}

fn stack_params(params: &[ParamMaps], dtype: DType) -> Result<Tensor> {
    stack_images(params.iter().map(|p| p.channels.view()), dtype)
}

fn unstack(t: &Tensor) -> Result<Vec<Array3<f32>>> {
    let (n, c, h, w) = t.dims4()?;
    let flat = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let all = ndarray::Array4::from_shape_vec((n, c, h, w), flat)
        .map_err(|e| SofaError::Shape(e.to_string()))?;
    Ok(all.axis_iter(Axis(0)).map(|a| a.to_owned()).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub risk: f64,
    pub loss: f64,
    pub reg: f64,
    /// Lowest risk among accepted iterates up to this step.
    pub best_risk: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum StopReason {
    MaxSteps,
    Stalled,
}

#[derive(Clone, Debug)]
pub struct OptimizationTrace {
    pub config: OptimizerConfig,
    pub generator_hash: String,
    pub classifier_hash: String,
    /// Step 0 is the unmodified start.
    pub steps: Vec<StepRecord>,
    pub best_step: usize,
    pub no_improvement: bool,
    pub stop: StopReason,
    pub masks: Vec<ScarMask>,
    pub anchor: Vec<ParamMaps>,
    pub best: Vec<ParamMaps>,
}

impl OptimizationTrace {
    pub fn initial_risk(&self) -> f64 {
        self.steps[0].risk
    }

    pub fn final_risk(&self) -> f64 {
        self.steps[self.best_step].risk
    }

    /// Per-view signed difference of the returned plan against the anchor.
    pub fn diffs(&self) -> Result<Vec<Array3<f32>>> {
        self.anchor
            .iter()
            .zip(&self.best)
            .map(|(a, b)| diff_maps(a, b))
            .collect()
    }

    pub fn summary(&self) -> TraceSummary {
        TraceSummary {
            config: self.config.clone(),
            generator_hash: self.generator_hash.clone(),
            classifier_hash: self.classifier_hash.clone(),
            initial_risk: self.initial_risk(),
            final_risk: self.final_risk(),
            best_step: self.best_step,
            no_improvement: self.no_improvement,
            stop: self.stop.clone(),
            mask_pixels: self.masks.iter().map(|m| m.count()).collect(),
            steps: self.steps.clone(),
        }
    }

    /// Writes `trace.json` and `<view>/diff_<channel>.f32` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_json_file(&dir.join(TRACE_FILE), &self.summary())?;
        for (view, diff) in ViewId::ALL.iter().zip(self.diffs()?) {
            let vdir = dir.join(view.as_str());
            std::fs::create_dir_all(&vdir)?;
            for c in ParamChannel::ALL {
                let plane = diff.index_axis(Axis(0), c.index());
                std::fs::write(
                    vdir.join(format!("diff_{}.f32", c.as_str())),
                    f32_to_le_bytes(plane.iter().copied()),
                )?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub config: OptimizerConfig,
    pub generator_hash: String,
    pub classifier_hash: String,
    pub initial_risk: f64,
    pub final_risk: f64,
    pub best_step: usize,
    pub no_improvement: bool,
    pub stop: StopReason,
    pub mask_pixels: Vec<usize>,
    pub steps: Vec<StepRecord>,
}

/// Optimizes a study's own plan.
pub fn optimize_params(
    study: &Study,
    cfg: &OptimizerConfig,
    model: &RiskModel,
) -> Result<OptimizationTrace> {
    let anchor = study.params()?;
    optimize_from(study, &anchor, &anchor, cfg, model)
}

/// Descends from `start` while the mask and proximal term refer to `anchor`,
/// so a long run can be resumed in pieces. Returns the iterate with the lowest
/// risk among those whose loss does not exceed the start's, which makes the
/// reported best risk non-increasing and never worse than the start.
pub fn optimize_from(
    study: &Study,
    start: &[ParamMaps],
    anchor: &[ParamMaps],
    cfg: &OptimizerConfig,
    model: &RiskModel,
) -> Result<OptimizationTrace> {
    cfg.validate()?;
    if start.len() != anchor.len() {
        return Err(SofaError::Shape(format!(
            "{} start maps for {} anchor maps",
            start.len(),
            anchor.len()
        )));
    }
    let ctx = model.context(study, anchor)?;
    let masks: Vec<ScarMask> = anchor
        .iter()
        .map(|p| build_ablation_mask(p, cfg.closing_radius))
        .collect();
    // Pin the start to the anchor outside the mask so the freeze holds from
    // step 0 even for an arbitrary start.
    let mut current: Vec<ParamMaps> = start
        .iter()
        .zip(anchor)
        .zip(&masks)
        .map(|((s, a), m)| {
            let zero = Array3::zeros(s.channels.dim());
            Ok(ParamMaps {
                channels: masked_step(
                    s.channels.view(),
                    zero.view(),
                    1.0,
                    m.0.view(),
                    a.channels.view(),
                    cfg.clamp,
                )?,
                ranges: a.ranges,
            })
        })
        .collect::<Result<_>>()?;

    let mut eval = model.evaluate(&ctx, &current, cfg.reg_weight, true)?;
    let start_loss = eval.loss;
    let mut steps = vec![StepRecord {
        step: 0,
        risk: eval.risk,
        loss: eval.loss,
        reg: eval.reg,
        best_risk: eval.risk,
    }];
    let (mut best_step, mut best_risk, mut best) = (0, eval.risk, current.clone());
    let mut stalled = 0;
    let mut stop = StopReason::MaxSteps;
    for t in 1..=cfg.max_steps {
        let grad = eval.grad.take().expect("gradient requested");
        current = current
            .iter()
            .zip(&grad)
            .zip(&masks)
            .zip(anchor)
            .map(|(((p, g), m), a)| {
                Ok(ParamMaps {
                    channels: masked_step(
                        p.channels.view(),
                        g.view(),
                        cfg.step_size,
                        m.0.view(),
                        a.channels.view(),
                        cfg.clamp,
                    )?,
                    ranges: p.ranges,
                })
            })
            .collect::<Result<_>>()?;
        let prev_loss = eval.loss;
        eval = model.evaluate(&ctx, &current, cfg.reg_weight, true)?;
        if eval.loss <= start_loss && eval.risk < best_risk {
            best_step = t;
            best_risk = eval.risk;
            best = current.clone();
        }
        steps.push(StepRecord {
            step: t,
            risk: eval.risk,
            loss: eval.loss,
            reg: eval.reg,
            best_risk,
        });
        if prev_loss - eval.loss < cfg.stop_tolerance {
            stalled += 1;
            if stalled >= cfg.patience {
                stop = StopReason::Stalled;
                break;
            }
        } else {
            stalled = 0;
        }
    }
    Ok(OptimizationTrace {
        config: cfg.clone(),
        generator_hash: model.generator_hash()?,
        classifier_hash: model.classifier_hash()?,
        steps,
        best_step,
        no_improvement: best_step == 0,
        stop,
        masks,
        anchor: anchor.to_vec(),
        best,
    })
}

/// Mean over `region` of the summed signed change in `channels`.
pub fn mean_change_in(
    original: &ParamMaps,
    optimized: &ParamMaps,
    region: &Array2<bool>,
    channels: &[ParamChannel],
) -> Option<f64> {
    let n = region.iter().filter(|&&b| b).count();
    if n == 0 {
        return None;
    }
    let mut total = 0.0;
    for ((i, j), &inside) in region.indexed_iter() {
        if inside {
            for c in channels {
                let k = c.index();
                total += (optimized.channels[[k, i, j]] - original.channels[[k, i, j]]) as f64;
            }
        }
    }
    Some(total / n as f64)
}
