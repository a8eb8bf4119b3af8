//! Cohort-level evaluation of the three stages.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SofaError};
use crate::generator::GeneratorState;
use crate::io::write_json_file;
use crate::metrics::{
    accuracy, auc, dice_score, kfold_split, mse, percent_reduction, psnr_from_mse, ssim,
    MetricSummary, SsimConfig,
};
use crate::optimize::{optimize_params, OptimizerConfig, RiskModel};
use crate::recurrence::{embed_cohort, predict_logits, probability, ClassifierState};
use crate::study::{RgbImage, ScarMask, Study};

/// Per-view predicted post image and scar for one study.
type Predictor<'a> = dyn Fn(&Study) -> Result<Vec<(RgbImage, ScarMask)>> + Sync + 'a;

pub const REPORT_FILE: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const COPY_PRE: &str = "copy_pre";
pub const PARAMS_ONLY: &str = "params_only";
pub const FUSION: &str = "sofa";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyRisk {
    pub id: String,
    pub before: f64,
    pub after: f64,
    pub best_step: usize,
    pub no_improvement: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskReduction {
    pub mean_before: f64,
    pub mean_after: f64,
    pub percent_reduction: f64,
    pub studies: Vec<StudyRisk>,
}

impl RiskReduction {
    pub fn from_pairs(before: &[f64], after: &[f64]) -> Result<Self> {
        if before.is_empty() || before.len() != after.len() {
            return Err(SofaError::InvalidValue(format!(
                "{} before vs {} after risks",
                before.len(),
                after.len()
            )));
        }
        let n = before.len() as f64;
        let mean_before = before.iter().sum::<f64>() / n;
        let mean_after = after.iter().sum::<f64>() / n;
        Ok(Self {
            mean_before,
            mean_after,
            percent_reduction: percent_reduction(mean_before, mean_after),
            studies: Vec::new(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub phase: u8,
    pub n_studies: usize,
    pub folds: usize,
    pub seed: u64,
    /// Content hashes of the models involved, by role.
    pub models: BTreeMap<String, String>,
    /// method -> metric -> per-fold summary
    pub metrics: BTreeMap<String, BTreeMap<String, MetricSummary>>,
    pub risk: Option<RiskReduction>,
}

impl EvalReport {
    fn new(phase: u8, n_studies: usize, folds: usize, seed: u64) -> Self {
        Self {
            phase,
            n_studies,
            folds,
            seed,
            models: BTreeMap::new(),
            metrics: BTreeMap::new(),
            risk: None,
        }
    }

    pub fn metric(&self, method: &str, metric: &str) -> Option<&MetricSummary> {
        self.metrics.get(method)?.get(metric)
    }

    /// One row per method and metric, then the risk summary if present.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,metric,mean,std\n");
        for (method, ms) in &self.metrics {
            for (name, s) in ms {
                out.push_str(&format!("{method},{name},{},{}\n", s.mean, s.std));
            }
        }
        if let Some(r) = &self.risk {
            out.push_str(&format!("optimizer,mean_before,{},\n", r.mean_before));
            out.push_str(&format!("optimizer,mean_after,{},\n", r.mean_after));
            out.push_str(&format!(
                "optimizer,percent_reduction,{},\n",
                r.percent_reduction
            ));
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_json_file(&dir.join(REPORT_FILE), self)?;
        std::fs::write(dir.join(REPORT_CSV), self.to_csv())?;
        Ok(())
    }
}

/// Per-study indices of each fold, in cohort order within a fold.
fn fold_indices(cohort: &[Study], folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let ids: Vec<String> = cohort.iter().map(|s| s.id.clone()).collect();
    let split = kfold_split(&ids, folds, seed)?;
    Ok(split
        .folds
        .iter()
        .map(|f| {
            let mut idx: Vec<usize> = f
                .iter()
                .map(|id| ids.iter().position(|x| x == id).expect("id from cohort"))
                .collect();
            idx.sort_unstable();
            idx
        })
        .collect())
}

#[derive(Clone, Copy, Default)]
struct ImageScores {
    mse: f64,
    ssim: f64,
    dice: f64,
}

fn score_study(study: &Study, predict: &Predictor) -> Result<Vec<ImageScores>> {
    let samples = study.ordered_samples()?;
    let preds = predict(study)?;
    let cfg = SsimConfig::default();
    samples
        .iter()
        .zip(preds)
        .map(|(s, (post, scar))| {
            let t = s
                .target
                .as_ref()
                .ok_or_else(|| SofaError::MissingTarget(format!("{} / {}", study.id, s.view)))?;
            Ok(ImageScores {
                mse: mse(post.0.view(), t.post.0.view())?,
                ssim: ssim(post.0.view(), t.post.0.view(), &cfg)?,
                dice: dice_score(scar.0.view(), t.scar.0.view(), 0.5)?,
            })
        })
        .collect()
}

fn summarize_images(
    per_study: &[Vec<ImageScores>],
    folds: &[Vec<usize>],
) -> BTreeMap<String, MetricSummary> {
    let fold_mean = |f: &dyn Fn(&ImageScores) -> f64| -> Vec<f64> {
        folds
            .iter()
            .map(|idx| {
                let vals: Vec<f64> = idx
                    .iter()
                    .flat_map(|&i| per_study[i].iter().map(f))
                    .collect();
                vals.iter().sum::<f64>() / vals.len().max(1) as f64
            })
            .collect()
    };
    let mut out = BTreeMap::new();
    out.insert(
        "mse".into(),
        MetricSummary::from_folds(fold_mean(&|s| s.mse)),
    );
    out.insert(
        "psnr".into(),
        MetricSummary::from_folds(fold_mean(&|s| psnr_from_mse(s.mse, 1.0))),
    );
    out.insert(
        "ssim".into(),
        MetricSummary::from_folds(fold_mean(&|s| s.ssim)),
    );
    out.insert(
        "dice".into(),
        MetricSummary::from_folds(fold_mean(&|s| s.dice)),
    );
    out
}

/// Image metrics of the fusion generator against the copy-pre baseline and,
/// when given, the params-only generator. Metrics are averaged per image
/// within each fold, then summarized over folds.
pub fn evaluate_phase1(
    cohort: &[Study],
    gen: &GeneratorState,
    params_only: Option<&GeneratorState>,
    folds: usize,
    seed: u64,
) -> Result<EvalReport> {
    let idx = fold_indices(cohort, folds, seed)?;
    let mut report = EvalReport::new(1, cohort.len(), folds, seed);
    let copy = |s: &Study| -> Result<Vec<_>> {
        Ok(s.ordered_samples()?
            .iter()
            .map(|v| {
                (
                    v.pre.clone(),
                    ScarMask::zeros(v.pre.height(), v.pre.width()),
                )
            })
            .collect())
    };
    let mut methods: Vec<(&str, Box<Predictor>)> = vec![(COPY_PRE, Box::new(copy))];
    methods.push((
        FUSION,
        Box::new(|s: &Study| gen.predict(&s.ordered_samples()?)),
    ));
    report.models.insert(FUSION.into(), gen.hash()?);
    if let Some(po) = params_only {
        methods.push((
            PARAMS_ONLY,
            Box::new(move |s: &Study| po.predict(&s.ordered_samples()?)),
        ));
        report.models.insert(PARAMS_ONLY.into(), po.hash()?);
    }
    for (name, predict) in methods {
        let scores: Vec<Vec<ImageScores>> = cohort
            .par_iter()
            .map(|s| score_study(s, predict.as_ref()))
            .collect::<Result<_>>()?;
        report
            .metrics
            .insert(name.into(), summarize_images(&scores, &idx));
    }
    Ok(report)
}

/// AUC and accuracy of fixed models, per fold of the cohort.
pub fn evaluate_phase2(
    cohort: &[Study],
    gen: &GeneratorState,
    clf: &ClassifierState,
    folds: usize,
    seed: u64,
) -> Result<EvalReport> {
    clf.check_extractor(gen)?;
    let labels: Vec<u8> = cohort
        .iter()
        .map(|s| {
            s.label
                .ok_or_else(|| SofaError::MissingTarget(format!("{} has no label", s.id)))
        })
        .collect::<Result<_>>()?;
    let probs: Vec<f64> = predict_logits(&embed_cohort(cohort, gen)?, clf)?
        .into_iter()
        .map(probability)
        .collect();
    let idx = fold_indices(cohort, folds, seed)?;
    let (mut aucs, mut accs) = (Vec::new(), Vec::new());
    for f in &idx {
        let p: Vec<f64> = f.iter().map(|&i| probs[i]).collect();
        let y: Vec<u8> = f.iter().map(|&i| labels[i]).collect();
        if let Some(a) = auc(&p, &y) {
            aucs.push(a);
        }
        accs.push(accuracy(&p, &y, 0.5));
    }
    let mut report = EvalReport::new(2, cohort.len(), folds, seed);
    report.models.insert("generator".into(), gen.hash()?);
    report.models.insert("classifier".into(), clf.hash()?);
    let mut m = BTreeMap::new();
    if !aucs.is_empty() {
        m.insert("auc".into(), MetricSummary::from_folds(aucs));
    }
    m.insert("accuracy".into(), MetricSummary::from_folds(accs));
    if let Some(a) = auc(&probs, &labels) {
        m.insert("auc_pooled".into(), MetricSummary::from_folds(vec![a]));
    }
    report.metrics.insert(FUSION.into(), m);
    Ok(report)
}

/// Optimizes every study and reports mean predicted risk before and after.
pub fn evaluate_phase3(
    cohort: &[Study],
    model: &RiskModel,
    cfg: &OptimizerConfig,
) -> Result<EvalReport> {
    let studies: Vec<StudyRisk> = cohort
        .par_iter()
        .map(|s| {
            let tr = optimize_params(s, cfg, model)?;
            Ok(StudyRisk {
                id: s.id.clone(),
                before: tr.initial_risk(),
                after: tr.final_risk(),
                best_step: tr.best_step,
                no_improvement: tr.no_improvement,
            })
        })
        .collect::<Result<_>>()?;
    let before: Vec<f64> = studies.iter().map(|s| s.before).collect();
    let after: Vec<f64> = studies.iter().map(|s| s.after).collect();
    let mut risk = RiskReduction::from_pairs(&before, &after)?;
    risk.studies = studies;
    let mut report = EvalReport::new(3, cohort.len(), 0, 0);
    report
        .models
        .insert("generator".into(), model.generator_hash()?);
    report
        .models
        .insert("classifier".into(), model.classifier_hash()?);
    report.risk = Some(risk);
    Ok(report)
}
