//! Synthetic cohort: procedural anatomy, lesion plans, an ablation dose oracle
//! and a recurrence label model. Every output is a pure function of
//! `(seed, config)`.

pub mod atrium;
pub mod dose;
pub mod label;
pub mod lesions;

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Result, SofaError};
use crate::hash::config_hash;
use crate::io::{write_study, CohortManifest, FORMAT_VERSION};
use crate::study::{ParamRanges, PostTarget, ScarMask, Study, ViewSample, DEFAULT_RESOLUTION};

pub use atrium::{synth_atrium, AtriumConfig, ViewAnatomy};
pub use dose::{apply_dose_model, DoseModelConfig};
pub use label::{label_recurrence, sample_label, LabelModelConfig, LabelOutcome};
pub use lesions::{plan_lesions, LesionConfig, LesionPlan, Strategy};

pub const DEFAULT_COHORT_SIZE: usize = 235;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub resolution: usize,
    pub ranges: ParamRanges,
    pub atrium: AtriumConfig,
    pub lesions: LesionConfig,
    pub dose: DoseModelConfig,
    pub label: LabelModelConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            resolution: DEFAULT_RESOLUTION,
            ranges: ParamRanges::default(),
            atrium: AtriumConfig::default(),
            lesions: LesionConfig::default(),
            dose: DoseModelConfig::default(),
            label: LabelModelConfig::default(),
        }
    }
}

impl SynthConfig {
    /// Desk-scale preset: 64 px views with a narrower ribbon and blur.
    pub fn tiny() -> Self {
        Self::at_resolution(64)
    }

    /// Scales the pixel-valued lesion and blur settings to `resolution`.
    pub fn at_resolution(resolution: usize) -> Self {
        let mut cfg = Self {
            resolution,
            ..Self::default()
        };
        if resolution < DEFAULT_RESOLUTION {
            cfg.lesions.ribbon_width = 3.0;
            cfg.dose.blur_sigma = 1.0;
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 16 {
            return Err(SofaError::Config("resolution must be at least 16".into()));
        }
        if self.lesions.ribbon_width <= 0.0 {
            return Err(SofaError::Config("ribbon width must be positive".into()));
        }
        self.ranges.validate()?;
        self.dose.validate()?;
        self.label.validate()
    }

    pub fn hash(&self) -> Result<String> {
        config_hash(self)
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent seed for a named sub-stream.
pub fn derive_seed(seed: u64, stream: &str, index: u64) -> u64 {
    let tag = stream.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    });
    splitmix(splitmix(seed ^ tag).wrapping_add(index))
}

pub fn rng_for(seed: u64, stream: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, index))
}

pub fn study_id(index: usize) -> String {
    format!("study_{index:04}")
}

/// Everything the oracle knows about one synthetic patient.
#[derive(Clone, Debug)]
pub struct SynthStudy {
    pub study: Study,
    pub plan: LesionPlan,
    pub anatomy: Vec<ViewAnatomy>,
    pub label: LabelOutcome,
}

/// Generates one study. `strategy = None` draws it from the configured mix.
pub fn synth_study(
    seed: u64,
    id: &str,
    cfg: &SynthConfig,
    strategy: Option<Strategy>,
) -> Result<SynthStudy> {
    cfg.validate()?;
    let strategy = strategy.unwrap_or_else(|| {
        if rng_for(seed, "strategy", 0).random::<f64>() < cfg.lesions.gap_strategy_fraction {
            Strategy::PviWithGaps
        } else {
            Strategy::PviComplete
        }
    });
    let anatomy = synth_atrium(seed, cfg);
    let (plan, maps) = plan_lesions(seed, &anatomy, cfg, strategy);
    let mut samples = Vec::with_capacity(anatomy.len());
    let mut scars: Vec<ScarMask> = Vec::with_capacity(anatomy.len());
    for (va, params) in anatomy.iter().zip(maps) {
        let (post, scar) = apply_dose_model(&va.pre, &params, &cfg.dose)?;
        scars.push(scar.clone());
        samples.push(ViewSample {
            view: va.view,
            pre: va.pre.clone(),
            params,
            target: Some(PostTarget { post, scar }),
        });
    }
    let label = label_recurrence(&scars, &plan, &cfg.label, seed);
    let mut meta = BTreeMap::new();
    meta.insert("seed".into(), json!(seed));
    meta.insert("strategy".into(), json!(strategy.as_str()));
    meta.insert("quality".into(), json!(plan.quality));
    meta.insert(
        "planned_gap_fraction".into(),
        json!(plan.planned_gap_fraction()),
    );
    meta.insert("gap_fraction".into(), json!(label.gap_fraction));
    meta.insert("recurrence_probability".into(), json!(label.p));
    Ok(SynthStudy {
        study: Study {
            id: id.to_string(),
            samples,
            label: Some(label.y),
            meta,
        },
        plan,
        anatomy,
        label,
    })
}

/// Per-study seed inside a cohort.
pub fn cohort_study_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, "study", index as u64)
}

/// In-memory cohort of `n` studies with the configured strategy mix.
pub fn synth_cohort(n: usize, seed: u64, cfg: &SynthConfig) -> Result<Vec<SynthStudy>> {
    synth_cohort_with(n, seed, cfg, None)
}

pub fn synth_cohort_with(
    n: usize,
    seed: u64,
    cfg: &SynthConfig,
    strategy: Option<Strategy>,
) -> Result<Vec<SynthStudy>> {
    (0..n)
        .into_par_iter()
        .map(|i| synth_study(cohort_study_seed(seed, i), &study_id(i), cfg, strategy))
        .collect()
}

/// Replaces the label of a generated study using another label model. Anatomy,
/// plans and scars are unaffected by the label model, so this equals
/// regenerating the study under `lm`.
pub fn relabel(study: &mut Study, lm: &LabelModelConfig) -> Result<LabelOutcome> {
    let gap = study
        .meta
        .get("gap_fraction")
        .and_then(|v| v.as_f64())
        .ok_or_else(|| SofaError::InvalidValue(format!("{} has no gap_fraction", study.id)))?;
    let seed = study
        .seed()
        .ok_or_else(|| SofaError::InvalidValue(format!("{} has no seed", study.id)))?;
    let out = sample_label(gap, lm, seed);
    study.label = Some(out.y);
    study
        .meta
        .insert("recurrence_probability".into(), json!(out.p));
    Ok(out)
}

/// Writes a cohort of `n` studies under `out_dir`. Each study is written into a
/// temporary directory and renamed into place; a study that fails to write is
/// removed and left out of the manifest.
pub fn generate_cohort(
    n: usize,
    seed: u64,
    cfg: &SynthConfig,
    out_dir: &Path,
) -> Result<CohortManifest> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let written: Vec<Option<String>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let id = study_id(i);
            let result = synth_study(cohort_study_seed(seed, i), &id, cfg, None).and_then(|s| {
                let tmp = out_dir.join(format!(".{id}.partial"));
                if tmp.exists() {
                    std::fs::remove_dir_all(&tmp)?;
                }
                if let Err(e) = write_study(&tmp, &s.study) {
                    let _ = std::fs::remove_dir_all(&tmp);
                    return Err(e);
                }
                let dest = out_dir.join(&id);
                if dest.exists() {
                    std::fs::remove_dir_all(&dest)?;
                }
                std::fs::rename(&tmp, &dest)?;
                Ok(())
            });
            match result {
                Ok(()) => Some(id),
                Err(e) => {
                    log::error!("study {id} failed: {e}");
                    None
                }
            }
        })
        .collect();
    let manifest = CohortManifest {
        format_version: FORMAT_VERSION,
        config_hash: cfg.hash()?,
        seed,
        resolution: cfg.resolution,
        studies: written.into_iter().flatten().collect(),
        config: serde_json::to_value(cfg)?,
    };
    manifest.write(out_dir)?;
    Ok(manifest)
}
