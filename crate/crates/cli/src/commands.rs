//! Subcommand implementations. Each writes its outputs and a run manifest
//! under `--out`.

use std::path::Path;

use anyhow::{bail, Context, Result};
use log::info;

use sofa_core::evaluate::{evaluate_phase1, evaluate_phase2, evaluate_phase3, RiskReduction};
use sofa_core::generator::{train_phase1, GeneratorState, InputMode};
use sofa_core::io::{f32_from_le_bytes, read_cohort, read_study, study_dir, write_json_file};
use sofa_core::optimize::{optimize_params, RiskModel};
use sofa_core::recurrence::{train_phase2, ClassifierState};
use sofa_core::synth::generate_cohort;
use sofa_core::{ParamChannel, ParamMaps, Study, ViewId};

use crate::config::RunConfig;
use crate::manifest::RunManifest;
use crate::panels::{encode_png, phase1_panel, phase3_panel};
use crate::{service, Command, Common, Mode, UsageError};

pub const SUMMARY_FILE: &str = "summary.json";
pub const PHASE1_PANEL: &str = "phase1.png";

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Defaults, then the config file, then `overrides` from flags.
fn load_config(common: &Common, overrides: impl FnOnce(&mut RunConfig)) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref()).map_err(|e| usage(format!("{e:#}")))?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    overrides(&mut cfg);
    cfg.resolved().map_err(|e| usage(format!("{e:#}")))
}

fn manifest(
    command: &str,
    args: &[String],
    cfg: &RunConfig,
    common: &Common,
) -> Result<RunManifest> {
    let mut m = RunManifest::new(command, args, cfg)?;
    if let Some(path) = &common.config {
        m.input("config", path)?;
    }
    Ok(m)
}

pub fn load_generator(dir: &Path) -> Result<GeneratorState> {
    let (gen, _) = GeneratorState::load(dir)
        .with_context(|| format!("loading generator from {}", dir.display()))?;
    Ok(gen)
}

pub fn load_classifier(dir: &Path) -> Result<ClassifierState> {
    let (clf, _) = ClassifierState::load(dir)
        .with_context(|| format!("loading classifier from {}", dir.display()))?;
    Ok(clf)
}

fn load_cohort(dir: &Path, resolution: usize) -> Result<Vec<Study>> {
    let studies = read_cohort(dir).with_context(|| format!("reading cohort {}", dir.display()))?;
    if studies.is_empty() {
        bail!("cohort {} has no studies", dir.display());
    }
    check_resolution(&studies, resolution)?;
    Ok(studies)
}

fn check_resolution(studies: &[Study], resolution: usize) -> Result<()> {
    for s in studies {
        if let Some((h, w)) = s.resolution() {
            if h != resolution || w != resolution {
                bail!("study {} is {h}x{w}, model expects {resolution}", s.id);
            }
        }
    }
    Ok(())
}

pub fn execute(command: Command, args: &[String]) -> Result<()> {
    match command {
        Command::Synth {
            common,
            n,
            beta0,
            beta1,
            out,
        } => {
            let cfg = load_config(&common, |c| {
                if let Some(b) = beta0 {
                    c.synth.label.beta0 = b;
                }
                if let Some(b) = beta1 {
                    c.synth.label.beta1 = b;
                }
            })?;
            let m = manifest("synth", args, &cfg, &common)?;
            let cohort = generate_cohort(n, cfg.seed, &cfg.synth, &out)?;
            info!(
                "wrote {} studies to {}",
                cohort.studies.len(),
                out.display()
            );
            m.finish(&out)?;
        }
        Command::TrainGen {
            common,
            cohort,
            mode,
            epochs,
            holdout,
            out,
        } => {
            let cfg = load_config(&common, |c| {
                if let Some(e) = epochs {
                    c.generator.epochs = e;
                }
                if let Some(h) = holdout {
                    c.eval.holdout = h;
                }
                c.generator.inputs = match mode {
                    Mode::Fusion => InputMode::Fusion,
                    Mode::ParamsOnly => InputMode::ParamsOnly,
                };
            })?;
            let mut m = manifest("train-gen", args, &cfg, &common)?;
            m.input("cohort", &cohort)?;
            let studies = load_cohort(&cohort, cfg.generator.resolution)?;
            if cfg.eval.holdout >= studies.len() {
                return Err(usage(format!(
                    "holdout {} leaves no training studies out of {}",
                    cfg.eval.holdout,
                    studies.len()
                )));
            }
            let (train, val) = studies.split_at(studies.len() - cfg.eval.holdout);
            let (gen, report) = train_phase1(train, val, &cfg.generator)?;
            info!(
                "generator loss {:.5} -> {:.5}",
                report.initial_loss, report.final_loss
            );
            gen.save(&out, Some(&report))?;
            m.finish(&out)?;
        }
        Command::TrainClf {
            common,
            cohort,
            generator,
            epochs,
            folds,
            out,
        } => {
            let cfg = load_config(&common, |c| {
                if let Some(e) = epochs {
                    c.classifier.epochs = e;
                }
                if let Some(f) = folds {
                    c.classifier.folds = f;
                }
            })?;
            let mut m = manifest("train-clf", args, &cfg, &common)?;
            m.input("cohort", &cohort)?;
            m.input("generator", &generator)?;
            let gen = load_generator(&generator)?;
            let studies = load_cohort(&cohort, gen.config().resolution)?;
            let (clf, report) = train_phase2(&studies, &gen, &cfg.classifier)?;
            if let Some(a) = &report.auc {
                info!("cross-validated AUC {:.3} ± {:.3}", a.mean, a.std);
            }
            clf.save(&out, Some(&report))?;
            m.finish(&out)?;
        }
        Command::Optimize {
            common,
            cohort,
            generator,
            classifier,
            study,
            steps,
            step_size,
            reg_weight,
            out,
        } => {
            let cfg = load_config(&common, |c| {
                if let Some(s) = steps {
                    c.optimizer.max_steps = s;
                }
                if let Some(s) = step_size {
                    c.optimizer.step_size = s;
                }
                if let Some(r) = reg_weight {
                    c.optimizer.reg_weight = r;
                }
            })?;
            let mut m = manifest("optimize", args, &cfg, &common)?;
            m.input("cohort", &cohort)?;
            m.input("generator", &generator)?;
            m.input("classifier", &classifier)?;
            let gen = load_generator(&generator)?;
            let clf = load_classifier(&classifier)?;
            let model = RiskModel::new(&gen, &clf)?;
            let studies = if study.is_empty() {
                load_cohort(&cohort, gen.config().resolution)?
            } else {
                let s = study
                    .iter()
                    .map(|id| {
                        read_study(&study_dir(&cohort, id)).with_context(|| format!("study {id}"))
                    })
                    .collect::<Result<Vec<_>>>()?;
                check_resolution(&s, gen.config().resolution)?;
                s
            };
            std::fs::create_dir_all(&out)?;
            let (mut before, mut after, mut rows) = (Vec::new(), Vec::new(), Vec::new());
            for s in &studies {
                let trace = optimize_params(s, &cfg.optimizer, &model)?;
                info!(
                    "{}: risk {:.4} -> {:.4}",
                    s.id,
                    trace.initial_risk(),
                    trace.final_risk()
                );
                trace.write(&out.join(&s.id))?;
                before.push(trace.initial_risk());
                after.push(trace.final_risk());
                rows.push(sofa_core::evaluate::StudyRisk {
                    id: s.id.clone(),
                    before: trace.initial_risk(),
                    after: trace.final_risk(),
                    best_step: trace.best_step,
                    no_improvement: trace.no_improvement,
                });
            }
            let mut summary = RiskReduction::from_pairs(&before, &after)?;
            summary.studies = rows;
            write_json_file(&out.join(SUMMARY_FILE), &summary)?;
            m.finish(&out)?;
        }
        Command::Eval {
            common,
            phase,
            cohort,
            generator,
            baseline,
            classifier,
            folds,
            steps,
            out,
        } => {
            let cfg = load_config(&common, |c| {
                if let Some(f) = folds {
                    c.eval.folds = f;
                }
                if let Some(s) = steps {
                    c.optimizer.max_steps = s;
                }
            })?;
            let mut m = manifest("eval", args, &cfg, &common)?;
            m.input("cohort", &cohort)?;
            m.input("generator", &generator)?;
            let gen = load_generator(&generator)?;
            let studies = load_cohort(&cohort, gen.config().resolution)?;
            let report = match phase {
                1 => {
                    let base = match &baseline {
                        Some(dir) => {
                            m.input("baseline", dir)?;
                            Some(load_generator(dir)?)
                        }
                        None => None,
                    };
                    let held = cfg.eval.holdout.min(studies.len());
                    let eval_set = if held > 0 {
                        &studies[studies.len() - held..]
                    } else {
                        &studies[..]
                    };
                    evaluate_phase1(eval_set, &gen, base.as_ref(), cfg.eval.folds, cfg.seed)?
                }
                _ => {
                    let dir = classifier.as_ref().ok_or_else(|| {
                        usage(format!("--classifier is required for phase {phase}"))
                    })?;
                    m.input("classifier", dir)?;
                    let clf = load_classifier(dir)?;
                    if phase == 2 {
                        evaluate_phase2(&studies, &gen, &clf, cfg.eval.folds, cfg.seed)?
                    } else {
                        evaluate_phase3(&studies, &RiskModel::new(&gen, &clf)?, &cfg.optimizer)?
                    }
                }
            };
            report.write(&out)?;
            m.finish(&out)?;
        }
        Command::Plot {
            common,
            cohort,
            study,
            generator,
            trace,
            out,
        } => {
            let cfg = load_config(&common, |_| {})?;
            let mut m = manifest("plot", args, &cfg, &common)?;
            let sdir = study_dir(&cohort, &study);
            m.input("study", &sdir)?;
            let s = read_study(&sdir).with_context(|| format!("study {study}"))?;
            let samples = s.ordered_samples()?;
            let predicted = match &generator {
                Some(dir) => {
                    m.input("generator", dir)?;
                    let gen = load_generator(dir)?;
                    check_resolution(std::slice::from_ref(&s), gen.config().resolution)?;
                    gen.predict(&samples)?
                        .into_iter()
                        .map(|(post, _)| Some(post))
                        .collect()
                }
                None => vec![None; samples.len()],
            };
            std::fs::create_dir_all(&out)?;
            std::fs::write(
                out.join(PHASE1_PANEL),
                encode_png(&phase1_panel(&samples, &predicted)?)?,
            )?;
            if let Some(tdir) = &trace {
                let tdir = tdir.join(&study);
                m.input("trace", &tdir)?;
                let original: Vec<ParamMaps> = samples.iter().map(|v| v.params.clone()).collect();
                let optimized = read_optimized(&tdir, &original)?;
                let names: Vec<&str> = ViewId::ALL.iter().map(|v| v.as_str()).collect();
                for ch in ParamChannel::ALL {
                    let img = phase3_panel(&names, &original, &optimized, ch)?;
                    std::fs::write(
                        out.join(format!("phase3_{}.png", ch.as_str())),
                        encode_png(&img)?,
                    )?;
                }
            }
            m.finish(&out)?;
        }
        Command::Serve {
            common,
            cohort,
            generator,
            classifier,
            addr,
            cors_origin,
            out,
        } => {
            let cfg = load_config(&common, |_| {})?;
            let state = service::AppState::load(
                cohort.as_deref(),
                generator.as_deref(),
                classifier.as_deref(),
                cfg.optimizer.clone(),
            )?;
            if let Some(dir) = &out {
                let mut m = manifest("serve", args, &cfg, &common)?;
                for (name, p) in [
                    ("cohort", &cohort),
                    ("generator", &generator),
                    ("classifier", &classifier),
                ] {
                    if let Some(p) = p {
                        m.input(name, p)?;
                    }
                }
                std::fs::create_dir_all(dir)?;
                m.finish(dir)?;
            }
            let rt = tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()?;
            rt.block_on(service::serve(state, addr, cors_origin.as_deref()))?;
        }
    }
    Ok(())
}

/// Rebuilds optimized maps from the per-view diffs of a trace directory;
/// views without diffs come back as `None`.
fn read_optimized(dir: &Path, original: &[ParamMaps]) -> Result<Vec<Option<ParamMaps>>> {
    ViewId::ALL
        .iter()
        .zip(original)
        .map(|(view, orig)| {
            let mut p = orig.clone();
            for ch in ParamChannel::ALL {
                let path = dir
                    .join(view.as_str())
                    .join(format!("diff_{}.f32", ch.as_str()));
                let Ok(bytes) = std::fs::read(&path) else {
                    return Ok(None);
                };
                let diff = f32_from_le_bytes(&bytes)?;
                let mut plane = p.channels.index_axis_mut(ndarray::Axis(0), ch.index());
                if diff.len() != plane.len() {
                    bail!(
                        "{} has {} values for a {:?} map",
                        path.display(),
                        diff.len(),
                        plane.dim()
                    );
                }
                plane.iter_mut().zip(diff).for_each(|(v, d)| *v += d);
            }
            Ok(Some(p))
        })
        .collect()
}
