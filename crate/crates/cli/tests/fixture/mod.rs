//! Small cohort and checkpoints on disk, built once per test binary.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use sofa_core::generator::{train_phase1, GeneratorConfig};
use sofa_core::recurrence::{train_phase2, ClassifierConfig};
use sofa_core::synth::{generate_cohort, SynthConfig};

pub const RESOLUTION: usize = 16;
pub const STUDIES: usize = 8;

pub struct Fixture {
    _root: tempfile::TempDir,
    pub cohort: PathBuf,
    pub generator: PathBuf,
    pub classifier: PathBuf,
}

pub fn generator_config() -> GeneratorConfig {
    GeneratorConfig {
        resolution: RESOLUTION,
        channels: 8,
        encoder_widths: vec![4, 8],
        decoder_widths: vec![8, 4],
        mask_hidden: 4,
        epochs: 2,
        ..GeneratorConfig::default()
    }
}

/// Config file matching the fixture models, for CLI runs.
pub const CONFIG_TOML: &str = "\
seed = 3
[synth]
resolution = 16
[generator]
resolution = 16
channels = 8
encoder_widths = [4, 8]
decoder_widths = [8, 4]
mask_hidden = 4
epochs = 2
[classifier]
epochs = 40
folds = 2
[optimizer]
max_steps = 5
[eval]
folds = 2
";

pub fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let root = tempfile::tempdir().unwrap();
        let cohort = root.path().join("cohort");
        let synth = SynthConfig::at_resolution(RESOLUTION);
        generate_cohort(STUDIES, 1, &synth, &cohort).unwrap();
        let studies = sofa_core::io::read_cohort(&cohort).unwrap();
        let (gen, report) = train_phase1(&studies, &[], &generator_config()).unwrap();
        let generator = root.path().join("generator");
        gen.save(&generator, Some(&report)).unwrap();
        let cfg = ClassifierConfig {
            folds: 0,
            epochs: 60,
            weight_decay: 0.01,
            learning_rate: 1e-2,
            ..Default::default()
        };
        let (clf, _) = train_phase2(&studies, &gen, &cfg).unwrap();
        let classifier = root.path().join("classifier");
        clf.save(&classifier, None).unwrap();
        Fixture {
            cohort,
            generator,
            classifier,
            _root: root,
        }
    })
}

pub fn path_str(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}
