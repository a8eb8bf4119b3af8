//! Run configuration: one TOML file, overridden by command-line flags.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use sofa_core::generator::GeneratorConfig;
use sofa_core::hash::config_hash;
use sofa_core::io::FORMAT_VERSION;
use sofa_core::optimize::OptimizerConfig;
use sofa_core::recurrence::ClassifierConfig;
use sofa_core::synth::SynthConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub folds: usize,
    /// Trailing studies held out from generator training.
    pub holdout: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            holdout: 0,
        }
    }
}

/// Merged configuration of every stage. Defaults are the 64 px desk-scale
/// presets. `seed` is the single source of randomness; it is copied into the
/// stage configs by [`RunConfig::resolved`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub format_version: u32,
    pub seed: u64,
    pub synth: SynthConfig,
    pub generator: GeneratorConfig,
    pub classifier: ClassifierConfig,
    pub optimizer: OptimizerConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            format_version: FORMAT_VERSION,
            seed: 0,
            synth: SynthConfig::tiny(),
            generator: GeneratorConfig::tiny(),
            classifier: ClassifierConfig::default(),
            optimizer: OptimizerConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses `text` layered over the defaults, so a partial section keeps the
    /// default values of the keys it omits.
    pub fn from_toml(text: &str) -> Result<Self> {
        let file: toml::Table = toml::from_str(text).context("invalid config file")?;
        let mut merged = toml::Table::try_from(Self::default())?;
        merge(&mut merged, file);
        let cfg: Self = merged.try_into().context("invalid config file")?;
        if cfg.format_version != FORMAT_VERSION {
            anyhow::bail!(
                "config format_version {} is not supported (expected {FORMAT_VERSION})",
                cfg.format_version
            );
        }
        Ok(cfg)
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                Self::from_toml(&text)
            }
        }
    }

    /// Applies `seed` to every stage and checks all sections.
    pub fn resolved(mut self) -> Result<Self> {
        self.generator.seed = self.seed;
        self.classifier.seed = self.seed;
        if self.generator.resolution != self.synth.resolution {
            anyhow::bail!(
                "generator resolution {} differs from cohort resolution {}",
                self.generator.resolution,
                self.synth.resolution
            );
        }
        self.synth.validate()?;
        self.generator.validate()?;
        self.classifier.validate()?;
        self.optimizer.validate()?;
        Ok(self)
    }

    pub fn hash(&self) -> Result<String> {
        Ok(config_hash(self)?)
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}
