use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use latentphase::model::ModelConfig;
use latentphase::phase::DetectOptions;
use latentphase::synth::SynthRanges;
use latentphase::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// 64² model sized for a desktop CPU.
    #[default]
    Desk,
    /// 128² model with the full channel widths.
    Paper,
}

impl Preset {
    pub fn model(self) -> ModelConfig {
        match self {
            Preset::Desk => ModelConfig::desk(),
            Preset::Paper => ModelConfig::full(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    pub count: usize,
    pub ranges: SynthRanges,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            count: 8,
            ranges: SynthRanges::default(),
        }
    }
}

/// File locations; command-line flags take precedence.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub calibration_set: Option<PathBuf>,
    pub videos: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub report_dir: Option<PathBuf>,
}

/// Everything a pipeline run reads from its JSON config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Overrides the generator, model and training seeds when set.
    pub seed: Option<u64>,
    pub preset: Preset,
    /// Replaces the preset's model config when set.
    pub model: Option<ModelConfig>,
    pub train: TrainConfig,
    pub generate: GenerateConfig,
    pub detect: DetectOptions,
    pub paths: Paths,
}

/// Global flags shared by every subcommand.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub strict_deterministic: bool,
    pub preset: Option<Preset>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Applies global flags and checks every section.
    pub fn resolve(mut self, o: &Overrides) -> Result<Self, CliError> {
        if let Some(p) = o.preset {
            self.preset = p;
            self.model = None;
        }
        if o.seed.is_some() {
            self.seed = o.seed;
        }
        let mut model = self.model_config();
        if let Some(seed) = self.seed {
            self.train.seed = seed;
            model.seed = seed;
        }
        self.model = Some(model);
        if let Some(t) = o.threads {
            self.train.threads = t;
        }
        if o.strict_deterministic {
            self.train.strict_deterministic = true;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn model_config(&self) -> ModelConfig {
        self.model.clone().unwrap_or_else(|| self.preset.model())
    }

    pub fn generator_seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    fn validate(&self) -> Result<(), CliError> {
        self.model_config().validate()?;
        self.train.validate()?;
        self.detect.validate()?;
        if self.generate.count == 0 {
            return Err(CliError::Config("generate.count must be at least 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"epochs": 3}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"epoch": 3}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"paths": {"data": "x"}}"#).is_err());
    }

    #[test]
    fn empty_object_is_the_default() {
        let c: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn seed_flag_reaches_every_stage() {
        let o = Overrides {
            seed: Some(7),
            ..Overrides::default()
        };
        let c = RunConfig::default().resolve(&o).unwrap();
        assert_eq!(c.train.seed, 7);
        assert_eq!(c.model_config().seed, 7);
        assert_eq!(c.generator_seed(), 7);
    }

    #[test]
    fn preset_flag_replaces_model() {
        let c = RunConfig {
            model: Some(ModelConfig::desk()),
            ..RunConfig::default()
        };
        let o = Overrides {
            preset: Some(Preset::Paper),
            ..Overrides::default()
        };
        assert_eq!(c.resolve(&o).unwrap().model_config().input_size, ModelConfig::full().input_size);
    }

    #[test]
    fn zero_count_is_a_config_error() {
        let mut c = RunConfig::default();
        c.generate.count = 0;
        assert!(matches!(c.resolve(&Overrides::default()), Err(CliError::Config(_))));
    }
}
