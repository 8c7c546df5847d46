//! Experiment configuration read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use memwarp::error::{Error, Result};
use memwarp::eval::EvalOptions;
use memwarp::experiment::BenchmarkConfig;
use memwarp::model::ModelConfig;
use memwarp::pipeline::PipelineConfig;
use memwarp::training::TrainConfig;
use memwarp::worldgen::SceneSampler;

/// How `gen` builds the training and validation sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub sampler: SceneSampler,
    pub train_sequences: usize,
    pub val_sequences: usize,
    pub length: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { sampler: SceneSampler::default(), train_sequences: 64, val_sequences: 16, length: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Training set directory.
    pub dataset: PathBuf,
    /// Validation set directory.
    pub validation: PathBuf,
    /// Where results and checkpoints go.
    pub output: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub pipeline: PipelineConfig,
    /// Settings of `report`.
    pub benchmark: BenchmarkConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: "data/train".into(),
            validation: "data/val".into(),
            output: "out".into(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
            pipeline: PipelineConfig::default(),
            benchmark: BenchmarkConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reads `path`; relative paths inside are taken from the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut config: Self = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut config.dataset, &mut config.validation, &mut config.output] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.pipeline.validate()?;
        if self.data.length == 0 {
            return Err(Error::Config("data.length must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clock_axes_need_clocknet() {
        let text = "[model]\nvariant = \"mem-net\"\nclock_axes = [1, 2]\n";
        let config: ExperimentConfig = toml::from_str(text).unwrap();
        assert!(matches!(config.validate(), Err(Error::Config(_))));
        let text = "[model]\nvariant = \"clock-net\"\nclock_axes = [1, 2]\n";
        let config: ExperimentConfig = toml::from_str(text).unwrap();
        config.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<ExperimentConfig>("sed = 3\n").is_err());
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        std::fs::write(&path, "dataset = \"d\"\noutput = \"/abs\"\n").unwrap();
        let config = ExperimentConfig::load(&path).unwrap();
        assert_eq!(config.dataset, dir.path().join("d"));
        assert_eq!(config.output, PathBuf::from("/abs"));
    }
}
