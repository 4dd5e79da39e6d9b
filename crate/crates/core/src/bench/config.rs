//! Versioned TOML experiment configuration.
//!
//! ```toml
//! version = 1
//!
//! [task]         # TaskSpec: vocabulary layout, generator and split sizes
//! [teacher]      # teacher architecture and pre-training schedule
//! [student]      # student architecture
//! [distill]      # tau, lambda, epochs, learning_rate, seed
//! [episode]      # subspace_dim, population_size, budget, alpha, sigma0, ...
//! [experiment]   # seeds, presets, alphas
//! ```
//!
//! Every section and field has a default; unknown fields are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::task::TaskSpec;
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::models::EncoderKind;
use crate::trainer::EpisodeConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub encoder: EncoderKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub random_prefix_rate: f64,
    pub blend_rate: f64,
    pub holdout_fraction: f64,
    pub accuracy_bar: f64,
    pub early_stop_accuracy: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            hidden_dim: 64,
            encoder: EncoderKind::PoolMlp,
            epochs: 60,
            batch_size: 32,
            learning_rate: 0.01,
            random_prefix_rate: 0.3,
            blend_rate: 0.0,
            holdout_fraction: 0.1,
            accuracy_bar: 0.95,
            early_stop_accuracy: 0.985,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentConfig {
    pub hidden_dim: usize,
    pub encoder: EncoderKind,
    /// Start the student's token embeddings from the teacher's public table,
    /// the same table prompts are built from.
    pub public_embeddings: bool,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self { hidden_dim: 32, encoder: EncoderKind::PoolMlp, public_embeddings: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    pub presets: Vec<String>,
    pub alphas: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            presets: super::experiment::Preset::ALL.iter().map(|p| p.name().to_string()).collect(),
            alphas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    #[serde(default)]
    pub task: TaskSpec,
    #[serde(default)]
    pub teacher: TeacherConfig,
    #[serde(default)]
    pub student: StudentConfig,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub episode: EpisodeConfig,
    #[serde(default)]
    pub experiment: RunConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            task: TaskSpec::default(),
            teacher: TeacherConfig::default(),
            student: StudentConfig::default(),
            distill: DistillConfig::default(),
            episode: EpisodeConfig::default(),
            experiment: RunConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!("unsupported config version {}", self.version)));
        }
        self.task.validate()?;
        self.distill.validate()?;
        self.episode.validate()?;
        for p in &self.experiment.presets {
            super::experiment::Preset::parse(p)?;
        }
        for &a in &self.experiment.alphas {
            crate::promptspace::check_alpha(a)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips_through_toml() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn partial_file_uses_defaults() {
        let cfg = ExperimentConfig::from_toml("version = 1\n[episode]\nalpha = 0.25\n").unwrap();
        assert_eq!(cfg.episode.alpha, 0.25);
        assert_eq!(cfg.episode.population_size, 8);
        let cfg = ExperimentConfig::from_toml("version = 1\n[experiment]\nseeds = [4]\n").unwrap();
        assert_eq!(cfg.experiment.seeds, [4]);
        assert_eq!(cfg.episode, EpisodeConfig::default());
    }

    #[test]
    fn rejects_bad_files() {
        assert!(ExperimentConfig::from_toml("version = 2").is_err());
        assert!(ExperimentConfig::from_toml("version = 1\nbogus = 3").is_err());
        assert!(ExperimentConfig::from_toml("version = 1\n[experiment]\npresets = [\"nope\"]").is_err());
        assert!(ExperimentConfig::from_toml("version = 1\n[experiment]\nalphas = [1.5]").is_err());
    }
}
