//! TOML experiment configuration shared by every CLI subcommand. Unknown
//! keys are rejected so typos fail loudly; every run echoes the fully
//! resolved config next to its outputs before any long computation starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analog::{NoiseConfig, TileGeometry};
use crate::error::{Error, Result};
use crate::network::graph::PresetId;
use crate::network::TrainConfig;
use crate::pipeline::TimingModel;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Master seed; every sub-seed is derived from it with a purpose tag.
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Cap on internal parallelism; 0 = all available cores.
    pub threads: usize,
    pub model: ModelConfig,
    pub noise: NoiseConfig,
    pub train: TrainConfig,
    pub tiles: TileGeometry,
    pub sweep: SweepConfig,
    pub uncertainty: UncertaintyConfig,
    pub pipeline: PipelineConfig,
    pub data: DataConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            output_dir: PathBuf::from("out"),
            threads: 0,
            model: ModelConfig::default(),
            noise: NoiseConfig::default(),
            train: TrainConfig::default(),
            tiles: TileGeometry::default(),
            sweep: SweepConfig::default(),
            uncertainty: UncertaintyConfig::default(),
            pipeline: PipelineConfig::default(),
            data: DataConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub preset_id: PresetId,
    pub width_scale: usize,
    pub attention: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { preset_id: PresetId::ToyUnet, width_scale: 1, attention: false }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Programming-noise levels, ascending, starting at 0.
    pub sigmas: Vec<f64>,
    pub n_seeds: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { sigmas: vec![0.0, 0.02, 0.05, 0.1, 0.2], n_seeds: 20 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UncertaintyConfig {
    pub n_samples: usize,
    pub n_bins: usize,
}

impl Default for UncertaintyConfig {
    fn default() -> Self {
        UncertaintyConfig { n_samples: 20, n_bins: 50 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub timing: TimingModel,
    /// Slice counts to report latency/throughput for.
    pub k_values: Vec<usize>,
    /// Image side used when deriving per-layer reuse factors.
    pub input_hw: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            timing: TimingModel::default(),
            k_values: vec![1, 2, 4, 8, 16, 32, 64, 128],
            input_hw: 32,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub h: usize,
    pub w: usize,
    pub seed: u64,
    pub difficulty: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { n_train: 64, n_test: 32, h: 32, w: 32, seed: 1, difficulty: 0.0 }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.noise.validate()?;
        self.train.validate()?;
        self.pipeline.timing.validate()?;
        if self.model.width_scale < 1 {
            return Err(Error::config("width_scale must be >= 1"));
        }
        if self.tiles.rows == 0 || self.tiles.cols == 0 {
            return Err(Error::config("tile geometry must be positive"));
        }
        if self.sweep.n_seeds == 0 {
            return Err(Error::config("sweep.n_seeds must be >= 1"));
        }
        if self.uncertainty.n_samples < 2 {
            return Err(Error::config("uncertainty.n_samples must be >= 2"));
        }
        if self.uncertainty.n_bins == 0 {
            return Err(Error::config("uncertainty.n_bins must be >= 1"));
        }
        if self.pipeline.k_values.is_empty() || self.pipeline.k_values.contains(&0) {
            return Err(Error::config("pipeline.k_values must be non-empty and >= 1"));
        }
        crate::synthdata::validate_dims(self.data.n_train, self.data.h, self.data.w, self.data.difficulty)?;
        crate::synthdata::validate_dims(self.data.n_test, self.data.h, self.data.w, self.data.difficulty)?;
        Ok(())
    }

    /// Serialize the fully resolved config (defaults applied, CLI overrides
    /// included) for the echo file written beside each run's outputs.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(format!("config echo: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.seed, cfg.seed);
        assert_eq!(back.sweep.sigmas, cfg.sweep.sigmas);
        assert_eq!(back.model.preset_id, cfg.model.preset_id);
        back.validate().unwrap();
    }

    #[test]
    fn empty_config_uses_defaults() {
        let cfg: ExperimentConfig = toml::from_str("").unwrap();
        assert_eq!(cfg.sweep.n_seeds, 20);
        assert_eq!(cfg.data.h, 32);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<ExperimentConfig>("unknown_key = 1").is_err());
        assert!(toml::from_str::<ExperimentConfig>("[model]\nbogus = 2").is_err());
    }

    #[test]
    fn partial_section_overrides() {
        let cfg: ExperimentConfig =
            toml::from_str("[model]\npreset_id = \"toy_unetpp\"\n[noise]\nsigma_prog = 0.2\n")
                .unwrap();
        assert_eq!(cfg.model.preset_id, PresetId::ToyUnetpp);
        assert_eq!(cfg.noise.sigma_prog, 0.2);
        assert_eq!(cfg.noise.sigma_out, NoiseConfig::default().sigma_out);
    }

    #[test]
    fn invalid_values_fail_validation() {
        let mut cfg = ExperimentConfig::default();
        cfg.uncertainty.n_samples = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.data.h = 8;
        assert!(cfg.validate().is_err());
    }
}
