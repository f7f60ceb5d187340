//! Run configuration, read from a TOML file. Every section has defaults, so
//! a file only needs the keys it changes.

use std::path::{Path, PathBuf};

use objctx::network::NetworkConfig;
use objctx::retrieval::Mode;
use objctx::synthetic::{OracleDetectorConfig, WorldConfig};
use objctx::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds network initialization and the random baseline.
    pub seed: u64,
    pub paths: PathsConfig,
    pub data: DataConfig,
    pub world: WorldConfig,
    pub detector: OracleDetectorConfig,
    pub network: NetworkConfig,
    pub training: TrainConfig,
    pub inference: InferenceConfig,
    pub pipeline: PipelineConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Relative paths resolve against the config file's directory.
    pub data_dir: PathBuf,
    pub model_dir: PathBuf,
    pub run_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_scenes: u64,
    pub test_scenes: u64,
    /// Scene index of the first test scene; keeps the splits disjoint.
    pub test_first_index: u64,
    /// Off-site objects planted in each test scene.
    pub test_off_site_objects: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    /// Sliding-window stride for the base network, source pixels.
    pub stride: usize,
    /// Sliding-window mask widths, network input pixels.
    pub mask_widths: Vec<usize>,
    /// Pyramid scales for the fully-convolutional network.
    pub scales: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub threshold: f64,
    pub detection_threshold: f64,
    /// Side of the retrieved regions, source pixels.
    pub d: f64,
    pub max_count: usize,
    pub mode: Mode,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            model_dir: "models".into(),
            run_dir: "runs".into(),
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_scenes: 300,
            test_scenes: 200,
            test_first_index: 10_000,
            test_off_site_objects: 1,
        }
    }
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            stride: 10,
            mask_widths: vec![50, 70, 100],
            scales: vec![0.5, 0.7, 1.0],
        }
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            threshold: 0.4,
            detection_threshold: 0.5,
            d: 400.0,
            max_count: 500,
            mode: Mode::Missing,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::canonical()
    }
}

impl RunConfig {
    /// Published hyperparameters with the 224 px network.
    pub fn canonical() -> Self {
        Self {
            seed: 1,
            paths: PathsConfig::default(),
            data: DataConfig::default(),
            world: WorldConfig::default(),
            detector: OracleDetectorConfig::default(),
            network: NetworkConfig::canonical(),
            training: TrainConfig::default(),
            inference: InferenceConfig::default(),
            pipeline: PipelineConfig::default(),
        }
    }

    /// The 64 px network sized for a single CPU core. Mask widths and region
    /// size shrink with the input side; the synthetic objects already have
    /// the intended size, so the pyramid is a single scale.
    pub fn desk() -> Self {
        let mut cfg = Self::canonical();
        cfg.network = NetworkConfig::desk();
        cfg.training.samples_per_epoch = 1500;
        cfg.training.validation_samples = 400;
        cfg.training.sampling.object_fraction = 0.25;
        cfg.training.mining.top_k = 75;
        cfg.inference = InferenceConfig {
            stride: 4,
            mask_widths: vec![14, 20, 29],
            scales: vec![1.0],
        };
        cfg.pipeline.d = 64.0;
        cfg
    }

    pub fn preset(name: &str) -> CliResult<Self> {
        match name {
            "canonical" => Ok(Self::canonical()),
            "desk" => Ok(Self::desk()),
            other => Err(CliError::Config(format!(
                "unknown preset `{other}` (expected canonical or desk)"
            ))),
        }
    }

    /// Parses and validates `path`; relative paths inside are anchored to
    /// the file's directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.paths.data_dir,
            &mut cfg.paths.model_dir,
            &mut cfg.paths.run_dir,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string_pretty(self).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |e: objctx::Error| CliError::Config(e.to_string());
        self.world.validate().map_err(bad)?;
        self.detector.validate().map_err(bad)?;
        self.network.validate().map_err(bad)?;
        self.training.validate().map_err(bad)?;
        let inf = &self.inference;
        if inf.stride == 0 || inf.mask_widths.is_empty() || inf.scales.is_empty() {
            return Err(CliError::Config(
                "inference needs a stride, mask widths and scales".into(),
            ));
        }
        if let Some(w) = inf
            .mask_widths
            .iter()
            .find(|&&w| w == 0 || w >= self.network.input_side)
        {
            return Err(CliError::Config(format!(
                "mask width {w} does not fit the network input"
            )));
        }
        if inf.scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(CliError::Config("pyramid scales must be positive".into()));
        }
        let p = &self.pipeline;
        if p.d.is_nan() || p.d < 1.0 || p.max_count == 0 {
            return Err(CliError::Config(
                "region size and count must be positive".into(),
            ));
        }
        if self.data.train_scenes == 0 || self.data.test_scenes == 0 {
            return Err(CliError::Config("both splits need scenes".into()));
        }
        if self.data.test_first_index < self.data.train_scenes {
            return Err(CliError::Config(
                "test scene indices overlap the training split".into(),
            ));
        }
        Ok(())
    }

    pub fn split_dir(&self, split: Split) -> PathBuf {
        self.paths.data_dir.join(split.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}
