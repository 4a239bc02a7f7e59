//! Experiment configuration file (JSON, versioned, unknown keys rejected).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cost::{ArchSpec, CostModel};
use crate::evo::EvoConfig;
use crate::filter::FilterConfig;
use crate::model::OptimizerConfig;
use crate::nm::SparsityLevel;
use crate::space::{SearchSpace, DEFAULT_C_UPPER_FRACTION};
use crate::train::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config is not valid JSON for this schema: {0}")]
    Parse(String),
    #[error("unsupported config version {0}, expected {CONFIG_VERSION}")]
    Version(u32),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSource {
    pub n_train: usize,
    pub n_val: usize,
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub train: PathBuf,
    pub val: PathBuf,
    /// Raw feature values are divided by this.
    #[serde(default = "default_max_value")]
    pub max_value: f64,
}

fn default_max_value() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticSource),
    Csv(CsvSource),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            iterations: 400,
            batch_size: 32,
            optimizer: OptimizerConfig {
                learning_rate: 3e-3,
                ..OptimizerConfig::default()
            },
        }
    }
}

fn default_levels() -> Vec<SparsityLevel> {
    ["1:4", "2:4", "4:4"].iter().map(|s| s.parse().unwrap()).collect()
}

fn default_fraction() -> f64 {
    DEFAULT_C_UPPER_FRACTION
}

fn default_boundaries() -> usize {
    9
}

fn default_er_targets() -> Vec<f64> {
    vec![0.5, 0.6, 0.7]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    /// Master seed; every stage derives its own seed from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub arch: ArchSpec,
    #[serde(default = "default_levels")]
    pub levels: Vec<SparsityLevel>,
    /// `c_upper` as a fraction of dense FLOPs.
    #[serde(default = "default_fraction")]
    pub c_upper_fraction: f64,
    /// Number of cost-interval boundaries (intervals = boundaries - 1).
    #[serde(default = "default_boundaries")]
    pub interval_boundaries: usize,
    pub dataset: DataSource,
    /// Existing dense checkpoint to use instead of pretraining.
    #[serde(default)]
    pub teacher_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub filter: FilterConfig,
    #[serde(default)]
    pub evo: EvoConfig,
    /// Overall sparsities for the ER comparison.
    #[serde(default = "default_er_targets")]
    pub er_targets: Vec<f64>,
}

/// Stage seeds derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSeeds {
    pub data: u64,
    pub val_data: u64,
    pub pretrain: u64,
    pub train: u64,
    pub evo: u64,
    pub proxy: u64,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.version != CONFIG_VERSION {
            return Err(ConfigError::Version(self.version));
        }
        let space = self.space().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        space
            .intervals(self.interval_boundaries)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.filter.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.evo.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.pretrain.iterations == 0 || self.pretrain.batch_size == 0 {
            return bad("pretrain iterations and batch_size must be at least 1".into());
        }
        if let Some(&t) = self.er_targets.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
            return bad(format!("er target {t} must lie strictly between 0 and 1"));
        }
        match &self.dataset {
            DataSource::Synthetic(s) => {
                if s.n_train == 0 || s.n_val == 0 {
                    return bad("synthetic n_train and n_val must be at least 1".into());
                }
                if !(s.noise >= 0.0 && s.noise.is_finite()) {
                    return bad("synthetic noise must be finite and non-negative".into());
                }
            }
            DataSource::Csv(c) => {
                if !(c.max_value > 0.0 && c.max_value.is_finite()) {
                    return bad("csv max_value must be positive".into());
                }
            }
        }
        Ok(())
    }

    pub fn space(&self) -> Result<SearchSpace, crate::space::SpaceError> {
        let cost = CostModel::from_arch(&self.arch)?;
        SearchSpace::new(self.levels.clone(), cost, self.c_upper_fraction)
    }

    pub fn seeds(&self) -> StageSeeds {
        let mix = |k: u64| {
            // splitmix64 finaliser over (seed, stage)
            let mut z = self.seed ^ k.wrapping_mul(0x9E37_79B9_7F4A_7C15);
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            z ^ (z >> 31)
        };
        StageSeeds {
            data: mix(1),
            val_data: mix(6),
            pretrain: mix(2),
            train: mix(3),
            evo: mix(4),
            proxy: mix(5),
        }
    }

    /// Train and search settings with their seeds taken from the master seed.
    pub fn resolved(&self) -> (TrainConfig, EvoConfig) {
        let seeds = self.seeds();
        let train = TrainConfig {
            seed: seeds.train,
            ..self.train
        };
        let evo = EvoConfig {
            seed: seeds.evo,
            ..self.evo
        };
        (train, evo)
    }

    /// SHA-256 of the canonical JSON of the configuration. The output
    /// directory is left out so relocated reruns share a hash.
    pub fn hash(&self) -> String {
        let keyed = Self {
            output_dir: PathBuf::new(),
            ..self.clone()
        };
        let canonical = serde_json::to_vec(&keyed).expect("config serializes");
        let digest = Sha256::digest(&canonical);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Small configuration for tests and smoke runs.
    pub fn smoke(output_dir: PathBuf) -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            output_dir,
            arch: ArchSpec {
                num_classes: 8,
                ..ArchSpec::default()
            },
            levels: default_levels(),
            c_upper_fraction: 0.6,
            interval_boundaries: default_boundaries(),
            dataset: DataSource::Synthetic(SyntheticSource {
                n_train: 2048,
                n_val: 512,
                noise: 0.3,
            }),
            teacher_checkpoint: None,
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            filter: FilterConfig::default(),
            evo: EvoConfig::default(),
            er_targets: default_er_targets(),
        }
    }
}
