//! Experiment harness: configuration, data, orchestration and reports.

pub mod config;
pub mod dataset;
pub mod pipeline;
pub mod report;

use std::fmt;

pub use config::{ConfigError, ExperimentConfig};
pub use dataset::{load_csv, matrix_to_csv, parse_csv, parse_matrix_csv, synth_dataset, CsvSchema, LoadError, SynthSpec};
pub use pipeline::{pretrain_teacher, run, Mode};

/// Pipeline stage names used in errors and failure markers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Config,
    Data,
    Teacher,
    Supernet,
    Search,
    Baseline,
    Report,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Config => "config",
            Stage::Data => "data",
            Stage::Teacher => "teacher",
            Stage::Supernet => "supernet",
            Stage::Search => "search",
            Stage::Baseline => "baseline",
            Stage::Report => "report",
        };
        f.write_str(s)
    }
}

#[derive(Debug, thiserror::Error)]
#[error("stage {stage} failed: {source}")]
pub struct HarnessError {
    pub stage: Stage,
    #[source]
    pub source: Box<dyn std::error::Error + Send + Sync>,
}

impl HarnessError {
    pub fn new<E>(stage: Stage, source: E) -> Self
    where
        E: Into<Box<dyn std::error::Error + Send + Sync>>,
    {
        Self {
            stage,
            source: source.into(),
        }
    }
}

/// Error adapter for `map_err` that tags the stage.
pub(crate) fn at<E>(stage: Stage) -> impl FnOnce(E) -> HarnessError
where
    E: Into<Box<dyn std::error::Error + Send + Sync>>,
{
    move |e| HarnessError::new(stage, e)
}
