//! Linear probes on frozen tokens: position prediction, patch
//! reconstruction, token-category classification and register-augmented
//! image representations.

mod dataset;
mod eval;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use dataset::{
    build_representation, extract_probe_dataset, extract_representation_dataset, ProbeDataset,
    ReprKind, Targets,
};
pub use eval::{
    center_baseline, eval_classification, eval_position, eval_reconstruction, percentile_sweep,
    top1, PositionMetrics, SweepPoint,
};
pub use train::{
    train_linear_probe, train_probe_with_validation, write_metrics_csv, EpochRecord, ProbeHead,
    ProbeHistory, TrainConfig,
};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeTask {
    Position,
    Reconstruction,
    Classification,
}

impl ProbeTask {
    pub fn as_str(self) -> &'static str {
        match self {
            ProbeTask::Position => "position",
            ProbeTask::Reconstruction => "reconstruction",
            ProbeTask::Classification => "classification",
        }
    }

    /// Whether the monitored validation metric improves upwards.
    pub fn higher_is_better(self) -> bool {
        self != ProbeTask::Reconstruction
    }
}

impl fmt::Display for ProbeTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProbeTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "position" => Ok(ProbeTask::Position),
            "reconstruction" => Ok(ProbeTask::Reconstruction),
            "classification" => Ok(ProbeTask::Classification),
            other => Err(Error::Config(format!("unknown probe task `{other}`"))),
        }
    }
}

/// Which kind of token a probe row came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenCategory {
    Cls,
    Normal,
    Outlier,
}

impl TokenCategory {
    pub const ALL: [TokenCategory; 3] = [TokenCategory::Cls, TokenCategory::Normal, TokenCategory::Outlier];

    pub fn as_str(self) -> &'static str {
        match self {
            TokenCategory::Cls => "cls",
            TokenCategory::Normal => "normal",
            TokenCategory::Outlier => "outlier",
        }
    }

    pub(crate) fn code(self) -> f64 {
        match self {
            TokenCategory::Cls => 0.0,
            TokenCategory::Normal => 1.0,
            TokenCategory::Outlier => 2.0,
        }
    }

    pub(crate) fn from_code(v: f64) -> Option<Self> {
        TokenCategory::ALL.into_iter().find(|c| c.code() == v)
    }
}

impl fmt::Display for TokenCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TokenCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TokenCategory::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown token category `{s}`")))
    }
}
