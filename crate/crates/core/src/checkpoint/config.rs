//! Run configuration, stored as TOML.
//!
//! Every section and key is optional; omitted values take the defaults
//! below. Unknown keys are rejected.
//!
//! ```toml
//! seed = 42
//!
//! [model]            # ViTConfig
//! image_size = 32
//! patch_size = 8
//! embed_dim = 32
//! depth = 2
//! heads = 4
//! num_registers = 0
//! num_classes = 8
//!
//! [data]
//! num_classes = 8
//! train_per_class = 16
//! val_per_class = 8
//! image_size = 32
//! # manifest = "images/manifest.csv"   # use files instead of synthetic data
//! [data.preprocess]
//! mean = [0.5, 0.5, 0.5]
//! std = [0.5, 0.5, 0.5]
//!
//! [analysis]
//! sample_n = 5000
//! percentile = 98.0
//! histogram_bins = 256
//! per_image = false
//! exclude_edges = false
//!
//! [train]            # micro-ViT training
//! epochs = 5
//! batch_size = 16
//! seed = 42
//! [train.optimizer]
//! kind = "adamw"
//! lr = 0.003
//! weight_decay = 0.05
//!
//! [probe]            # linear probes
//! task = "position"
//! max_epochs = 30
//! patience = 3
//! batch_size = 256
//! val_fraction = 0.1
//! seed = 42
//! [probe.optimizer]
//! kind = "adam"
//! lr = 0.001
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::AnalysisConfig;
use crate::data::{Preprocess, Split, SyntheticSpec};
use crate::error::{Error, Result};
use crate::probe::TrainConfig;
use crate::vit::{ModelTrainConfig, ViTConfig};

pub const DEFAULT_SEED: u64 = 42;

fn default_seed() -> u64 {
    DEFAULT_SEED
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub image_size: usize,
    pub manifest: Option<PathBuf>,
    pub preprocess: Preprocess,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            num_classes: 8,
            train_per_class: 16,
            val_per_class: 8,
            image_size: 32,
            manifest: None,
            preprocess: Preprocess::default(),
        }
    }
}

impl DataConfig {
    /// Train and val use different seeds derived from `seed`.
    pub fn synthetic(&self, split: Split, seed: u64) -> SyntheticSpec {
        let (per_class, salt) = match split {
            Split::Train => (self.train_per_class, 0),
            Split::Val => (self.val_per_class, 1),
            Split::Test => (self.val_per_class, 2),
        };
        SyntheticSpec {
            num_classes: self.num_classes,
            per_class,
            image_size: self.image_size,
            seed: seed.wrapping_mul(1000).wrapping_add(salt),
            split,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub model: ViTConfig,
    pub data: DataConfig,
    pub analysis: AnalysisConfig,
    pub train: ModelTrainConfig,
    pub probe: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: DEFAULT_SEED,
            model: ViTConfig::micro(0, 8),
            data: DataConfig::default(),
            analysis: AnalysisConfig::default(),
            train: ModelTrainConfig::default(),
            probe: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let a = &self.analysis;
        if !(a.percentile > 0.0 && a.percentile < 100.0) {
            return Err(Error::Config(format!("percentile {} must be in (0, 100)", a.percentile)));
        }
        if a.sample_n == 0 || a.histogram_bins == 0 {
            return Err(Error::Config("sample_n and histogram_bins must be positive".into()));
        }
        let d = &self.data;
        if d.num_classes == 0 || d.image_size == 0 {
            return Err(Error::Config("data.num_classes and data.image_size must be positive".into()));
        }
        if d.manifest.is_none() && d.num_classes != self.model.num_classes {
            return Err(Error::Config(format!(
                "data.num_classes {} differs from model.num_classes {}",
                d.num_classes, self.model.num_classes
            )));
        }
        if d.preprocess.std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("preprocess std must be > 0".into()));
        }
        if self.train.epochs == 0 || self.train.batch_size == 0 || !(self.train.optimizer.lr > 0.0) {
            return Err(Error::Config("train epochs, batch_size and lr must be positive".into()));
        }
        self.probe.validate()
    }
}
