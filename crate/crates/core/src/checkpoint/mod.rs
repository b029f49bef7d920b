//! Persistence: the `.vtrl` archive, model checkpoints and run configuration.

mod archive;
mod config;

use std::path::Path;

pub use archive::{
    load_archive, save_archive, write_atomic, ArchiveError, Entry, Payload, TensorArchive, MAGIC, VERSION,
};
pub use config::{DataConfig, RunConfig, DEFAULT_SEED};
pub use crate::analysis::AnalysisConfig;

use crate::error::Result;
use crate::tensor::Tensor;
use crate::vit::{expected_shapes, ViTConfig, ViTModel};

/// Name of the text entry holding the TOML-encoded [`ViTConfig`].
pub const CONFIG_ENTRY: &str = "config";

pub fn model_to_archive(model: &ViTModel) -> TensorArchive {
    let mut a = TensorArchive::new();
    let cfg = toml::to_string(&model.config).expect("config serializes");
    a.push_text(CONFIG_ENTRY, cfg).expect("fresh archive");
    model.params.for_each(|name, t| {
        a.push_tensor(name, t).expect("canonical names are unique");
    });
    a
}

pub fn model_from_archive(a: &TensorArchive) -> std::result::Result<ViTModel, ArchiveError> {
    let text = a.text(CONFIG_ENTRY)?;
    let config: ViTConfig = toml::from_str(text).map_err(|e| ArchiveError::Config(e.to_string()))?;
    config.validate().map_err(|e| ArchiveError::Config(e.to_string()))?;

    let expected = expected_shapes(&config);
    for e in a.entries() {
        if e.name != CONFIG_ENTRY && !expected.iter().any(|(n, _)| *n == e.name) {
            return Err(ArchiveError::Unexpected(e.name.clone()));
        }
    }
    for (name, dims) in &expected {
        let t = a.tensor(name)?;
        if t.dims() != dims.as_slice() {
            return Err(ArchiveError::ShapeMismatch {
                name: name.clone(),
                expected: dims.clone(),
                found: t.dims().to_vec(),
            });
        }
    }
    // Shapes are verified, so a freshly initialised model only needs its
    // tensors replaced.
    let mut model = ViTModel::init(config, 0).map_err(|e| ArchiveError::Config(e.to_string()))?;
    let mut failure = None;
    model.params.for_each_mut(|name, slot| {
        match a.tensor(name) {
            Ok(t) => *slot = Tensor::new(t.dims().to_vec(), t.data().to_vec()).expect("valid"),
            Err(e) => failure = failure.take().or(Some(e)),
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(model),
    }
}

pub fn save_model(model: &ViTModel, path: &Path) -> Result<()> {
    save_archive(&model_to_archive(model), path)
}

pub fn load_model(path: &Path) -> Result<ViTModel> {
    Ok(model_from_archive(&load_archive(path)?)?)
}
