//! Micro vision transformer with [CLS], optional registers and activation
//! capture.

mod config;
mod model;
mod params;
mod train;

pub use config::{SequenceLayout, ViTConfig};
pub use model::{
    assemble_sequence, interpolate_pos_embed, interpolation_matrix, patchify,
    pooled_representation, Activations, BlockTensors, Capture, ForwardOptions, ViTModel,
    INIT_STD,
};
pub(crate) use model::argmax;
pub use params::{expected_shapes, Block, Linear, Norm, ViTParams};
pub use train::{accuracy, grad_check_model, train_classifier, EpochStats, ModelTrainConfig};
