//! Laboratory for high-norm artifact tokens in vision transformers and the
//! register-token remedy.
//!
//! The crate is organised bottom-up: [`tensor`] and [`autograd`] supply the
//! numerics, [`vit`] the model, [`data`] the inputs, [`analysis`] the map and
//! norm statistics, [`probe`] the linear-probe protocols, and [`checkpoint`]
//! persistence for all of it.

pub mod analysis;
pub mod autograd;
pub mod carbon;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod optim;
pub mod probe;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::Tensor;
