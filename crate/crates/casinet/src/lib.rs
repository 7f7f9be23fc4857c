//! CASINet-style multi-scale segmentation at desk scale.
//!
//! The crate provides a self-contained f64 tensor core with reverse-mode
//! differentiation, the three fusion modules (dilated-convolution pyramid,
//! contextual scale interaction, scale adaptation), a synthetic multi-scale
//! shapes task, and the training/evaluation machinery to compare model
//! variants under paired seeds.

pub mod aspp;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod csi;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod labels;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod optim;
pub mod pnm;
pub mod profile;
pub mod rng;
pub mod runconfig;
pub mod sa;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use labels::Labels;
pub use rng::Rng;
pub use tape::{Mode, Param, SharedParam, Tape, ValId};
pub use tensor::{Shape, Tensor};
