//! Dual-modality (skeleton + video) human action recognition.
//!
//! A graph-convolutional skeleton encoder and a small ViT video encoder feed
//! a salient fusion classifier. During training, a text encoder driven by
//! skeleton-conditioned learnable prompts supervises the skeleton features
//! through a bidirectional contrastive loss; inference never touches it.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod skeleton;
pub mod tensor;
pub mod text;
pub mod train;
pub mod visual;

pub use autodiff::{Tape, Var};
pub use error::{Error, ErrorKind, Result};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
