//! Dual motion GAN for next-frame and next-flow prediction.

pub mod autograd;
pub mod config;
pub mod data_io;
pub mod discriminators;
pub mod error;
pub mod evaluation;
pub mod generators;
pub mod gradcheck;
pub mod kernels;
pub mod losses;
pub mod model;
pub mod motion_encoder;
pub mod nn;
pub mod tensor;
pub mod training;
pub mod util;

pub use config::{Ablation, ModelConfig, TrainingConfig};
pub use data_io::{FlowField, FrameSequence};
pub use error::{Error, Result};
pub use tensor::Tensor;
