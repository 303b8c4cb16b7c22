//! Road-damage detection at desk scale: a lightweight multi-scale detector
//! built around dilated window attention and global attentional upsampling,
//! with a synthetic dataset generator, a full evaluation stack
//! (mAP / precision / FLOPs / FPS) and a reproducible SGD trainer.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod flops;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;
pub mod vgau;

pub use error::{Error, Result};
pub use tensor::FeatureMap;
