//! Multi-scale attention with positional squeeze-and-excitation.

pub mod embed;
pub mod gather;
pub mod mapse;
pub mod se;
pub mod swda;

pub use embed::{sinusoidal_table, PatchEmbed, PatchEmbedConfig, PositionEncoding};
pub use gather::{dilated_gather, dilated_gather_axis};
pub use mapse::{MapseBlock, MapseConfig, Mlp};
pub use se::SqueezeExcite;
pub use swda::{frozen_window_aggregate, DilatedAttentionConfig, Swda};
