//! Minimal layer toolkit: every primitive carries an explicit backward pass
//! so whole-model gradients can be validated against finite differences.

pub mod act;
pub mod conv;
pub mod init;
pub mod linear;
pub mod param;
pub mod pool;

pub use act::{relu, relu_backward, sigmoid, sigmoid_backward_from_output, sigmoid_scalar, silu, silu_backward, silu_scalar};
pub use conv::{conv_out_dim, Conv2d, DwConv2d};
pub use init::{seeded_rng, InitRng};
pub use linear::Linear;
pub use param::{prefixed, NamedParams, NamedParamsMut, Param};
pub use pool::{
    avg_pool2x, global_average_pool, global_average_pool_backward, upsample2x,
    upsample2x_backward, UpsampleMode,
};
