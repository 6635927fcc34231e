//! Thin neural-network layer on top of candle: a named, seeded parameter
//! store, layer constructors bound to it, and the few differentiable ops
//! candle does not ship (bilinear resize, padded 3x3 max pooling).

mod conv;
mod layers;
mod ops;
mod params;

pub use conv::{Conv2d, ConvTranspose2d};
pub use layers::{
    conv2d, conv_transpose2d, group_norm, linear, BasicConv, ConvOpts, FrozenBatchNorm,
};
pub use ops::{max_pool_3x3_s2_p1, resize_bilinear, resize_to, sigmoid, interp_weights};
pub use params::{Init, ParamStore, Scope};
