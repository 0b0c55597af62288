//! Layers, parameters and convolution kernels.

pub mod conv;
pub mod layers;
pub mod models;
pub mod params;
pub mod pool;

pub use conv::Conv2dParams;
pub use layers::{
    conv2d_backward, conv2d_forward, separable_conv, ConvLayer, ConvSpec, Grouping, Layer, Model, Phase,
    SeparableConv, Sequential, ShapeMode,
};
pub use params::{ParamGroup, ParamId, ParamStore};
pub use pool::PoolParams;
