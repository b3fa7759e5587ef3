//! Minimal network plumbing on top of candle: named parameter stores,
//! convolution and normalization layers, Adam, and the checkpoint container.

mod adam;
mod checkpoint;
mod layers;
mod params;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{Checkpoint, FORMAT_VERSION};
pub use layers::{instance_norm, leaky_relu, resize_nearest, sigmoid, Conv2d, ConvConfig};
pub use params::{checksum_tensors, Init, ParamStore};
