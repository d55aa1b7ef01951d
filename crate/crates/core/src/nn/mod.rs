//! Layers, parameter storage and optimisers built on [`crate::graph`].

pub mod layers;
pub mod optim;
pub mod params;

pub use layers::{Activation, BatchNorm, Conv2d, ConvTranspose2d, InceptionResBlock, Linear, Mode};
pub use optim::{Adam, AdamConfig};
pub use params::{Init, ParamId, ParamKind, ParamStore};
