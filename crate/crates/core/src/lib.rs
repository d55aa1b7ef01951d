pub mod anomaly;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod fusion_eval;
pub mod gan;
pub mod graph;
pub mod nn;
pub mod scalar;
pub mod segmentation;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ImageTensor32 = data::ImageTensor<f32>;
pub type ImageTensor64 = data::ImageTensor<f64>;
pub type GanModel32 = gan::GanModel<f32>;
pub type GanModel64 = gan::GanModel<f64>;
pub type UNet32 = segmentation::UNet<f32>;
pub type UNet64 = segmentation::UNet<f64>;
