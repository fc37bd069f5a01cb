//! Small neural-network toolkit on top of candle tensors: a GEMM-backed
//! convolution, seeded parameter storage, layers, and checkpoint I/O.

pub mod backbone;
pub mod checkpoint;
pub mod conv;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod params;

pub use backbone::{ConvFeatureConfig, ConvFeatureNet, FeatureBackbone};
pub use checkpoint::{file_hash, load_checkpoint, save_checkpoint, Checkpoint};
pub use layers::{BiGru, Conv1d, Conv2d, GruCell, Linear};
pub use optim::{Adam, AdamConfig};
pub use params::ParamStore;
