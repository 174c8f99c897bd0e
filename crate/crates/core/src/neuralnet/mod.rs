//! Hand-written tensor engine and the local/global encoder-decoder network.

pub mod gradcheck;
pub mod checkpoint;
pub mod network;
pub mod ops;
pub mod tensor;

pub use ops::{ConvGeometry, Mode};
pub use tensor::Tensor;
pub use network::{build_network, enhance_image, ArchitectureConfig, LayerKind, LayerSpec, Network, Param};
