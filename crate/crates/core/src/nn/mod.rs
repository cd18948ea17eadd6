//! Minimal 3D convolutional network engine with analytic gradients.

pub mod checkpoint;
pub mod network;
pub mod ops;
pub mod params;
pub mod real;
pub mod tensor;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use network::{ForwardCache, NetworkError, NetworkMode, SegmentationNetwork};
pub use params::{Grads, Param, ParamStore};
pub use real::Real;
pub use tensor::{voxel_count, Dims, Tensor};
