//! Sparse 3D convolution engine and voxel-based LiDAR 3D object detection.
//!
//! The compute core (sparse tensors, rulebooks, gather-GEMM-scatter kernels,
//! dense 2D ops and the loss functions) is generic over the floating scalar
//! via [`Real`]; the scene-level pipeline (voxelization, backbone assembly,
//! training, CLI) runs in `f64`.

pub mod augmentation;
pub mod backbone;
pub mod config;
pub mod dense2d;
pub mod detection;
pub mod eval;
pub mod kitti;
pub mod rulebook;
pub mod scalar;
pub mod sparse_ops;
pub mod sparse_tensor;
pub mod synthetic;
pub mod train;
pub mod voxelizer;
pub mod weights_io;

pub use scalar::Real;
pub use sparse_tensor::{Coord3, SparseTensor3};

/// Single-precision sparse feature map (benchmark mode).
pub type SparseTensor3F32 = SparseTensor3<f32>;
/// Double-precision sparse feature map (test/oracle mode).
pub type SparseTensor3F64 = SparseTensor3<f64>;
/// Double-precision convolution weights.
pub type ConvWeightsF64 = sparse_ops::ConvWeights<f64>;
