//! Point-cloud semantic segmentation built from Morton-serialized sparse
//! voxels, submanifold sparse convolution and a causal-free, bidirectional
//! strided selective state-space module.

pub mod analysis;
pub mod error;
pub mod model;
pub mod numerics;
pub mod pointcloud;
pub mod sparseconv;
pub mod ssm;
pub mod train;

pub use error::{Error, Result};
pub use numerics::{ConvMode, ParamStore, Real, Tape, Tensor, Var};
