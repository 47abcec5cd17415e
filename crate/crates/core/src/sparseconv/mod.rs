//! Submanifold sparse 3D convolution over hashed voxel sites.

mod conv;
mod hash;

pub(crate) use conv::conv_forward;
pub use conv::{build_kernel_map, offset_of, submanifold_conv, ConvKernel3D, KernelMap, SparseTensor};
pub use hash::KeyIndex;

/// Kernel size used throughout the network.
pub const KERNEL_SIZE: usize = 3;
