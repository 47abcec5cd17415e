//! Selective state-space scans, direction orchestration and the mixing
//! module built on them.

mod directions;
mod mamba;
mod scan;
mod zoh;

pub use directions::{bidirectional_strided_ssm, invert_permutation, strided_permutation, Direction, ScanDirections};
pub use mamba::{init_mamba_params, mamba_module, MambaConfig};
pub use scan::{discretized_decay, selective_scan, SsmParams, SsmVars};
pub use zoh::{zoh_discretize, ZOH_LIMIT};

#[allow(unused_imports)]
pub(crate) use scan::{scan_forward, ScanOperands};
