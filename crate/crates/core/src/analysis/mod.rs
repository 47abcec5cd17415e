//! Analytic operation counts and empirical length-scaling measurements.

mod flops;
mod scaling;

pub use flops::{flops_cnn, flops_mamba, flops_mamba_directions, flops_transformer, FlopParams};
pub use scaling::{
    fit_loglog_slope, scaling_bench, sheet_voxels, streaming_attention, BenchWidths, ScalingArch, ScalingPoint,
    ScalingReport,
};
