//! Residual blocks and the U-shaped encoder/decoder network.

mod blocks;
mod config;
mod network;

pub use blocks::{block_forward, block_param_count, drop_path, init_block, init_conv, init_linear, init_norm, BlockContext};
pub use config::{config_lines, BlockType, ModelConfig, SsmConfig, DESK_GRID_SIZE, INPUT_CHANNELS, STAGES};
pub use network::{
    describe, drop_path_schedule, encode_input, forward_scene, init_params, meepo_forward, meepo_forward_tape, param_count,
    predict, Level, ModelSummary, SceneHierarchy, StageSummary, NOMINAL_VOXELS,
};
pub(crate) use config::parse;
