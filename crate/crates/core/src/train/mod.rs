//! Optimization, metrics, checkpoints, datasets and ablation procedures.

mod ablation;
mod checkpoint;
mod data;
mod metrics;
mod optim;
mod probe;
mod trainer;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use data::{build_dataset, select_voxels, synthetic_voxels, Dataset, DatasetSpec};
pub use metrics::{miou, EvalReport};
pub use optim::{adamw_step, cosine_lr, is_block_param, TrainConfig};
pub use trainer::{evaluate, train_loop, train_run, RunConfig, TrainOutcome};
pub use probe::{probe_sequence, right_context_probe, ProbeConfig, ProbeSequence, PROBE_CLASSES};
pub use ablation::{
    additive_ablation, ablation_suite, apply_axis, named_directions, train_seeds, AblationAxis, AblationRow, AblationTable,
    CNN_BASELINE_ROW, FULL_MODEL_ROW,
};
