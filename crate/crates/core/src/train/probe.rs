//! Right-context probe: each voxel's label is the sign of the first feature
//! of its successor in serialization order, so only a sequence mixer that
//! looks ahead can solve it. The probe network is an input projection,
//! `depth` state-space blocks and a linear head at full resolution, with no
//! spatial convolution or pooling that could leak neighbour features.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::metrics::{miou, EvalReport};
use super::optim::{adamw_step, cosine_lr, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{block_forward, init_block, init_linear, init_norm, predict, BlockContext, BlockType, ModelConfig};
use crate::numerics::{ConvMode, ParamStore, Tape, Tensor, Var};
use crate::pointcloud::{generate_scene, voxelize, SceneSpec, UNLABELED};
use crate::sparseconv::{build_kernel_map, KernelMap};
use crate::ssm::Direction;

pub const PROBE_CLASSES: usize = 2;
const PROBE_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub length: usize,
    pub train_sequences: usize,
    pub val_sequences: usize,
    pub width: usize,
    pub depth: usize,
    pub state_dim: usize,
    pub conv_mode: ConvMode,
    pub directions: Vec<Direction>,
    pub stride: usize,
    pub steps: usize,
    pub learning_rate: f64,
}

impl ProbeConfig {
    /// Causal-free convolution with all four scan orders.
    pub fn causal_free() -> Self {
        ProbeConfig {
            length: 256,
            train_sequences: 8,
            val_sequences: 4,
            width: 16,
            depth: 2,
            state_dim: 8,
            conv_mode: ConvMode::Symmetric,
            directions: Direction::ALL.to_vec(),
            stride: 2,
            steps: 300,
            learning_rate: 3e-3,
        }
    }

    /// Causal convolution with a single forward scan.
    pub fn causal() -> Self {
        ProbeConfig {
            conv_mode: ConvMode::Causal,
            directions: vec![Direction::Forward],
            ..Self::causal_free()
        }
    }

    fn model_config(&self) -> ModelConfig {
        let mut cfg = ModelConfig::desk();
        cfg.drop_path_rate = 0.0;
        cfg.mlp_ratio = 2;
        cfg.ssm.state_dim = self.state_dim;
        cfg.ssm.conv_mode = self.conv_mode;
        cfg.ssm.directions = self.directions.clone();
        cfg.ssm.stride = self.stride;
        cfg
    }
}

/// One serialized voxel sequence with random features.
#[derive(Clone, Debug)]
pub struct ProbeSequence {
    pub features: Tensor<f64>,
    pub labels: Vec<i64>,
    map: Arc<KernelMap>,
}

/// Voxels of a synthetic room in Morton order, with features drawn
/// uniformly from [-1, 1]; label `i` is `[x_{i+1,0} > 0]`, the last voxel is
/// unlabelled.
pub fn probe_sequence(seed: u64, length: usize) -> Result<ProbeSequence> {
    if length < 2 {
        return Err(Error::Parameter("probe sequences need at least 2 voxels".into()));
    }
    let spec = SceneSpec {
        num_points: length * 8,
        ..SceneSpec::default()
    };
    let vox = voxelize(&generate_scene(seed, &spec)?, 0.05)?;
    if vox.len() < length {
        return Err(Error::Data(format!("scene yields {} voxels, need {length}", vox.len())));
    }
    let coords = &vox.coords[..length];
    let keys = &vox.keys[..length];
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let data: Vec<f64> = (0..length * PROBE_CHANNELS).map(|_| rng.random_range(-1.0..1.0)).collect();
    let features = Tensor::matrix(length, PROBE_CHANNELS, data)?;
    let mut labels: Vec<i64> = (0..length - 1).map(|i| (features.at(i + 1, 0) > 0.0) as i64).collect();
    labels.push(UNLABELED);
    Ok(ProbeSequence {
        features,
        labels,
        map: Arc::new(build_kernel_map(coords, keys, 3)?),
    })
}

fn init_probe(cfg: &ProbeConfig, model: &ModelConfig, seed: u64) -> Result<ParamStore<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    init_linear(&mut store, "probe.embed", PROBE_CHANNELS, cfg.width, false, &mut rng);
    for b in 0..cfg.depth {
        init_block(&mut store, &format!("probe.block{b}"), BlockType::MambaOnly, cfg.width, model, &mut rng)?;
    }
    init_norm(&mut store, "probe.head.norm", cfg.width);
    init_linear(&mut store, "probe.head", cfg.width, PROBE_CLASSES, false, &mut rng);
    Ok(store)
}

fn probe_forward(
    tape: &mut Tape<f32>,
    seq: &ProbeSequence,
    cfg: &ProbeConfig,
    model: &ModelConfig,
    store: &ParamStore<f32>,
) -> Result<Var> {
    let mamba = model.mamba_config(cfg.width)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = tape.constant(seq.features.cast());
    let mut x = tape.linear_layer(x, store, "probe.embed")?;
    for b in 0..cfg.depth {
        let mut ctx = BlockContext {
            map: &seq.map,
            mamba: &mamba,
            heads: 1,
            drop_rate: 0.0,
            train: false,
            rng: &mut rng,
        };
        x = block_forward(tape, x, store, &format!("probe.block{b}"), BlockType::MambaOnly, &mut ctx)?;
    }
    let x = tape.norm_layer(x, store, "probe.head.norm")?;
    tape.linear_layer(x, store, "probe.head")
}

/// Trains the probe network with `seed` and returns the validation report.
pub fn right_context_probe(cfg: &ProbeConfig, seed: u64) -> Result<EvalReport> {
    let model = cfg.model_config();
    model.ssm.scan_directions()?;
    let base = seed.wrapping_mul(1000);
    let train_set = (0..cfg.train_sequences)
        .map(|i| probe_sequence(base + i as u64, cfg.length))
        .collect::<Result<Vec<_>>>()?;
    let val_set = (0..cfg.val_sequences)
        .map(|i| probe_sequence(base + 500 + i as u64, cfg.length))
        .collect::<Result<Vec<_>>>()?;
    let mut store = init_probe(cfg, &model, seed)?;
    let opt = TrainConfig {
        learning_rate: cfg.learning_rate,
        weight_decay: 0.0,
        steps: cfg.steps,
        block_lr_scaler: 1.0,
        ..TrainConfig::desk()
    };
    for step in 0..cfg.steps {
        let seq = &train_set[step % train_set.len()];
        let mut tape = Tape::new();
        let logits = probe_forward(&mut tape, seq, cfg, &model, &store)?;
        let loss = tape.cross_entropy(logits, &seq.labels, UNLABELED)?;
        let grads = tape.backward(loss)?;
        tape.accumulate(&grads, &mut store, 1.0)?;
        adamw_step(&mut store, &opt, cosine_lr(step, &opt))?;
    }
    let (mut pred, mut truth) = (Vec::new(), Vec::new());
    for seq in &val_set {
        let mut tape = Tape::new();
        let logits = probe_forward(&mut tape, seq, cfg, &model, &store)?;
        pred.extend(predict(tape.value(logits)));
        truth.extend_from_slice(&seq.labels);
    }
    let mut report = miou(&pred, &truth, PROBE_CLASSES, UNLABELED);
    report.step = cfg.steps;
    Ok(report)
}
