use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::blocks::{block_forward, block_param_count, init_block, init_conv, init_linear, init_norm, BlockContext};
use super::config::{ModelConfig, STAGES};
use crate::analysis::{flops_cnn, flops_mamba_directions, flops_transformer, FlopParams};
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Real, Tape, Tensor, Var};
use crate::pointcloud::{grid_pool, voxelize, PointCloud, SerializedVoxels};
use crate::sparseconv::{build_kernel_map, KernelMap};

/// One resolution of the U-shaped hierarchy.
#[derive(Clone, Debug)]
pub struct Level {
    pub coords: Vec<[u32; 3]>,
    pub keys: Vec<u64>,
    pub map: Arc<KernelMap>,
    /// Row of the coarser level's parent for each voxel; absent at the
    /// coarsest level.
    pub parent: Option<Arc<Vec<usize>>>,
}

impl Level {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

/// Voxel sets, kernel maps and pooling maps for every level of one scene.
/// Depends only on geometry, so it is built once per scene.
#[derive(Clone, Debug)]
pub struct SceneHierarchy {
    pub levels: Vec<Level>,
    /// Voxel-level input encoding, `M × in_channels`.
    pub input: Tensor<f64>,
    pub labels: Option<Vec<i64>>,
    /// Point row → voxel row.
    pub inverse_map: Vec<usize>,
}

impl SceneHierarchy {
    pub fn from_cloud(pc: &PointCloud, cfg: &ModelConfig) -> Result<Self> {
        if pc.is_empty() {
            return Err(Error::Data("cannot run the network on an empty point cloud".into()));
        }
        let vox = voxelize(pc, cfg.grid_size)?;
        Self::from_voxels(&vox, cfg)
    }

    pub fn from_voxels(vox: &SerializedVoxels, cfg: &ModelConfig) -> Result<Self> {
        if vox.is_empty() {
            return Err(Error::Data("cannot run the network on an empty voxel set".into()));
        }
        let input = encode_input(vox, cfg.grid_size);
        if input.cols() != cfg.in_channels {
            return Err(Error::Config(format!(
                "in_channels = {} but the scene provides {} feature channels plus 3 coordinates",
                cfg.in_channels,
                vox.channels()
            )));
        }
        let k = cfg.kernel_size();
        let mut levels = Vec::with_capacity(STAGES + 1);
        let mut current = vox.clone();
        for s in 0..=STAGES {
            let map = Arc::new(build_kernel_map(&current.coords, &current.keys, k)?);
            let (next, parent) = if s < STAGES {
                let (coarse, pool) = grid_pool(&current, cfg.down_strides[s] as u32)?;
                (Some(coarse), Some(pool.parent))
            } else {
                (None, None)
            };
            levels.push(Level {
                coords: current.coords.clone(),
                keys: current.keys.clone(),
                map,
                parent,
            });
            if let Some(n) = next {
                current = n;
            }
        }
        Ok(SceneHierarchy {
            levels,
            input,
            labels: vox.labels.clone(),
            inverse_map: vox.inverse_map.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.levels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels[0].is_empty()
    }

    pub fn level_sizes(&self) -> Vec<usize> {
        self.levels.iter().map(Level::len).collect()
    }
}

/// Voxel features followed by the voxel centre relative to the scene mean,
/// in meters.
pub fn encode_input(vox: &SerializedVoxels, grid_size: f64) -> Tensor<f64> {
    let m = vox.len();
    let c = vox.channels();
    let mut mean = [0.0f64; 3];
    for p in &vox.coords {
        for a in 0..3 {
            mean[a] += p[a] as f64 / m as f64;
        }
    }
    let mut data = Vec::with_capacity(m * (c + 3));
    for (r, p) in vox.coords.iter().enumerate() {
        data.extend_from_slice(vox.features.row(r));
        for a in 0..3 {
            data.push((p[a] as f64 - mean[a]) * grid_size);
        }
    }
    Tensor::matrix(m, c + 3, data).expect("shape")
}

/// Every parameter of the network, seeded deterministically.
pub fn init_params<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let k = cfg.kernel_size();
    let emb = cfg.embedding_channels;
    for i in 0..cfg.embedding_depth {
        let cin = if i == 0 { cfg.in_channels } else { emb };
        init_conv(&mut store, &format!("embed.conv{i}"), cin, emb, k, false, &mut rng);
        init_norm(&mut store, &format!("embed.norm{i}"), emb);
    }
    for s in 1..=STAGES {
        let (cin, c) = (cfg.encoder_width(s - 1), cfg.encoder_width(s));
        init_linear(&mut store, &format!("enc{s}.pool"), cin, c, false, &mut rng);
        init_norm(&mut store, &format!("enc{s}.pool_norm"), c);
        for b in 0..cfg.encoder_depths[s - 1] {
            init_block(&mut store, &format!("enc{s}.block{b}"), cfg.block_types[s - 1], c, cfg, &mut rng)?;
        }
    }
    for j in (0..STAGES).rev() {
        let c = cfg.decoder_channels[j];
        init_linear(&mut store, &format!("dec{j}.up"), cfg.decoder_input_width(j), c, false, &mut rng);
        init_norm(&mut store, &format!("dec{j}.up_norm"), c);
        init_linear(&mut store, &format!("dec{j}.skip"), cfg.encoder_width(j), c, false, &mut rng);
        for b in 0..cfg.decoder_depths[j] {
            init_block(&mut store, &format!("dec{j}.block{b}"), cfg.block_types[j], c, cfg, &mut rng)?;
        }
    }
    init_norm(&mut store, "head.norm", cfg.decoder_channels[0]);
    init_linear(&mut store, "head", cfg.decoder_channels[0], cfg.num_classes, false, &mut rng);
    Ok(store)
}

/// Analytic parameter count; equals `init_params(cfg).numel()`.
pub fn param_count(cfg: &ModelConfig) -> Result<usize> {
    let vol = cfg.kernel_size().pow(3);
    let emb = cfg.embedding_channels;
    let mut n = 0;
    for i in 0..cfg.embedding_depth {
        let cin = if i == 0 { cfg.in_channels } else { emb };
        n += vol * cin * emb + emb + 2 * emb;
    }
    for s in 1..=STAGES {
        let (cin, c) = (cfg.encoder_width(s - 1), cfg.encoder_width(s));
        n += cin * c + c + 2 * c;
        n += cfg.encoder_depths[s - 1] * block_param_count(cfg.block_types[s - 1], c, cfg)?;
    }
    for j in 0..STAGES {
        let c = cfg.decoder_channels[j];
        n += cfg.decoder_input_width(j) * c + 3 * c;
        n += cfg.encoder_width(j) * c + c;
        n += cfg.decoder_depths[j] * block_param_count(cfg.block_types[j], c, cfg)?;
    }
    let c0 = cfg.decoder_channels[0];
    Ok(n + 2 * c0 + c0 * cfg.num_classes + cfg.num_classes)
}

/// Stochastic depth rate of each block in execution order (encoder stages
/// then decoder stages), rising linearly from 0 to `drop_path_rate`.
pub fn drop_path_schedule(cfg: &ModelConfig) -> Vec<f64> {
    let n = cfg.encoder_depths.iter().sum::<usize>() + cfg.decoder_depths.iter().sum::<usize>();
    (0..n)
        .map(|i| if n > 1 { cfg.drop_path_rate * i as f64 / (n - 1) as f64 } else { cfg.drop_path_rate })
        .collect()
}

/// Per-voxel logits, `M × num_classes`, recorded on `tape`.
pub fn meepo_forward_tape<T: Real, R: Rng>(
    tape: &mut Tape<T>,
    scene: &SceneHierarchy,
    cfg: &ModelConfig,
    store: &ParamStore<T>,
    train: bool,
    rng: &mut R,
) -> Result<Var> {
    if scene.input.cols() != cfg.in_channels {
        return Err(Error::Config(format!(
            "model expects {} input channels, scene has {}",
            cfg.in_channels,
            scene.input.cols()
        )));
    }
    let rates = drop_path_schedule(cfg);
    let mut next_rate = rates.iter().copied();
    let mut x = tape.constant(scene.input.cast());
    for i in 0..cfg.embedding_depth {
        x = tape.conv_layer(x, store, &format!("embed.conv{i}"), &scene.levels[0].map)?;
        x = tape.norm_layer(x, store, &format!("embed.norm{i}"))?;
        x = tape.silu(x);
    }
    let mut skips = vec![x];
    for s in 1..=STAGES {
        let (fine, level) = (&scene.levels[s - 1], &scene.levels[s]);
        let parent = fine.parent.clone().expect("pooled level");
        x = tape.scatter_mean(x, parent, level.len())?;
        x = tape.linear_layer(x, store, &format!("enc{s}.pool"))?;
        x = tape.norm_layer(x, store, &format!("enc{s}.pool_norm"))?;
        x = tape.silu(x);
        let c = cfg.encoder_width(s);
        let mamba = cfg.mamba_config(c)?;
        for b in 0..cfg.encoder_depths[s - 1] {
            let mut ctx = BlockContext {
                map: &level.map,
                mamba: &mamba,
                heads: cfg.heads(c),
                drop_rate: next_rate.next().unwrap_or(0.0),
                train,
                rng: &mut *rng,
            };
            x = block_forward(tape, x, store, &format!("enc{s}.block{b}"), cfg.block_types[s - 1], &mut ctx)?;
        }
        skips.push(x);
    }
    for j in (0..STAGES).rev() {
        let level = &scene.levels[j];
        let parent = level.parent.clone().expect("pooled level");
        let up = tape.linear_layer(x, store, &format!("dec{j}.up"))?;
        let up = tape.norm_layer(up, store, &format!("dec{j}.up_norm"))?;
        let up = tape.silu(up);
        let up = tape.gather_rows(up, parent)?;
        let skip = tape.linear_layer(skips[j], store, &format!("dec{j}.skip"))?;
        x = tape.add(up, skip)?;
        let c = cfg.decoder_channels[j];
        let mamba = cfg.mamba_config(c)?;
        for b in 0..cfg.decoder_depths[j] {
            let mut ctx = BlockContext {
                map: &level.map,
                mamba: &mamba,
                heads: cfg.heads(c),
                drop_rate: next_rate.next().unwrap_or(0.0),
                train,
                rng: &mut *rng,
            };
            x = block_forward(tape, x, store, &format!("dec{j}.block{b}"), cfg.block_types[j], &mut ctx)?;
        }
    }
    let x = tape.norm_layer(x, store, "head.norm")?;
    tape.linear_layer(x, store, "head")
}

/// Voxelizes `pc` and returns per-voxel logits with the point → voxel map.
pub fn meepo_forward<T: Real>(
    pc: &PointCloud,
    cfg: &ModelConfig,
    store: &ParamStore<T>,
    train: bool,
) -> Result<(Tensor<T>, Vec<usize>)> {
    cfg.validate()?;
    let scene = SceneHierarchy::from_cloud(pc, cfg)?;
    let logits = forward_scene(&scene, cfg, store, train, 0)?;
    Ok((logits, scene.inverse_map))
}

/// Forward pass on a prepared scene; `seed` drives drop path in training.
pub fn forward_scene<T: Real>(
    scene: &SceneHierarchy,
    cfg: &ModelConfig,
    store: &ParamStore<T>,
    train: bool,
    seed: u64,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = meepo_forward_tape(&mut tape, scene, cfg, store, train, &mut rng)?;
    Ok(tape.value(y).clone())
}

/// Row-wise argmax.
pub fn predict<T: Real>(logits: &Tensor<T>) -> Vec<i64> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (c, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = c;
                }
            }
            best as i64
        })
        .collect()
}

/// One row of [`ModelSummary`].
#[derive(Clone, Debug, PartialEq)]
pub struct StageSummary {
    pub name: String,
    pub width: usize,
    pub blocks: usize,
    pub block_type: String,
    pub params: usize,
    pub voxels: usize,
    pub conv_flops: u128,
    pub mixer_flops: u128,
}

/// Block, parameter and operation accounting for a configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSummary {
    pub total_blocks: usize,
    pub total_params: usize,
    pub directions: usize,
    pub stages: Vec<StageSummary>,
}

/// Voxel count assumed at the finest level when no scene is supplied.
pub const NOMINAL_VOXELS: usize = 100_000;

/// Summarizes `cfg`. Operation counts use the voxel counts of `levels`
/// when given, otherwise `NOMINAL_VOXELS` shrunk by `stride²` per level.
pub fn describe(cfg: &ModelConfig, levels: Option<&[usize]>) -> Result<ModelSummary> {
    cfg.validate()?;
    let store = init_params::<f32>(cfg, 0)?;
    let lens: Vec<usize> = match levels {
        Some(l) if l.len() == STAGES + 1 => l.to_vec(),
        Some(l) => return Err(Error::Parameter(format!("expected {} level sizes, got {}", STAGES + 1, l.len()))),
        None => {
            let mut v = vec![NOMINAL_VOXELS];
            for s in 0..STAGES {
                let st = cfg.down_strides[s];
                v.push((v[s] / (st * st)).max(1));
            }
            v
        }
    };
    let dirs = cfg.ssm.scan_directions()?.directions().len() as u64;
    let k = cfg.kernel_size() as u64;
    let stage = |name: String, level: usize, c: usize, depth: usize, kind: super::config::BlockType| -> Result<StageSummary> {
        let mut p = FlopParams::new(lens[level] as u64, c as u64);
        p.k = k;
        p.n = cfg.ssm.state_dim as u64;
        p.e = cfg.ssm.expand as u64;
        p.conv_k = cfg.ssm.conv_kernel as u64;
        let conv = if kind.has_conv() { flops_cnn(&p)? } else { 0 };
        let mixer = if kind.has_mamba() {
            flops_mamba_directions(&p, dirs)?
        } else if kind.has_attention() {
            flops_transformer(&p)?
        } else {
            0
        };
        Ok(StageSummary {
            params: store.numel_with_prefix(&format!("{name}.")),
            name,
            width: c,
            blocks: depth,
            block_type: kind.name().to_string(),
            voxels: lens[level],
            conv_flops: conv * depth as u128,
            mixer_flops: mixer * depth as u128,
        })
    };
    let mut stages = Vec::new();
    let emb = cfg.embedding_channels;
    let mut p = FlopParams::new(lens[0] as u64, emb as u64);
    p.k = k;
    let first = {
        let mut q = p;
        q.c_in = cfg.in_channels as u64;
        flops_cnn(&q)?
    };
    stages.push(StageSummary {
        name: "embed".into(),
        width: emb,
        blocks: cfg.embedding_depth,
        block_type: "submanifold_conv".into(),
        params: store.numel_with_prefix("embed."),
        voxels: lens[0],
        conv_flops: first + flops_cnn(&p)? * (cfg.embedding_depth as u128 - 1),
        mixer_flops: 0,
    });
    for s in 1..=STAGES {
        stages.push(stage(format!("enc{s}"), s, cfg.encoder_width(s), cfg.encoder_depths[s - 1], cfg.block_types[s - 1])?);
    }
    for j in (0..STAGES).rev() {
        stages.push(stage(format!("dec{j}"), j, cfg.decoder_channels[j], cfg.decoder_depths[j], cfg.block_types[j])?);
    }
    stages.push(StageSummary {
        name: "head".into(),
        width: cfg.num_classes,
        blocks: 0,
        block_type: "linear".into(),
        params: store.numel_with_prefix("head."),
        voxels: lens[0],
        conv_flops: 0,
        mixer_flops: 0,
    });
    Ok(ModelSummary {
        total_blocks: cfg.total_blocks(),
        total_params: store.numel(),
        directions: dirs as usize,
        stages,
    })
}

impl fmt::Display for ModelSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "total_blocks = {}", self.total_blocks)?;
        writeln!(f, "total_params = {}", self.total_params)?;
        writeln!(f, "scan_directions = {}", self.directions)?;
        writeln!(f, "stage,width,blocks,block_type,params,voxels,conv_flops,mixer_flops")?;
        for s in &self.stages {
            writeln!(
                f,
                "{},{},{},{},{},{},{},{}",
                s.name, s.width, s.blocks, s.block_type, s.params, s.voxels, s.conv_flops, s.mixer_flops
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::flops_mamba;
    use crate::model::BlockType;
    use crate::numerics::grad_check_params;
    use crate::pointcloud::{generate_scene, SceneSpec};

    fn tiny_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::desk();
        cfg.embedding_depth = 1;
        cfg.embedding_channels = 4;
        cfg.encoder_channels = vec![4, 4, 4, 4];
        cfg.decoder_channels = vec![4, 4, 4, 4];
        cfg.encoder_depths = vec![1, 1, 1, 1];
        cfg.head_dim = 2;
        cfg.mlp_ratio = 2;
        cfg.ssm.state_dim = 2;
        cfg.ssm.expand = 1;
        cfg.ssm.conv_kernel = 3;
        cfg.drop_path_rate = 0.0;
        cfg
    }

    fn scene(points: usize, seed: u64) -> PointCloud {
        let spec = SceneSpec {
            num_points: points,
            ..SceneSpec::default()
        };
        generate_scene(seed, &spec).unwrap()
    }

    #[test]
    fn desk_forward_shape() {
        let cfg = ModelConfig::desk();
        let pc = scene(1000, 1);
        let store = init_params::<f32>(&cfg, 0).unwrap();
        let (logits, inverse) = meepo_forward(&pc, &cfg, &store, false).unwrap();
        let m = voxelize(&pc, cfg.grid_size).unwrap().len();
        assert_eq!(logits.shape(), &[m, cfg.num_classes]);
        assert_eq!(inverse.len(), pc.len());
        assert!(logits.all_finite());
    }

    #[test]
    fn level_sizes_shrink_and_mirror() {
        let cfg = ModelConfig::desk();
        let h = SceneHierarchy::from_cloud(&scene(3000, 2), &cfg).unwrap();
        let sizes = h.level_sizes();
        assert!(sizes.windows(2).all(|w| w[1] <= w[0]), "{sizes:?}");
        for s in 0..STAGES {
            let parent = h.levels[s].parent.as_ref().unwrap();
            assert_eq!(parent.len(), sizes[s]);
            assert!(parent.iter().all(|&p| p < sizes[s + 1]));
            let mut hit = vec![false; sizes[s + 1]];
            parent.iter().for_each(|&p| hit[p] = true);
            assert!(hit.iter().all(|&b| b));
        }
    }

    #[test]
    fn parameter_count_matches_store() {
        for kind in BlockType::ALL {
            let mut cfg = ModelConfig::desk();
            cfg.block_types = vec![kind; STAGES];
            let store = init_params::<f32>(&cfg, 0).unwrap();
            assert_eq!(store.numel(), param_count(&cfg).unwrap(), "{kind}");
        }
    }

    #[test]
    fn mixer_swap_matches_projection_terms() {
        // Attention weights equal the per-token projection term 4C² and the
        // state-space in/out projections equal 3EC², so the parameter delta
        // of swapping mixers follows from the operation counts at L = 1.
        let base = ModelConfig::desk();
        let mut attn = base.clone();
        attn.block_types = vec![BlockType::CnnTransformer; STAGES];
        let delta = param_count(&attn).unwrap() as i128 - param_count(&base).unwrap() as i128;
        let mut want = 0i128;
        let mut widths: Vec<(usize, usize)> = (1..=STAGES).map(|s| (base.encoder_width(s), base.encoder_depths[s - 1])).collect();
        widths.extend((0..STAGES).map(|j| (base.decoder_channels[j], base.decoder_depths[j])));
        for (c, depth) in widths {
            let mut p = FlopParams::new(1, c as u64);
            p.n = base.ssm.state_dim as u64;
            p.e = base.ssm.expand as u64;
            p.conv_k = base.ssm.conv_kernel as u64;
            let attn_proj = flops_transformer(&p).unwrap() - 2 * c as u128;
            let mamba_proj = flops_mamba(&p).unwrap() - 9 * (c as u128) * p.n as u128 - c as u128 * p.conv_k as u128;
            let mcfg = base.mamba_config(c).unwrap();
            let groups = mcfg.directions.param_keys().len() * mcfg.group_params();
            want += depth as i128 * (attn_proj as i128 - mamba_proj as i128 - groups as i128);
        }
        assert_eq!(delta, want);
    }

    #[test]
    fn zero_init_network_is_head_of_embedding() {
        let mut cfg = tiny_cfg();
        cfg.zero_init_residual = true;
        let store = init_params::<f64>(&cfg, 3).unwrap();
        let h = SceneHierarchy::from_cloud(&scene(200, 3), &cfg).unwrap();
        let logits = forward_scene(&h, &cfg, &store, false, 0).unwrap();
        assert!(logits.all_finite());
        let spread: f64 = (0..logits.cols())
            .map(|c| {
                let col: Vec<f64> = (0..logits.rows()).map(|r| logits.at(r, c)).collect();
                col.iter().cloned().fold(f64::MIN, f64::max) - col.iter().cloned().fold(f64::MAX, f64::min)
            })
            .sum();
        assert!(spread > 1e-6, "logits are degenerate");
    }

    #[test]
    fn training_mode_forward_is_seeded() {
        let mut cfg = tiny_cfg();
        cfg.drop_path_rate = 0.5;
        let store = init_params::<f64>(&cfg, 4).unwrap();
        let h = SceneHierarchy::from_cloud(&scene(300, 4), &cfg).unwrap();
        let a = forward_scene(&h, &cfg, &store, true, 7).unwrap();
        let b = forward_scene(&h, &cfg, &store, true, 7).unwrap();
        assert_eq!(a.data(), b.data());
        let e1 = forward_scene(&h, &cfg, &store, false, 7).unwrap();
        let e2 = forward_scene(&h, &cfg, &store, false, 8).unwrap();
        assert_eq!(e1.data(), e2.data());
    }

    #[test]
    fn rejects_channel_mismatch() {
        let mut cfg = tiny_cfg();
        cfg.in_channels = 5;
        assert!(matches!(SceneHierarchy::from_cloud(&scene(50, 5), &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn describe_reports_blocks_and_params() {
        let cfg = ModelConfig::paper();
        let s = describe(&cfg, None).unwrap();
        assert_eq!(s.total_blocks, 18);
        assert_eq!(s.total_params, param_count(&cfg).unwrap());
        assert_eq!(s.stages.iter().map(|st| st.params).sum::<usize>(), s.total_params);
        let text = s.to_string();
        assert!(text.contains("total_blocks = 18"));
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let mut cfg = tiny_cfg();
        cfg.grid_size = 1.0;
        let pc = scene(45, 6);
        let h = SceneHierarchy::from_cloud(&pc, &cfg).unwrap();
        assert!(h.len() <= 32 && h.len() >= 8, "{}", h.len());
        let store = init_params::<f64>(&cfg, 6).unwrap();
        let labels = h.labels.clone().unwrap();
        let names: Vec<String> = store.names().cloned().collect();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        let f = |tape: &mut Tape<f64>, s: &ParamStore<f64>| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let logits = meepo_forward_tape(tape, &h, &cfg, s, false, &mut rng)?;
            tape.cross_entropy(logits, &labels, -1)
        };
        let err = grad_check_params(f, &store, &names, 1e-4, 3).unwrap();
        assert!(err < 1e-3, "{err}");
    }
}
