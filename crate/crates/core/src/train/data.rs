use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{parse, ModelConfig, SceneHierarchy};
use crate::numerics::Tensor;
use crate::pointcloud::{generate_scene, voxelize, SceneSpec, SerializedVoxels};

/// Synthetic room benchmark: how many scenes, and how large.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub train_scenes: usize,
    pub val_scenes: usize,
    /// Voxel budget per scene; larger scenes are randomly thinned to it.
    pub voxels: usize,
    pub seed: u64,
    pub scene: SceneSpec,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            train_scenes: 8,
            val_scenes: 4,
            voxels: 768,
            seed: 0,
            scene: SceneSpec {
                num_points: 6000,
                ..SceneSpec::default()
            },
        }
    }
}

impl DatasetSpec {
    /// Applies one `key = value` setting (keys without the `data.` prefix).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "train_scenes" => self.train_scenes = parse(key, value)?,
            "val_scenes" => self.val_scenes = parse(key, value)?,
            "voxels" => self.voxels = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "points" => self.scene.num_points = parse(key, value)?,
            "color_noise" => self.scene.color_noise = parse(key, value)?,
            "ambiguity_rate" => self.scene.ambiguity_rate = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown data key `{other}`"))),
        }
        Ok(())
    }

    pub fn to_config_string(&self) -> String {
        format!(
            "data.train_scenes = {}\ndata.val_scenes = {}\ndata.voxels = {}\ndata.seed = {}\ndata.points = {}\n\
             data.color_noise = {}\ndata.ambiguity_rate = {}\n",
            self.train_scenes,
            self.val_scenes,
            self.voxels,
            self.seed,
            self.scene.num_points,
            self.scene.color_noise,
            self.scene.ambiguity_rate
        )
    }
}

/// Prepared training and validation scenes.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<SceneHierarchy>,
    pub val: Vec<SceneHierarchy>,
}

/// Keeps only `rows` (ascending) of a serialization; each kept voxel
/// becomes its own source point.
pub fn select_voxels(v: &SerializedVoxels, rows: &[usize]) -> SerializedVoxels {
    let c = v.channels();
    let mut features = Vec::with_capacity(rows.len() * c);
    for &r in rows {
        features.extend_from_slice(v.features.row(r));
    }
    SerializedVoxels {
        coords: rows.iter().map(|&r| v.coords[r]).collect(),
        keys: rows.iter().map(|&r| v.keys[r]).collect(),
        features: Tensor::matrix(rows.len(), c, features).expect("shape"),
        labels: v.labels.as_ref().map(|l| rows.iter().map(|&r| l[r]).collect()),
        inverse_map: (0..rows.len()).collect(),
        counts: rows.iter().map(|&r| v.counts[r]).collect(),
    }
}

/// One voxelized synthetic room with at most `voxels` voxels.
pub fn synthetic_voxels(seed: u64, scene: &SceneSpec, grid_size: f64, voxels: usize) -> Result<SerializedVoxels> {
    if voxels == 0 {
        return Err(Error::Parameter("voxel budget must be positive".into()));
    }
    let pc = generate_scene(seed, scene)?;
    let v = voxelize(&pc, grid_size)?;
    if v.len() <= voxels {
        return Ok(v);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_cafe);
    let mut rows = sample(&mut rng, v.len(), voxels).into_vec();
    rows.sort_unstable();
    Ok(select_voxels(&v, &rows))
}

/// Training scenes use seeds `seed..`, validation scenes continue after them.
pub fn build_dataset(spec: &DatasetSpec, cfg: &ModelConfig) -> Result<Dataset> {
    let make = |i: usize| -> Result<SceneHierarchy> {
        let v = synthetic_voxels(spec.seed.wrapping_add(i as u64), &spec.scene, cfg.grid_size, spec.voxels)?;
        SceneHierarchy::from_voxels(&v, cfg)
    };
    let train = (0..spec.train_scenes).map(make).collect::<Result<Vec<_>>>()?;
    let val = (spec.train_scenes..spec.train_scenes + spec.val_scenes)
        .map(make)
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { train, val })
}
