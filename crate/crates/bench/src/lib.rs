//! Seeded inputs for the kernel benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use meepo_core::analysis::sheet_voxels;
use meepo_core::model::{init_params, ModelConfig, SceneHierarchy};
use meepo_core::pointcloud::{generate_scene, PointCloud, SceneSpec};
use meepo_core::sparseconv::{ConvKernel3D, SparseTensor};
use meepo_core::ssm::{Direction, ScanDirections, SsmParams};
use meepo_core::train::synthetic_voxels;
use meepo_core::{ParamStore, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor<f32> {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    Tensor::matrix(rows, cols, data).expect("shape")
}

/// Selective-scan input and one parameter set per scan order.
pub struct ScanFixture {
    pub u: Tensor<f32>,
    pub params: Vec<SsmParams<f32>>,
    pub directions: ScanDirections,
}

impl ScanFixture {
    pub fn new(l: usize, channels: usize, state: usize, seed: u64) -> Self {
        let mut r = rng(seed);
        let directions = ScanDirections::new(2, &Direction::ALL, false).expect("directions");
        let rank = channels.div_ceil(16);
        let params = directions
            .param_keys()
            .iter()
            .map(|_| SsmParams::init(channels, state, rank, true, &mut r))
            .collect();
        ScanFixture {
            u: random_matrix(&mut r, l, channels),
            params,
            directions,
        }
    }
}

/// Query, key and value rows for single-head attention.
pub struct AttentionFixture {
    pub q: Vec<f32>,
    pub k: Vec<f32>,
    pub v: Vec<f32>,
    pub l: usize,
    pub c: usize,
}

impl AttentionFixture {
    pub fn new(l: usize, c: usize, seed: u64) -> Self {
        let mut r = rng(seed);
        let mut vec = || (0..l * c).map(|_| r.random_range(-1.0f32..1.0)).collect::<Vec<_>>();
        AttentionFixture {
            q: vec(),
            k: vec(),
            v: vec(),
            l,
            c,
        }
    }
}

/// A planar sheet of `l` voxels with random features and a 3³ kernel.
pub struct ConvFixture {
    pub input: SparseTensor<f32>,
    pub kernel: ConvKernel3D<f32>,
}

impl ConvFixture {
    pub fn new(l: usize, c: usize, seed: u64) -> Self {
        let mut r = rng(seed);
        let (coords, keys) = sheet_voxels(l);
        let features = random_matrix(&mut r, l, c);
        let scale = 1.0 / (27.0 * c as f32).sqrt();
        let weights = random_matrix(&mut r, 27 * c, c).map(|w| w * scale);
        ConvFixture {
            input: SparseTensor::new(coords, keys, features).expect("sheet"),
            kernel: ConvKernel3D::new(weights, Tensor::zeros(&[c]), 3).expect("kernel"),
        }
    }
}

/// Synthetic room as a raw cloud.
pub fn scene_cloud(seed: u64, points: usize) -> PointCloud {
    let spec = SceneSpec {
        num_points: points,
        ..SceneSpec::default()
    };
    generate_scene(seed, &spec).expect("scene")
}

/// Desk-width network with its parameters and one prepared scene.
pub struct ModelFixture {
    pub cfg: ModelConfig,
    pub params: ParamStore<f32>,
    pub scene: SceneHierarchy,
}

impl ModelFixture {
    pub fn new(voxels: usize, seed: u64) -> Self {
        let cfg = ModelConfig::desk();
        let spec = SceneSpec {
            num_points: 6000,
            ..SceneSpec::default()
        };
        let vox = synthetic_voxels(seed, &spec, cfg.grid_size, voxels).expect("scene");
        ModelFixture {
            params: init_params(&cfg, seed).expect("params"),
            scene: SceneHierarchy::from_voxels(&vox, &cfg).expect("hierarchy"),
            cfg,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use meepo_core::ssm::bidirectional_strided_ssm;

    #[test]
    fn fixtures_have_requested_shapes() {
        let s = ScanFixture::new(64, 8, 4, 1);
        assert_eq!(s.u.shape(), &[64, 8]);
        assert_eq!(s.params.len(), 4);
        let y = bidirectional_strided_ssm(&s.u, &s.params, &s.directions).unwrap();
        assert!(y.all_finite());
        let a = AttentionFixture::new(10, 3, 0);
        assert_eq!(a.q.len(), 30);
        let c = ConvFixture::new(100, 4, 2);
        assert_eq!(c.input.len(), 100);
        assert_eq!(c.kernel.c_in(), 4);
        let m = ModelFixture::new(200, 0);
        assert_eq!(m.scene.len(), 200);
    }

    #[test]
    fn fixtures_are_seeded() {
        assert_eq!(ScanFixture::new(16, 4, 4, 3).u.data(), ScanFixture::new(16, 4, 4, 3).u.data());
        assert_ne!(ScanFixture::new(16, 4, 4, 3).u.data(), ScanFixture::new(16, 4, 4, 4).u.data());
        assert_eq!(scene_cloud(5, 500).positions, scene_cloud(5, 500).positions);
    }
}
