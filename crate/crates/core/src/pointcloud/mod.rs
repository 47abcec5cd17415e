//! Voxelization, Morton serialization, grid pooling and synthetic scenes.

mod io;
mod morton;
mod pool;
mod scene;
mod voxel;

pub(crate) use io::Reader;
pub use io::{decode_cloud, encode_cloud, read_cloud, write_cloud, CLOUD_MAGIC, CLOUD_VERSION};
pub use morton::{morton_decode, morton_encode, MORTON_BITS, MORTON_MAX};
pub use pool::{grid_pool, grid_unpool, PoolingMap};
pub use scene::{generate_scene, SceneSpec, BOX, CLASS_NAMES, FLOOR, NUM_CLASSES, SPHERE, TABLE, WALL};
pub use voxel::{voxelize, PointCloud, SerializedVoxels, UNLABELED};

/// Grid size used for indoor scenes, in meters.
pub const DEFAULT_GRID_SIZE: f64 = 0.02;
