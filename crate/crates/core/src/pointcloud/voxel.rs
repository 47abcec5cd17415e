use std::collections::HashMap;

use super::morton::{morton_encode, MORTON_MAX};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const UNLABELED: i64 = -1;

/// Raw points with per-point features and optional labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    /// `N×3`, row-major.
    pub positions: Vec<f32>,
    /// `N×C`, row-major.
    pub features: Vec<f32>,
    pub channels: usize,
    pub labels: Option<Vec<i32>>,
}

impl PointCloud {
    pub fn new(positions: Vec<f32>, features: Vec<f32>, channels: usize, labels: Option<Vec<i32>>) -> Result<Self> {
        let pc = PointCloud {
            positions,
            features,
            channels,
            labels,
        };
        pc.validate()?;
        Ok(pc)
    }

    pub fn len(&self) -> usize {
        self.positions.len() / 3
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn position(&self, i: usize) -> [f32; 3] {
        [self.positions[3 * i], self.positions[3 * i + 1], self.positions[3 * i + 2]]
    }

    pub fn feature(&self, i: usize) -> &[f32] {
        &self.features[i * self.channels..(i + 1) * self.channels]
    }

    pub fn validate(&self) -> Result<()> {
        if self.positions.is_empty() {
            return Err(Error::Data("point cloud is empty".into()));
        }
        if !self.positions.len().is_multiple_of(3) {
            return Err(Error::Data("positions are not N×3".into()));
        }
        let n = self.len();
        if self.features.len() != n * self.channels {
            return Err(Error::Data(format!(
                "features hold {} values, expected {n}×{}",
                self.features.len(),
                self.channels
            )));
        }
        if let Some(idx) = self.positions.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite position at point {}", idx / 3)));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != n {
                return Err(Error::Data(format!("{} labels for {n} points", labels.len())));
            }
            if let Some(i) = labels.iter().position(|&l| l < -1) {
                return Err(Error::Data(format!("invalid label {} at point {i}", labels[i])));
            }
        }
        Ok(())
    }
}

/// Voxels in Morton order: the carrier between every stage.
#[derive(Clone, Debug)]
pub struct SerializedVoxels {
    pub coords: Vec<[u32; 3]>,
    /// Strictly increasing Morton keys, one per voxel.
    pub keys: Vec<u64>,
    /// `M×C` mean features.
    pub features: Tensor<f64>,
    pub labels: Option<Vec<i64>>,
    /// Source row → voxel row.
    pub inverse_map: Vec<usize>,
    /// Number of source rows merged into each voxel.
    pub counts: Vec<usize>,
}

impl SerializedVoxels {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.features.cols()
    }
}

/// Majority vote over labelled members, ties to the smallest id; all-unlabelled → -1.
pub(crate) fn majority_label(votes: &HashMap<i64, usize>) -> i64 {
    votes
        .iter()
        .filter(|(&l, _)| l != UNLABELED)
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        .map_or(UNLABELED, |(&l, _)| l)
}

/// Groups rows by integer coordinate, averaging features and voting labels,
/// and emits the groups in Morton order.
pub(crate) fn serialize_groups(
    coords: &[[u32; 3]],
    features: &[f64],
    channels: usize,
    labels: Option<&[i64]>,
) -> Result<SerializedVoxels> {
    let n = coords.len();
    let mut slot: HashMap<u64, usize> = HashMap::with_capacity(n);
    let mut keys = Vec::new();
    let mut cells = Vec::new();
    let mut row_to_group = Vec::with_capacity(n);
    for c in coords {
        let key = morton_encode(c[0], c[1], c[2])?;
        let g = *slot.entry(key).or_insert_with(|| {
            keys.push(key);
            cells.push(*c);
            keys.len() - 1
        });
        row_to_group.push(g);
    }
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_unstable_by_key(|&g| keys[g]);
    let mut rank = vec![0usize; keys.len()];
    for (r, &g) in order.iter().enumerate() {
        rank[g] = r;
    }
    let m = keys.len();
    let mut sums = vec![0.0f64; m * channels];
    let mut counts = vec![0usize; m];
    let mut votes: Vec<HashMap<i64, usize>> = if labels.is_some() {
        vec![HashMap::new(); m]
    } else {
        Vec::new()
    };
    let inverse_map: Vec<usize> = row_to_group.iter().map(|&g| rank[g]).collect();
    for (i, &v) in inverse_map.iter().enumerate() {
        counts[v] += 1;
        for c in 0..channels {
            sums[v * channels + c] += features[i * channels + c];
        }
        if let Some(l) = labels {
            *votes[v].entry(l[i]).or_default() += 1;
        }
    }
    for (v, row) in sums.chunks_mut(channels.max(1)).enumerate().take(m) {
        let inv = 1.0 / counts[v] as f64;
        row.iter_mut().for_each(|x| *x *= inv);
    }
    let features = if channels == 0 {
        Tensor::zeros(&[m, 1])
    } else {
        Tensor::matrix(m, channels, sums)?
    };
    Ok(SerializedVoxels {
        coords: order.iter().map(|&g| cells[g]).collect(),
        keys: order.iter().map(|&g| keys[g]).collect(),
        features,
        labels: labels.map(|_| votes.iter().map(majority_label).collect()),
        inverse_map,
        counts,
    })
}

/// Grid-samples a cloud: `coords = floor((p - min_corner) / grid_size)`.
pub fn voxelize(pc: &PointCloud, grid_size: f64) -> Result<SerializedVoxels> {
    if !(grid_size > 0.0) || !grid_size.is_finite() {
        return Err(Error::Parameter(format!("grid size must be > 0, got {grid_size}")));
    }
    pc.validate()?;
    let n = pc.len();
    let mut min = [f64::INFINITY; 3];
    for i in 0..n {
        let p = pc.position(i);
        for a in 0..3 {
            min[a] = min[a].min(p[a] as f64);
        }
    }
    let mut coords = Vec::with_capacity(n);
    for i in 0..n {
        let p = pc.position(i);
        let mut c = [0u32; 3];
        for a in 0..3 {
            let cell = ((p[a] as f64 - min[a]) / grid_size).floor();
            if cell > MORTON_MAX as f64 {
                return Err(Error::Range(format!(
                    "point {i} falls in cell {cell} along axis {a}; grid too fine for a 21-bit key"
                )));
            }
            c[a] = cell as u32;
        }
        coords.push(c);
    }
    let features: Vec<f64> = pc.features.iter().map(|&v| v as f64).collect();
    let labels: Option<Vec<i64>> = pc.labels.as_ref().map(|l| l.iter().map(|&v| v as i64).collect());
    serialize_groups(&coords, &features, pc.channels, labels.as_deref())
}
