use std::collections::HashMap;
use std::sync::Arc;

use super::voxel::{majority_label, serialize_groups, SerializedVoxels};
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// Fine → coarse assignment produced by [`grid_pool`].
#[derive(Clone, Debug)]
pub struct PoolingMap {
    /// Parent row (in the coarse serialization) of every fine voxel.
    pub parent: Arc<Vec<usize>>,
    pub coarse_len: usize,
    pub stride: u32,
}

impl PoolingMap {
    pub fn fine_len(&self) -> usize {
        self.parent.len()
    }
}

/// Downsamples by integer-dividing coordinates by `stride` and mean-pooling
/// features per parent. Labels are majority-voted over child voxels.
pub fn grid_pool(v: &SerializedVoxels, stride: u32) -> Result<(SerializedVoxels, PoolingMap)> {
    if stride < 2 {
        return Err(Error::Parameter(format!("pooling stride must be >= 2, got {stride}")));
    }
    let parents: Vec<[u32; 3]> = v.coords.iter().map(|c| [c[0] / stride, c[1] / stride, c[2] / stride]).collect();
    let mut coarse = serialize_groups(&parents, v.features.data(), v.channels(), None)?;
    if let Some(labels) = &v.labels {
        let mut votes: Vec<HashMap<i64, usize>> = vec![HashMap::new(); coarse.len()];
        for (i, &p) in coarse.inverse_map.iter().enumerate() {
            *votes[p].entry(labels[i]).or_default() += 1;
        }
        coarse.labels = Some(votes.iter().map(majority_label).collect());
    }
    let map = PoolingMap {
        parent: Arc::new(coarse.inverse_map.clone()),
        coarse_len: coarse.len(),
        stride,
    };
    Ok((coarse, map))
}

/// Broadcasts each parent row to its children and adds the skip features.
pub fn grid_unpool<T: Real>(coarse: &Tensor<T>, map: &PoolingMap, skip: &Tensor<T>) -> Result<Tensor<T>> {
    if coarse.rows() != map.coarse_len || skip.rows() != map.fine_len() {
        return Err(Error::dim(
            "grid_unpool",
            &[coarse.rows(), map.coarse_len],
            &[skip.rows(), map.fine_len()],
        ));
    }
    if coarse.cols() != skip.cols() {
        return Err(Error::dim("grid_unpool", coarse.shape(), skip.shape()));
    }
    let c = coarse.cols();
    let mut out = Vec::with_capacity(skip.len());
    for (i, &p) in map.parent.iter().enumerate() {
        out.extend(coarse.row(p).iter().zip(skip.row(i)).map(|(&a, &b)| a + b));
    }
    Tensor::matrix(map.fine_len(), c, out)
}
