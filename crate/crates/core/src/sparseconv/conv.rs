use std::sync::Arc;

use super::hash::KeyIndex;
use crate::error::{Error, Result};
use crate::numerics::{matmul_a_bt_into, matmul_at_b_into, matmul_into, CustomOp, Real, Tape, Tensor, Var};
use crate::pointcloud::{morton_encode, SerializedVoxels};

/// Active voxel sites with features and a key → row index.
#[derive(Clone, Debug)]
pub struct SparseTensor<T> {
    pub coords: Vec<[u32; 3]>,
    pub keys: Vec<u64>,
    pub features: Tensor<T>,
    index: KeyIndex,
}

impl<T: Real> SparseTensor<T> {
    pub fn new(coords: Vec<[u32; 3]>, keys: Vec<u64>, features: Tensor<T>) -> Result<Self> {
        if coords.len() != keys.len() || features.rows() != keys.len() {
            return Err(Error::dim("sparse tensor", &[coords.len(), keys.len()], features.shape()));
        }
        let index = KeyIndex::from_keys(&keys);
        if index.len() != keys.len() {
            return Err(Error::Data("duplicate voxel keys".into()));
        }
        Ok(SparseTensor {
            coords,
            keys,
            features,
            index,
        })
    }

    pub fn from_coords(coords: Vec<[u32; 3]>, features: Tensor<T>) -> Result<Self> {
        let keys = coords
            .iter()
            .map(|c| morton_encode(c[0], c[1], c[2]))
            .collect::<Result<Vec<_>>>()?;
        Self::new(coords, keys, features)
    }

    pub fn from_voxels(v: &SerializedVoxels) -> Result<Self> {
        Self::new(v.coords.clone(), v.keys.clone(), v.features.cast())
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn row_of(&self, c: [i64; 3]) -> Option<usize> {
        lookup(&self.index, c)
    }

    pub fn with_features(&self, features: Tensor<T>) -> Result<Self> {
        if features.rows() != self.len() {
            return Err(Error::dim("sparse tensor", &[self.len()], features.shape()));
        }
        Ok(SparseTensor {
            coords: self.coords.clone(),
            keys: self.keys.clone(),
            features,
            index: self.index.clone(),
        })
    }
}

fn lookup(index: &KeyIndex, c: [i64; 3]) -> Option<usize> {
    if c.iter().any(|&v| !(0..=crate::pointcloud::MORTON_MAX as i64).contains(&v)) {
        return None;
    }
    index.get(morton_encode(c[0] as u32, c[1] as u32, c[2] as u32).ok()?)
}

/// Weights `k³·Cin × Cout` (offset-major) plus bias.
#[derive(Clone, Debug)]
pub struct ConvKernel3D<T> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
    pub k: usize,
}

impl<T: Real> ConvKernel3D<T> {
    pub fn new(weights: Tensor<T>, bias: Tensor<T>, k: usize) -> Result<Self> {
        if k.is_multiple_of(2) {
            return Err(Error::Parameter(format!("kernel size must be odd, got {k}")));
        }
        let vol = k * k * k;
        if !weights.rows().is_multiple_of(vol) || bias.len() != weights.cols() {
            return Err(Error::dim("conv kernel", weights.shape(), bias.shape()));
        }
        Ok(ConvKernel3D { weights, bias, k })
    }

    pub fn c_in(&self) -> usize {
        self.weights.rows() / (self.k * self.k * self.k)
    }

    pub fn c_out(&self) -> usize {
        self.weights.cols()
    }
}

/// Neighbour pairs of a submanifold convolution, bucketed by offset.
#[derive(Clone, Debug)]
pub struct KernelMap {
    pub k: usize,
    pub sites: usize,
    /// `buckets[o]` lists `(input_row, output_row)` pairs for offset `o`.
    pub buckets: Vec<Vec<(u32, u32)>>,
}

impl KernelMap {
    pub fn volume(&self) -> usize {
        self.k * self.k * self.k
    }

    /// `(offset_index, input_row, output_row)` in offset order.
    pub fn triples(&self) -> Vec<(usize, usize, usize)> {
        self.buckets
            .iter()
            .enumerate()
            .flat_map(|(o, b)| b.iter().map(move |&(i, j)| (o, i as usize, j as usize)))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.buckets.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Multiplications performed by one forward pass at the given widths.
    pub fn mac_count(&self, c_in: usize, c_out: usize) -> u128 {
        self.len() as u128 * c_in as u128 * c_out as u128
    }

    /// Mean fraction of the `k³` neighbourhood that is active.
    pub fn occupancy(&self) -> f64 {
        self.len() as f64 / (self.volume() * self.sites.max(1)) as f64
    }
}

/// Offset `(dx, dy, dz)` of an offset index; indices run over z, then y, then x.
pub fn offset_of(index: usize, k: usize) -> [i64; 3] {
    let r = (k / 2) as i64;
    let dx = (index % k) as i64 - r;
    let dy = ((index / k) % k) as i64 - r;
    let dz = (index / (k * k)) as i64 - r;
    [dx, dy, dz]
}

/// For every active `p` and offset `o`, records `(o, row(p+o), row(p))` when
/// `p+o` is active.
pub fn build_kernel_map(coords: &[[u32; 3]], keys: &[u64], k: usize) -> Result<KernelMap> {
    if k.is_multiple_of(2) {
        return Err(Error::Parameter(format!("kernel size must be odd, got {k}")));
    }
    let index = KeyIndex::from_keys(keys);
    let vol = k * k * k;
    let mut buckets = vec![Vec::new(); vol];
    for (o, bucket) in buckets.iter_mut().enumerate() {
        let d = offset_of(o, k);
        if d == [0, 0, 0] {
            bucket.extend((0..coords.len() as u32).map(|i| (i, i)));
            continue;
        }
        for (row, c) in coords.iter().enumerate() {
            let q = [c[0] as i64 + d[0], c[1] as i64 + d[1], c[2] as i64 + d[2]];
            if let Some(src) = lookup(&index, q) {
                bucket.push((src as u32, row as u32));
            }
        }
    }
    Ok(KernelMap {
        k,
        sites: coords.len(),
        buckets,
    })
}

/// `out[q] = bias + Σ_o W[o]ᵀ · in[q−o]` over active `q−o`, via one
/// gather-GEMM-scatter per offset bucket. The bucket of offset `o` pairs
/// `p+o → p`, which is the weight slot of `−o`, index `k³−1−o`.
pub(crate) fn conv_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, map: &KernelMap) -> Result<Tensor<T>> {
    let (m, cin, cout) = (x.rows(), x.cols(), w.cols());
    if m != map.sites || w.rows() != map.volume() * cin {
        return Err(Error::dim("submanifold_conv", x.shape(), w.shape()));
    }
    let mut out = vec![T::zero(); m * cout];
    if let Some(b) = b {
        if b.len() != cout {
            return Err(Error::dim("submanifold_conv bias", w.shape(), b.shape()));
        }
        for row in out.chunks_mut(cout) {
            row.copy_from_slice(b.data());
        }
    }
    let mut gathered = Vec::new();
    let mut product = Vec::new();
    for (o, bucket) in map.buckets.iter().enumerate() {
        if bucket.is_empty() {
            continue;
        }
        let n = bucket.len();
        gathered.clear();
        for &(i, _) in bucket {
            gathered.extend_from_slice(x.row(i as usize));
        }
        product.clear();
        product.resize(n * cout, T::zero());
        let slot = map.volume() - 1 - o;
        let wo = &w.data()[slot * cin * cout..(slot + 1) * cin * cout];
        matmul_into(&gathered, wo, &mut product, n, cin, cout);
        for (r, &(_, j)) in bucket.iter().enumerate() {
            let dst = &mut out[j as usize * cout..(j as usize + 1) * cout];
            for (d, &p) in dst.iter_mut().zip(&product[r * cout..(r + 1) * cout]) {
                *d += p;
            }
        }
    }
    Tensor::matrix(m, cout, out)
}

pub fn submanifold_conv<T: Real>(st: &SparseTensor<T>, kern: &ConvKernel3D<T>) -> Result<SparseTensor<T>> {
    if st.features.cols() != kern.c_in() {
        return Err(Error::dim("submanifold_conv", st.features.shape(), kern.weights.shape()));
    }
    let map = build_kernel_map(&st.coords, &st.keys, kern.k)?;
    let out = conv_forward(&st.features, &kern.weights, Some(&kern.bias), &map)?;
    st.with_features(out)
}

struct SubmConvOp {
    map: Arc<KernelMap>,
    has_bias: bool,
}

impl<T: Real> CustomOp<T> for SubmConvOp {
    fn name(&self) -> &'static str {
        "submanifold_conv"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (cin, cout) = (x.cols(), w.cols());
        let mut gx = vec![T::zero(); x.len()];
        let mut gw = vec![T::zero(); w.len()];
        let mut gathered_x = Vec::new();
        let mut gathered_g = Vec::new();
        let mut gxb = Vec::new();
        for (o, bucket) in self.map.buckets.iter().enumerate() {
            if bucket.is_empty() {
                continue;
            }
            let n = bucket.len();
            gathered_x.clear();
            gathered_g.clear();
            for &(i, j) in bucket {
                gathered_x.extend_from_slice(x.row(i as usize));
                gathered_g.extend_from_slice(grad.row(j as usize));
            }
            let slot = self.map.volume() - 1 - o;
            let range = slot * cin * cout..(slot + 1) * cin * cout;
            matmul_at_b_into(&gathered_x, &gathered_g, &mut gw[range.clone()], n, cin, cout);
            gxb.clear();
            gxb.resize(n * cin, T::zero());
            matmul_a_bt_into(&gathered_g, &w.data()[range], &mut gxb, n, cin, cout);
            for (r, &(i, _)) in bucket.iter().enumerate() {
                let dst = &mut gx[i as usize * cin..(i as usize + 1) * cin];
                for (d, &v) in dst.iter_mut().zip(&gxb[r * cin..(r + 1) * cin]) {
                    *d += v;
                }
            }
        }
        let mut out = vec![
            Some(Tensor::new(x.shape().to_vec(), gx).expect("shape")),
            Some(Tensor::new(w.shape().to_vec(), gw).expect("shape")),
        ];
        if self.has_bias {
            let mut gb = vec![T::zero(); cout];
            for row in grad.data().chunks(cout) {
                for (a, &v) in gb.iter_mut().zip(row) {
                    *a += v;
                }
            }
            out.push(Some(Tensor::new(inputs[2].shape().to_vec(), gb).expect("shape")));
        }
        out
    }
}

impl<T: Real> Tape<T> {
    /// Differentiable submanifold convolution over a precomputed kernel map.
    pub fn submanifold_conv(&mut self, x: Var, w: Var, b: Option<Var>, map: &Arc<KernelMap>) -> Result<Var> {
        let value = conv_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), map)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.custom(
            &inputs,
            value,
            Box::new(SubmConvOp {
                map: map.clone(),
                has_bias: b.is_some(),
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sparse(coords: Vec<[u32; 3]>, feats: Vec<f64>, c: usize) -> SparseTensor<f64> {
        let m = coords.len();
        SparseTensor::from_coords(coords, Tensor::matrix(m, c, feats).unwrap()).unwrap()
    }

    fn random_instance(rng: &mut ChaCha8Rng, side: u32, cin: usize) -> SparseTensor<f64> {
        let mut coords = Vec::new();
        for z in 0..side {
            for y in 0..side {
                for x in 0..side {
                    if rng.random_bool(0.3) {
                        coords.push([x, y, z]);
                    }
                }
            }
        }
        if coords.is_empty() {
            coords.push([0, 0, 0]);
        }
        let feats = (0..coords.len() * cin).map(|_| rng.random_range(-1.0..1.0)).collect();
        sparse(coords, feats, cin)
    }

    fn random_kernel(rng: &mut ChaCha8Rng, cin: usize, cout: usize) -> ConvKernel3D<f64> {
        let w = (0..27 * cin * cout).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = (0..cout).map(|_| rng.random_range(-1.0..1.0)).collect();
        ConvKernel3D::new(Tensor::matrix(27 * cin, cout, w).unwrap(), Tensor::vector(b).unwrap(), 3).unwrap()
    }

    /// Dense convolution on the full grid, read back at active sites.
    fn dense_oracle(st: &SparseTensor<f64>, kern: &ConvKernel3D<f64>, side: usize) -> Vec<f64> {
        let (cin, cout) = (kern.c_in(), kern.c_out());
        let cell = |x: usize, y: usize, z: usize| ((z * side + y) * side + x) * cin;
        let mut grid = vec![0.0; side * side * side * cin];
        for (r, c) in st.coords.iter().enumerate() {
            let base = cell(c[0] as usize, c[1] as usize, c[2] as usize);
            grid[base..base + cin].copy_from_slice(st.features.row(r));
        }
        let mut out = Vec::new();
        for q in &st.coords {
            let mut acc = kern.bias.data().to_vec();
            for dz in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let s = [q[0] as i64 - dx, q[1] as i64 - dy, q[2] as i64 - dz];
                        if s.iter().any(|&v| v < 0 || v >= side as i64) {
                            continue;
                        }
                        let base = cell(s[0] as usize, s[1] as usize, s[2] as usize);
                        let o = (((dz + 1) * 3 + dy + 1) * 3 + dx + 1) as usize;
                        for i in 0..cin {
                            for j in 0..cout {
                                acc[j] += kern.weights.at(o * cin + i, j) * grid[base + i];
                            }
                        }
                    }
                }
            }
            out.extend(acc);
        }
        out
    }

    #[test]
    fn kernel_map_examples() {
        let one = sparse(vec![[4, 4, 4]], vec![1.0], 1);
        let map = build_kernel_map(&one.coords, &one.keys, 3).unwrap();
        assert_eq!(map.triples(), vec![(13, 0, 0)]);

        let two = sparse(vec![[0, 0, 0], [1, 0, 0]], vec![1.0, 2.0], 1);
        let map = build_kernel_map(&two.coords, &two.keys, 3).unwrap();
        let mut brute = 0;
        for p in &two.coords {
            for o in 0..27 {
                let d = offset_of(o, 3);
                let q = [p[0] as i64 + d[0], p[1] as i64 + d[1], p[2] as i64 + d[2]];
                brute += two.row_of(q).is_some() as usize;
            }
        }
        assert_eq!(map.len(), 4);
        assert_eq!(brute, 4);

        let st = random_instance(&mut ChaCha8Rng::seed_from_u64(1), 4, 1);
        let map = build_kernel_map(&st.coords, &st.keys, 1).unwrap();
        assert_eq!(map.len(), st.len());
        assert!(map.triples().iter().all(|&(o, i, j)| o == 0 && i == j));
        assert!(build_kernel_map(&st.coords, &st.keys, 2).is_err());
    }

    #[test]
    fn offsets_are_lexicographic_z_y_x() {
        assert_eq!(offset_of(0, 3), [-1, -1, -1]);
        assert_eq!(offset_of(1, 3), [0, -1, -1]);
        assert_eq!(offset_of(3, 3), [-1, 0, -1]);
        assert_eq!(offset_of(9, 3), [-1, -1, 0]);
        assert_eq!(offset_of(13, 3), [0, 0, 0]);
    }

    #[test]
    fn conv_examples() {
        let st = random_instance(&mut ChaCha8Rng::seed_from_u64(2), 4, 3);
        let eye = Tensor::from_rows(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]).unwrap();
        let k1 = ConvKernel3D::new(eye, Tensor::zeros(&[3]), 1).unwrap();
        let out = submanifold_conv(&st, &k1).unwrap();
        assert_eq!(out.features.data(), st.features.data());

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let single = sparse(vec![[2, 2, 2]], vec![0.5, -1.0], 2);
        let kern = random_kernel(&mut rng, 2, 3);
        let out = submanifold_conv(&single, &kern).unwrap();
        for j in 0..3 {
            let want = kern.bias.data()[j] + 0.5 * kern.weights.at(26, j) - kern.weights.at(27, j);
            assert!((out.features.at(0, j) - want).abs() < 1e-12);
        }

        let two = sparse(vec![[0, 0, 0], [1, 0, 0]], vec![1.0, 2.0], 1);
        let ones = ConvKernel3D::new(Tensor::full(&[27, 1], 1.0), Tensor::zeros(&[1]), 3).unwrap();
        assert_eq!(submanifold_conv(&two, &ones).unwrap().features.data(), &[3.0, 3.0]);
        let bad = ConvKernel3D::new(Tensor::full(&[54, 1], 1.0), Tensor::zeros(&[1]), 3).unwrap();
        assert!(matches!(submanifold_conv(&two, &bad), Err(Error::Dimension { .. })));
    }

    #[test]
    fn direction_of_offsets_matches_dense_convolution() {
        // only the (+1,0,0) slot is nonzero: out[q] = in[q - (1,0,0)]
        let two = sparse(vec![[0, 0, 0], [1, 0, 0]], vec![1.0, 2.0], 1);
        let mut w = vec![0.0; 27];
        w[14] = 1.0;
        let kern = ConvKernel3D::new(Tensor::matrix(27, 1, w).unwrap(), Tensor::zeros(&[1]), 3).unwrap();
        assert_eq!(submanifold_conv(&two, &kern).unwrap().features.data(), &[0.0, 1.0]);
    }

    #[test]
    fn matches_masked_dense_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let st = random_instance(&mut rng, 6, 2);
            let kern = random_kernel(&mut rng, 2, 3);
            let out = submanifold_conv(&st, &kern).unwrap();
            assert_eq!(out.coords, st.coords);
            let oracle = dense_oracle(&st, &kern, 6);
            let err = out.features.data().iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-9, "max error {err}");
        }
    }

    #[test]
    fn mac_count_tracks_occupancy() {
        let st = random_instance(&mut ChaCha8Rng::seed_from_u64(5), 5, 4);
        let map = build_kernel_map(&st.coords, &st.keys, 3).unwrap();
        let bound = 27 * st.len() as u128 * 4 * 8;
        let expected = (bound as f64 * map.occupancy()).round() as u128;
        assert_eq!(map.mac_count(4, 8), expected);
        assert!(map.mac_count(4, 8) <= bound);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let coords = vec![[1, 1, 1], [2, 1, 1], [1, 2, 1], [2, 2, 2], [0, 1, 1]];
        let x = Tensor::matrix(5, 2, (0..10).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let kern = random_kernel(&mut rng, 2, 3);
        let keys: Vec<u64> = coords.iter().map(|c| morton_encode(c[0], c[1], c[2]).unwrap()).collect();
        let map = Arc::new(build_kernel_map(&coords, &keys, 3).unwrap());
        let probe = Tensor::matrix(5, 3, (0..15).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();

        let wrt_x = |tape: &mut Tape<f64>, x: Var| {
            let w = tape.constant(kern.weights.clone());
            let b = tape.constant(kern.bias.clone());
            let y = tape.submanifold_conv(x, w, Some(b), &map)?;
            let p = tape.constant(probe.clone());
            let yp = tape.mul(y, p)?;
            Ok(tape.sum_all(yp))
        };
        assert!(grad_check(wrt_x, &x, 1e-4).unwrap() < 1e-4);

        let wrt_w = |tape: &mut Tape<f64>, w: Var| {
            let xv = tape.constant(x.clone());
            let y = tape.submanifold_conv(xv, w, None, &map)?;
            let p = tape.constant(probe.clone());
            let yp = tape.mul(y, p)?;
            Ok(tape.sum_all(yp))
        };
        assert!(grad_check(wrt_w, &kern.weights, 1e-4).unwrap() < 1e-4);

        let wrt_b = |tape: &mut Tape<f64>, b: Var| {
            let xv = tape.constant(x.clone());
            let w = tape.constant(kern.weights.clone());
            let y = tape.submanifold_conv(xv, w, Some(b), &map)?;
            let p = tape.constant(probe.clone());
            let yp = tape.mul(y, p)?;
            Ok(tape.sum_all(yp))
        };
        assert!(grad_check(wrt_b, &kern.bias, 1e-4).unwrap() < 1e-4);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn translation_equivariant(seed in 0u64..1000, shift in prop::array::uniform3(0u32..50)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let st = random_instance(&mut rng, 4, 2);
            let kern = random_kernel(&mut rng, 2, 2);
            let moved_coords: Vec<[u32; 3]> =
                st.coords.iter().map(|c| [c[0] + shift[0], c[1] + shift[1], c[2] + shift[2]]).collect();
            let moved = SparseTensor::from_coords(moved_coords.clone(), st.features.clone()).unwrap();
            let a = submanifold_conv(&st, &kern).unwrap();
            let b = submanifold_conv(&moved, &kern).unwrap();
            for (r, c) in moved_coords.iter().enumerate() {
                let row = b.row_of([c[0] as i64, c[1] as i64, c[2] as i64]).unwrap();
                for j in 0..2 {
                    prop_assert!((a.features.at(r, j) - b.features.at(row, j)).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn active_set_preserved(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let st = random_instance(&mut rng, 5, 1);
            let kern = random_kernel(&mut rng, 1, 2);
            let out = submanifold_conv(&st, &kern).unwrap();
            prop_assert_eq!(&out.coords, &st.coords);
            prop_assert_eq!(&out.keys, &st.keys);
            prop_assert!(st.row_of([-1, 0, 0]).is_none());
        }
    }
}
