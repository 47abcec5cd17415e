use std::sync::Arc;

use rand::Rng;

use super::config::{BlockType, ModelConfig};
use crate::error::Result;
use crate::numerics::{ParamStore, Real, Tape, Tensor, Var};
use crate::sparseconv::KernelMap;
use crate::ssm::{init_mamba_params, MambaConfig};

pub(crate) fn uniform<T: Real>(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Tensor<T> {
    let data = (0..rows * cols).map(|_| T::of(rng.random_range(-bound..bound))).collect();
    Tensor::matrix(rows, cols, data).expect("shape")
}

/// Linear layer `{prefix}.w` (`cin×cout`) with bias `{prefix}.b`.
pub fn init_linear<T: Real>(store: &mut ParamStore<T>, prefix: &str, cin: usize, cout: usize, zero: bool, rng: &mut impl Rng) {
    let w = if zero {
        Tensor::zeros(&[cin, cout])
    } else {
        uniform(rng, cin, cout, 1.0 / (cin as f64).sqrt())
    };
    store.insert(format!("{prefix}.w"), w);
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[cout]));
}

pub fn init_norm<T: Real>(store: &mut ParamStore<T>, prefix: &str, c: usize) {
    store.insert(format!("{prefix}.g"), Tensor::full(&[c], T::one()));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[c]));
}

/// Sparse conv `{prefix}.w` (`k³·cin × cout`) and bias.
pub fn init_conv<T: Real>(store: &mut ParamStore<T>, prefix: &str, cin: usize, cout: usize, k: usize, zero: bool, rng: &mut impl Rng) {
    let vol = k * k * k;
    let w = if zero {
        Tensor::zeros(&[vol * cin, cout])
    } else {
        uniform(rng, vol * cin, cout, 1.0 / ((vol * cin) as f64).sqrt())
    };
    store.insert(format!("{prefix}.w"), w);
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[cout]));
}

impl<T: Real> Tape<T> {
    pub fn linear_layer(&mut self, x: Var, store: &ParamStore<T>, prefix: &str) -> Result<Var> {
        let w = self.param(store, &format!("{prefix}.w"))?;
        let b = self.param(store, &format!("{prefix}.b"))?;
        self.linear(x, w, Some(b))
    }

    pub fn norm_layer(&mut self, x: Var, store: &ParamStore<T>, prefix: &str) -> Result<Var> {
        let g = self.param(store, &format!("{prefix}.g"))?;
        let b = self.param(store, &format!("{prefix}.b"))?;
        self.layer_norm(x, g, b)
    }

    pub fn conv_layer(&mut self, x: Var, store: &ParamStore<T>, prefix: &str, map: &Arc<KernelMap>) -> Result<Var> {
        let w = self.param(store, &format!("{prefix}.w"))?;
        let b = self.param(store, &format!("{prefix}.b"))?;
        self.submanifold_conv(x, w, Some(b), map)
    }

    /// `C → rC → C` with SiLU.
    pub fn mlp(&mut self, x: Var, store: &ParamStore<T>, prefix: &str) -> Result<Var> {
        let h = self.linear_layer(x, store, &format!("{prefix}.fc1"))?;
        let h = self.silu(h);
        self.linear_layer(h, store, &format!("{prefix}.fc2"))
    }

    /// Full multi-head softmax attention over all rows (no biases, no
    /// positional terms).
    pub fn attention(&mut self, x: Var, store: &ParamStore<T>, prefix: &str, heads: usize) -> Result<Var> {
        let c = self.value(x).cols();
        let dh = c / heads;
        let wqkv = self.param(store, &format!("{prefix}.qkv"))?;
        let qkv = self.matmul(x, wqkv)?;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let q = self.slice_cols(qkv, h * dh, (h + 1) * dh)?;
            let k = self.slice_cols(qkv, c + h * dh, c + (h + 1) * dh)?;
            let v = self.slice_cols(qkv, 2 * c + h * dh, 2 * c + (h + 1) * dh)?;
            let kt = self.transpose(k);
            let scores = self.matmul(q, kt)?;
            let scores = self.scale(scores, scale);
            let weights = self.softmax_rows(scores);
            outs.push(self.matmul(weights, v)?);
        }
        let merged = if heads == 1 { outs[0] } else { self.concat_cols(&outs)? };
        let wo = self.param(store, &format!("{prefix}.out"))?;
        self.matmul(merged, wo)
    }
}

/// Stochastic depth on a plain tensor: in training, zero with probability
/// `rate`, otherwise scale by `1/(1−rate)`; identity in evaluation.
pub fn drop_path<T: Real>(x: &Tensor<T>, rate: f64, train: bool, rng: &mut impl Rng) -> Tensor<T> {
    match drop_decision(rate, train, rng) {
        None => x.clone(),
        Some(0.0) => Tensor::zeros(x.shape()),
        Some(s) => x.map(|v| v * T::of(s)),
    }
}

/// `None` keeps the branch unchanged; `Some(s)` scales it by `s`.
fn drop_decision(rate: f64, train: bool, rng: &mut impl Rng) -> Option<f64> {
    if !train || rate <= 0.0 {
        return None;
    }
    if rng.random::<f64>() < rate {
        Some(0.0)
    } else {
        Some(1.0 / (1.0 - rate))
    }
}

/// What one block needs besides its parameters.
pub struct BlockContext<'a, R> {
    pub map: &'a Arc<KernelMap>,
    pub mamba: &'a MambaConfig,
    pub heads: usize,
    pub drop_rate: f64,
    pub train: bool,
    pub rng: &'a mut R,
}

/// `x + droppath(branch(norm(x)))`.
fn residual<T: Real, R: Rng>(
    tape: &mut Tape<T>,
    x: Var,
    store: &ParamStore<T>,
    norm: &str,
    ctx: &mut BlockContext<'_, R>,
    branch: impl FnOnce(&mut Tape<T>, Var, &BlockContext<'_, R>) -> Result<Var>,
) -> Result<Var> {
    match drop_decision(ctx.drop_rate, ctx.train, ctx.rng) {
        Some(0.0) => Ok(x),
        scale => {
            let h = tape.norm_layer(x, store, norm)?;
            let y = branch(tape, h, ctx)?;
            let y = match scale {
                Some(s) => tape.scale(y, T::of(s)),
                None => y,
            };
            tape.add(x, y)
        }
    }
}

/// Pre-norm residual block: optional sparse conv, optional sequence mixer
/// (state-space module or attention), then an MLP.
pub fn block_forward<T: Real, R: Rng>(
    tape: &mut Tape<T>,
    x: Var,
    store: &ParamStore<T>,
    prefix: &str,
    kind: BlockType,
    ctx: &mut BlockContext<'_, R>,
) -> Result<Var> {
    let mut x = x;
    if kind.has_conv() {
        x = residual(tape, x, store, &format!("{prefix}.conv_norm"), ctx, |t, h, c| {
            t.conv_layer(h, store, &format!("{prefix}.conv"), c.map)
        })?;
    }
    if kind.has_mamba() {
        x = residual(tape, x, store, &format!("{prefix}.mix_norm"), ctx, |t, h, c| {
            t.mamba_module(h, store, &format!("{prefix}.mamba"), c.mamba)
        })?;
    }
    if kind.has_attention() {
        x = residual(tape, x, store, &format!("{prefix}.mix_norm"), ctx, |t, h, c| {
            t.attention(h, store, &format!("{prefix}.attn"), c.heads)
        })?;
    }
    residual(tape, x, store, &format!("{prefix}.mlp_norm"), ctx, |t, h, _| {
        t.mlp(h, store, &format!("{prefix}.mlp"))
    })
}

/// Parameters of one block of width `c`.
pub fn init_block<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    kind: BlockType,
    c: usize,
    cfg: &ModelConfig,
    rng: &mut impl Rng,
) -> Result<()> {
    let zero = cfg.zero_init_residual;
    if kind.has_conv() {
        init_norm(store, &format!("{prefix}.conv_norm"), c);
        init_conv(store, &format!("{prefix}.conv"), c, c, cfg.kernel_size(), zero, rng);
    }
    if kind.has_mamba() {
        init_norm(store, &format!("{prefix}.mix_norm"), c);
        init_mamba_params(store, &format!("{prefix}.mamba"), &cfg.mamba_config(c)?, zero, rng);
    }
    if kind.has_attention() {
        init_norm(store, &format!("{prefix}.mix_norm"), c);
        store.insert(format!("{prefix}.attn.qkv"), uniform(rng, c, 3 * c, 1.0 / (c as f64).sqrt()));
        let out = if zero {
            Tensor::zeros(&[c, c])
        } else {
            uniform(rng, c, c, 1.0 / (c as f64).sqrt())
        };
        store.insert(format!("{prefix}.attn.out"), out);
    }
    init_norm(store, &format!("{prefix}.mlp_norm"), c);
    let hidden = cfg.mlp_ratio * c;
    init_linear(store, &format!("{prefix}.mlp.fc1"), c, hidden, false, rng);
    init_linear(store, &format!("{prefix}.mlp.fc2"), hidden, c, zero, rng);
    Ok(())
}

/// Analytic parameter count of one block of width `c`.
pub fn block_param_count(kind: BlockType, c: usize, cfg: &ModelConfig) -> Result<usize> {
    let mut n = 2 * c + cfg.mlp_ratio * c * c * 2 + cfg.mlp_ratio * c + c;
    if kind.has_conv() {
        let vol = cfg.kernel_size().pow(3);
        n += 2 * c + vol * c * c + c;
    }
    if kind.has_mamba() {
        n += 2 * c + cfg.mamba_config(c)?.num_params();
    }
    if kind.has_attention() {
        n += 2 * c + 4 * c * c;
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, grad_check_params};
    use crate::pointcloud::morton_encode;
    use crate::sparseconv::build_kernel_map;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg(zero: bool) -> ModelConfig {
        let mut cfg = ModelConfig::desk();
        cfg.zero_init_residual = zero;
        cfg.ssm.state_dim = 3;
        cfg.head_dim = 2;
        cfg.mlp_ratio = 2;
        cfg
    }

    fn line_map(l: usize) -> Arc<KernelMap> {
        let coords: Vec<[u32; 3]> = (0..l as u32).map(|i| [i % 3, i / 3, 0]).collect();
        let keys: Vec<u64> = coords.iter().map(|c| morton_encode(c[0], c[1], c[2]).unwrap()).collect();
        Arc::new(build_kernel_map(&coords, &keys, 3).unwrap())
    }

    fn run_block(kind: BlockType, store: &ParamStore<f64>, cfg: &ModelConfig, x: &Tensor<f64>, train: bool, rate: f64) -> Tensor<f64> {
        let mamba = cfg.mamba_config(4).unwrap();
        let map = line_map(x.rows());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ctx = BlockContext {
            map: &map,
            mamba: &mamba,
            heads: 2,
            drop_rate: rate,
            train,
            rng: &mut rng,
        };
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = block_forward(&mut tape, xv, store, "b", kind, &mut ctx).unwrap();
        tape.value(y).clone()
    }

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
        uniform(rng, rows, cols, 1.0)
    }

    #[test]
    fn zero_initialized_blocks_are_identity() {
        let cfg = small_cfg(true);
        let x = random(&mut ChaCha8Rng::seed_from_u64(0), 6, 4);
        for kind in BlockType::ALL {
            let mut store = ParamStore::new();
            init_block(&mut store, "b", kind, 4, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            assert_eq!(run_block(kind, &store, &cfg, &x, false, 0.0).data(), x.data(), "{kind}");
        }
    }

    #[test]
    fn parameter_counts_match_store() {
        let cfg = small_cfg(false);
        for kind in BlockType::ALL {
            let mut store = ParamStore::<f32>::new();
            init_block(&mut store, "b", kind, 8, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            assert_eq!(store.numel(), block_param_count(kind, 8, &cfg).unwrap(), "{kind}");
        }
    }

    #[test]
    fn evaluation_ignores_drop_rate() {
        let cfg = small_cfg(false);
        let mut store = ParamStore::new();
        init_block(&mut store, "b", BlockType::CnnMamba, 4, &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let x = random(&mut ChaCha8Rng::seed_from_u64(3), 5, 4);
        let a = run_block(BlockType::CnnMamba, &store, &cfg, &x, false, 0.9);
        let b = run_block(BlockType::CnnMamba, &store, &cfg, &x, false, 0.0);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn single_voxel_block_is_finite_and_differentiable() {
        let cfg = small_cfg(false);
        let mut store = ParamStore::new();
        init_block(&mut store, "b", BlockType::CnnMamba, 4, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let x = random(&mut ChaCha8Rng::seed_from_u64(5), 1, 4);
        assert!(run_block(BlockType::CnnMamba, &store, &cfg, &x, false, 0.0).all_finite());
        let mamba = cfg.mamba_config(4).unwrap();
        let map = line_map(1);
        let f = |tape: &mut Tape<f64>, x: Var| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut ctx = BlockContext { map: &map, mamba: &mamba, heads: 2, drop_rate: 0.0, train: false, rng: &mut rng };
            let y = block_forward(tape, x, &store, "b", BlockType::CnnMamba, &mut ctx)?;
            let y2 = tape.mul(y, y)?;
            Ok(tape.sum_all(y2))
        };
        assert!(grad_check(f, &x, 1e-4).unwrap() < 1e-4);
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let cfg = small_cfg(false);
        let mamba = cfg.mamba_config(4).unwrap();
        let map = line_map(6);
        let x = random(&mut ChaCha8Rng::seed_from_u64(6), 6, 4);
        let probe = random(&mut ChaCha8Rng::seed_from_u64(7), 6, 4);
        for kind in BlockType::ALL {
            let mut store = ParamStore::new();
            init_block(&mut store, "b", kind, 4, &cfg, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
            let f = |tape: &mut Tape<f64>, store: &ParamStore<f64>, x: Var| {
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let mut ctx = BlockContext { map: &map, mamba: &mamba, heads: 2, drop_rate: 0.0, train: false, rng: &mut rng };
                let y = block_forward(tape, x, store, "b", kind, &mut ctx)?;
                let p = tape.constant(probe.clone());
                let yp = tape.mul(y, p)?;
                Ok(tape.sum_all(yp))
            };
            let err = grad_check(|t, xv| f(t, &store, xv), &x, 1e-4).unwrap();
            assert!(err < 1e-4, "{kind} input: {err}");
            let names: Vec<String> = store.names().cloned().collect();
            let names: Vec<&str> = names.iter().map(String::as_str).collect();
            let err = grad_check_params(
                |t, s| {
                    let xv = t.constant(x.clone());
                    f(t, s, xv)
                },
                &store,
                &names,
                1e-4,
                6,
            )
            .unwrap();
            assert!(err < 1e-4, "{kind} params: {err}");
        }
    }

    #[test]
    fn attention_special_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        store.insert("a.qkv", random(&mut rng, 4, 12));
        store.insert("a.out", random(&mut rng, 4, 4));
        // one token: softmax weight 1, output = x·Wv·Wo
        let x = random(&mut rng, 1, 4);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = tape.attention(xv, &store, "a", 2).unwrap();
        let wv: Vec<f64> = (0..4).flat_map(|r| store.value("a.qkv").unwrap().row(r)[8..12].to_vec()).collect();
        let v = x.matmul(&Tensor::matrix(4, 4, wv).unwrap()).unwrap();
        let want = v.matmul(store.value("a.out").unwrap()).unwrap();
        assert!(tape.value(y).max_abs_diff(&want) < 1e-12);

        // zero query/key weights: uniform weights, rows equal the mean value row
        let qkv = store.value_mut("a.qkv").unwrap();
        for r in 0..4 {
            for c in 0..8 {
                qkv.data_mut()[r * 12 + c] = 0.0;
            }
        }
        let x = random(&mut rng, 5, 4);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = tape.attention(xv, &store, "a", 2).unwrap();
        let out = tape.value(y);
        for r in 1..5 {
            for c in 0..4 {
                assert!((out.at(r, c) - out.at(0, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn drop_path_statistics() {
        let x = Tensor::full(&[3], 1.0f64);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        assert_eq!(drop_path(&x, 0.0, true, &mut rng).data(), x.data());
        assert_eq!(drop_path(&x, 0.7, false, &mut rng).data(), x.data());
        let trials = 10_000;
        let mut kept = 0;
        for _ in 0..trials {
            let y = drop_path(&x, 0.3, true, &mut rng);
            if y.data()[0] != 0.0 {
                kept += 1;
                assert!((y.data()[0] - 1.0 / 0.7).abs() < 1e-12);
            }
        }
        let freq = kept as f64 / trials as f64;
        assert!((freq - 0.7).abs() < 0.02, "{freq}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn attention_is_permutation_equivariant(seed in 0u64..1000, l in 2usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            store.insert("a.qkv", random(&mut rng, 4, 12));
            store.insert("a.out", random(&mut rng, 4, 4));
            let x = random(&mut rng, l, 4);
            let mut perm: Vec<usize> = (0..l).collect();
            perm.rotate_left(1);
            perm.swap(0, l - 1);
            let px = Tensor::matrix(l, 4, perm.iter().flat_map(|&i| x.row(i).to_vec()).collect()).unwrap();
            let run = |x: &Tensor<f64>| {
                let mut tape = Tape::new();
                let xv = tape.constant(x.clone());
                let y = tape.attention(xv, &store, "a", 2).unwrap();
                tape.value(y).clone()
            };
            let (y, py) = (run(&x), run(&px));
            for (r, &i) in perm.iter().enumerate() {
                for c in 0..4 {
                    prop_assert!((py.at(r, c) - y.at(i, c)).abs() < 1e-12);
                }
            }
        }
    }
}
