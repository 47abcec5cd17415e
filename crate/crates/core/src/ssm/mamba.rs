use rand::Rng;

use super::directions::{merge_directions, ScanDirections};
use super::scan::{SsmParams, SsmVars};
use crate::error::Result;
use crate::numerics::{ConvMode, ParamStore, Real, Tape, Tensor, Var};

/// Shape of one selective state-space mixing module.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MambaConfig {
    pub d_model: usize,
    pub state_dim: usize,
    pub expand: usize,
    pub conv_kernel: usize,
    pub conv_mode: ConvMode,
    pub directions: ScanDirections,
    pub d_skip: bool,
}

impl MambaConfig {
    pub fn new(d_model: usize) -> Self {
        MambaConfig {
            d_model,
            state_dim: 16,
            expand: 2,
            conv_kernel: 4,
            conv_mode: ConvMode::Symmetric,
            directions: ScanDirections::all(2).expect("valid"),
            d_skip: true,
        }
    }

    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }

    /// Rank of the step-size projection, `⌈C/16⌉`.
    pub fn dt_rank(&self) -> usize {
        self.d_model.div_ceil(16).max(1)
    }

    /// Parameters per direction group: conv taps and bias plus the scan set.
    pub fn group_params(&self) -> usize {
        let (d, n, r) = (self.d_inner(), self.state_dim, self.dt_rank());
        let ssm = 3 * d * n + d + 2 * d * r + if self.d_skip { d } else { 0 };
        self.conv_kernel * d + d + ssm
    }

    pub fn num_params(&self) -> usize {
        let projections = 2 * self.d_inner() * self.d_model + self.d_inner() * self.d_model;
        projections + self.directions.param_keys().len() * self.group_params()
    }
}

fn uniform<T: Real>(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Tensor<T> {
    let data = (0..rows * cols).map(|_| T::of(rng.random_range(-bound..bound))).collect();
    Tensor::matrix(rows, cols, data).expect("shape")
}

/// Inserts the module's parameters under `prefix`. With `zero_out` the
/// output projection starts at zero, so the module initially outputs zero.
pub fn init_mamba_params<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    cfg: &MambaConfig,
    zero_out: bool,
    rng: &mut impl Rng,
) {
    let (c, d, k) = (cfg.d_model, cfg.d_inner(), cfg.conv_kernel);
    store.insert(format!("{prefix}.in_proj"), uniform(rng, c, 2 * d, 1.0 / (c as f64).sqrt()));
    for key in cfg.directions.param_keys() {
        let group = format!("{prefix}.{key}");
        store.insert(format!("{group}.conv_w"), uniform(rng, k, d, 1.0 / (k as f64).sqrt()));
        store.insert(format!("{group}.conv_b"), Tensor::zeros(&[d]));
        SsmParams::<T>::init(d, cfg.state_dim, cfg.dt_rank(), cfg.d_skip, rng).store(store, &group);
    }
    let out = if zero_out {
        Tensor::zeros(&[d, c])
    } else {
        uniform(rng, d, c, 1.0 / (d as f64).sqrt())
    };
    store.insert(format!("{prefix}.out_proj"), out);
}

impl<T: Real> Tape<T> {
    /// `(a, z) = split(x·W_in)`; per direction, `silu(conv(a))` in that
    /// direction's order feeds the scan; the averaged result is gated by
    /// `silu(z)` and projected back to `C`.
    pub fn mamba_module(&mut self, x: Var, store: &ParamStore<T>, prefix: &str, cfg: &MambaConfig) -> Result<Var> {
        let d = cfg.d_inner();
        let w_in = self.param(store, &format!("{prefix}.in_proj"))?;
        let xz = self.matmul(x, w_in)?;
        let a = self.slice_cols(xz, 0, d)?;
        let z = self.slice_cols(xz, d, 2 * d)?;
        let y = merge_directions(self, a, &cfg.directions, |tape, a, dir| {
            let group = format!("{prefix}.{}", cfg.directions.param_key(dir));
            let kw = tape.param(store, &format!("{group}.conv_w"))?;
            let kb = tape.param(store, &format!("{group}.conv_b"))?;
            let conv = tape.depthwise_conv1d(a, kw, cfg.conv_mode)?;
            let conv = tape.add_bias(conv, kb)?;
            let act = tape.silu(conv);
            let vars = SsmVars::bind(tape, store, &group)?;
            tape.ssm(act, &vars, false)
        })?;
        let gate = self.silu(z);
        let gated = self.mul(y, gate)?;
        let w_out = self.param(store, &format!("{prefix}.out_proj"))?;
        self.matmul(gated, w_out)
    }
}

/// Forward pass of one module on a fresh tape.
pub fn mamba_module<T: Real>(x: &Tensor<T>, store: &ParamStore<T>, prefix: &str, cfg: &MambaConfig) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = tape.mamba_module(xv, store, prefix, cfg)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, grad_check_params};
    use crate::ssm::Direction;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(mode: ConvMode, dirs: ScanDirections) -> MambaConfig {
        MambaConfig {
            state_dim: 4,
            conv_kernel: 3,
            conv_mode: mode,
            directions: dirs,
            ..MambaConfig::new(4)
        }
    }

    fn setup(c: &MambaConfig, seed: u64) -> (ParamStore<f64>, Tensor<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        init_mamba_params(&mut store, "m", c, false, &mut rng);
        let x = uniform(&mut rng, 8, c.d_model, 1.0);
        (store, x)
    }

    #[test]
    fn zero_output_projection_gives_zero() {
        let c = cfg(ConvMode::Symmetric, ScanDirections::all(2).unwrap());
        let mut store = ParamStore::new();
        init_mamba_params(&mut store, "m", &c, true, &mut ChaCha8Rng::seed_from_u64(0));
        let x = uniform::<f64>(&mut ChaCha8Rng::seed_from_u64(1), 8, 4, 3.0);
        assert!(mamba_module(&x, &store, "m", &c).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn parameter_count_matches_store() {
        for dirs in [ScanDirections::forward_only(), ScanDirections::all(2).unwrap()] {
            for skip in [true, false] {
                let c = MambaConfig {
                    d_skip: skip,
                    directions: dirs.clone(),
                    ..MambaConfig::new(24)
                };
                let mut store = ParamStore::<f32>::new();
                init_mamba_params(&mut store, "m", &c, false, &mut ChaCha8Rng::seed_from_u64(0));
                assert_eq!(store.numel(), c.num_params());
            }
        }
    }

    fn max_change(c: &MambaConfig, row: usize, src: usize, seed: u64) -> f64 {
        let (store, x) = setup(c, seed);
        let base = mamba_module(&x, &store, "m", c).unwrap();
        let mut moved = x.clone();
        for v in &mut moved.data_mut()[src * 4..(src + 1) * 4] {
            *v += 0.5;
        }
        let y = mamba_module(&moved, &store, "m", c).unwrap();
        (0..4).map(|j| (y.at(row, j) - base.at(row, j)).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn causal_forward_module_ignores_the_future() {
        let c = cfg(ConvMode::Causal, ScanDirections::forward_only());
        for seed in 0..5 {
            for t in 0..8 {
                for src in t + 1..8 {
                    assert_eq!(max_change(&c, t, src, seed), 0.0);
                }
            }
        }
    }

    #[test]
    fn causal_free_module_sees_the_future() {
        let conv_only = cfg(ConvMode::Symmetric, ScanDirections::forward_only());
        assert!(max_change(&conv_only, 2, 3, 0) > 1e-9);
        let scans = cfg(ConvMode::Causal, ScanDirections::all(2).unwrap());
        assert!(max_change(&scans, 0, 7, 0) > 1e-9);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let c = cfg(
            ConvMode::Symmetric,
            ScanDirections::new(2, &[Direction::Forward, Direction::StridedBackward], false).unwrap(),
        );
        let (store, x) = setup(&c, 4);
        let probe = uniform::<f64>(&mut ChaCha8Rng::seed_from_u64(9), 8, 4, 1.0);
        let f = |tape: &mut Tape<f64>, x: Var| {
            let y = tape.mamba_module(x, &store, "m", &c)?;
            let p = tape.constant(probe.clone());
            let yp = tape.mul(y, p)?;
            Ok(tape.sum_all(yp))
        };
        assert!(grad_check(f, &x, 1e-4).unwrap() < 1e-4);

        let names = ["m.in_proj", "m.forward.conv_w", "m.forward.conv_b", "m.strided_backward.a_log", "m.out_proj"];
        let f = |tape: &mut Tape<f64>, store: &ParamStore<f64>| {
            let xv = tape.constant(x.clone());
            let y = tape.mamba_module(xv, store, "m", &c)?;
            let p = tape.constant(probe.clone());
            let yp = tape.mul(y, p)?;
            Ok(tape.sum_all(yp))
        };
        let err = grad_check_params(f, &store, &names, 1e-4, 16).unwrap();
        assert!(err < 1e-4, "parameter gradient error {err}");
    }
}
