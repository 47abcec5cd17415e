use rand::Rng;

use super::zoh::{coef_grad_a, zoh_coefficients, zoh_terms};
use crate::error::{Error, Result};
use crate::numerics::{linear, softplus_scalar, CustomOp, ParamStore, Real, Tape, Tensor, Var};

/// Selective state-space parameters for `D` channels with state size `N`.
#[derive(Clone, Debug)]
pub struct SsmParams<T> {
    /// `D×N`; the state matrix is `A = −exp(a_log)`.
    pub a_log: Tensor<T>,
    /// `D`
    pub delta_bias: Tensor<T>,
    /// `D×R`, then `R×D`: low-rank projection producing the step size.
    pub delta_down: Tensor<T>,
    pub delta_up: Tensor<T>,
    /// `D×N` each; input and output state projections, shared over channels.
    pub b_proj: Tensor<T>,
    pub c_proj: Tensor<T>,
    /// `D`; absent when the skip term is disabled.
    pub d_skip: Option<Tensor<T>>,
}

const NAMES: [&str; 7] = ["a_log", "delta_bias", "delta_down", "delta_up", "b_proj", "c_proj", "d_skip"];

impl<T: Real> SsmParams<T> {
    /// `A = −(1..N)` per channel, step sizes log-uniform in `[1e-3, 1e-1]`,
    /// unit skip.
    pub fn init(d: usize, n: usize, rank: usize, d_skip: bool, rng: &mut impl Rng) -> Self {
        let uniform = |rng: &mut dyn rand::RngCore, rows: usize, cols: usize, bound: f64| {
            let data = (0..rows * cols).map(|_| T::of(rng.random_range(-bound..bound))).collect();
            Tensor::matrix(rows, cols, data).expect("shape")
        };
        let a_log = (0..d * n).map(|i| T::of(((i % n) + 1) as f64).ln()).collect();
        let delta_bias = (0..d)
            .map(|_| {
                let dt = rng.random_range(1e-3f64.ln()..1e-1f64.ln()).exp();
                T::of(dt + (-(-dt).exp_m1()).ln())
            })
            .collect();
        SsmParams {
            a_log: Tensor::matrix(d, n, a_log).expect("shape"),
            delta_bias: Tensor::vector(delta_bias).expect("shape"),
            delta_down: uniform(rng, d, rank, 1.0 / (d as f64).sqrt()),
            delta_up: uniform(rng, rank, d, 1.0 / (rank as f64).sqrt()),
            b_proj: uniform(rng, d, n, 1.0 / (d as f64).sqrt()),
            c_proj: uniform(rng, d, n, 1.0 / (d as f64).sqrt()),
            d_skip: d_skip.then(|| Tensor::full(&[d], T::one())),
        }
    }

    pub fn channels(&self) -> usize {
        self.a_log.rows()
    }

    pub fn state_dim(&self) -> usize {
        self.a_log.cols()
    }

    fn tensors(&self) -> [Option<&Tensor<T>>; 7] {
        [
            Some(&self.a_log),
            Some(&self.delta_bias),
            Some(&self.delta_down),
            Some(&self.delta_up),
            Some(&self.b_proj),
            Some(&self.c_proj),
            self.d_skip.as_ref(),
        ]
    }

    pub fn numel(&self) -> usize {
        self.tensors().iter().flatten().map(|t| t.len()).sum()
    }

    /// Writes every tensor as `{prefix}.{name}`.
    pub fn store(&self, store: &mut ParamStore<T>, prefix: &str) {
        for (name, t) in NAMES.iter().zip(self.tensors()) {
            if let Some(t) = t {
                store.insert(format!("{prefix}.{name}"), t.clone());
            }
        }
    }

    pub fn load(store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        let get = |name: &str| {
            store
                .value(&format!("{prefix}.{name}"))
                .cloned()
                .ok_or_else(|| Error::Parameter(format!("missing parameter `{prefix}.{name}`")))
        };
        Ok(SsmParams {
            a_log: get("a_log")?,
            delta_bias: get("delta_bias")?,
            delta_down: get("delta_down")?,
            delta_up: get("delta_up")?,
            b_proj: get("b_proj")?,
            c_proj: get("c_proj")?,
            d_skip: store.value(&format!("{prefix}.d_skip")).cloned(),
        })
    }
}

/// Tape handles of [`SsmParams`].
#[derive(Clone, Copy, Debug)]
pub struct SsmVars {
    pub a_log: Var,
    pub delta_bias: Var,
    pub delta_down: Var,
    pub delta_up: Var,
    pub b_proj: Var,
    pub c_proj: Var,
    pub d_skip: Option<Var>,
}

impl SsmVars {
    pub fn bind<T: Real>(tape: &mut Tape<T>, store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        let mut p = |name: &str| tape.param(store, &format!("{prefix}.{name}"));
        Ok(SsmVars {
            a_log: p("a_log")?,
            delta_bias: p("delta_bias")?,
            delta_down: p("delta_down")?,
            delta_up: p("delta_up")?,
            b_proj: p("b_proj")?,
            c_proj: p("c_proj")?,
            d_skip: if store.contains(&format!("{prefix}.d_skip")) {
                Some(p("d_skip")?)
            } else {
                None
            },
        })
    }

    pub fn constants<T: Real>(tape: &mut Tape<T>, p: &SsmParams<T>) -> Self {
        SsmVars {
            a_log: tape.constant(p.a_log.clone()),
            delta_bias: tape.constant(p.delta_bias.clone()),
            delta_down: tape.constant(p.delta_down.clone()),
            delta_up: tape.constant(p.delta_up.clone()),
            b_proj: tape.constant(p.b_proj.clone()),
            c_proj: tape.constant(p.c_proj.clone()),
            d_skip: p.d_skip.as_ref().map(|d| tape.constant(d.clone())),
        }
    }
}

/// Raw recurrence operands, all row-major.
pub(crate) struct ScanOperands<'a, T> {
    /// `L×D`
    pub u: &'a [T],
    /// `L×D`, positive
    pub delta: &'a [T],
    /// `D×N`, negative
    pub a: &'a [T],
    /// `L×N`
    pub b: &'a [T],
    /// `L×N`
    pub c: &'a [T],
    /// `D`
    pub d_skip: Option<&'a [T]>,
    pub l: usize,
    pub d: usize,
    pub n: usize,
    pub reverse: bool,
}

/// `h_t = Ā_t h_{t−1} + B̄_t u_t`, `y_t = C_t·h_t + D⊙u_t`, visiting `t` in
/// increasing order, or decreasing when `reverse`. When `states` is given it
/// receives the `D×N` state after every step, in visiting order.
pub(crate) fn scan_forward<T: Real>(op: &ScanOperands<T>, mut states: Option<&mut Vec<T>>) -> Result<Vec<T>> {
    let (l, d, n) = (op.l, op.d, op.n);
    let mut h = vec![T::zero(); d * n];
    let mut y = vec![T::zero(); l * d];
    if let Some(s) = states.as_deref_mut() {
        s.clear();
        s.reserve(l * d * n);
    }
    for step in 0..l {
        let t = if op.reverse { l - 1 - step } else { step };
        let bt = &op.b[t * n..(t + 1) * n];
        let ct = &op.c[t * n..(t + 1) * n];
        for ch in 0..d {
            let x = op.u[t * d + ch];
            let dt = op.delta[t * d + ch];
            let hrow = &mut h[ch * n..(ch + 1) * n];
            let arow = &op.a[ch * n..(ch + 1) * n];
            let mut acc = T::zero();
            for k in 0..n {
                let (abar, coef) = zoh_coefficients(arow[k], dt);
                hrow[k] = abar * hrow[k] + coef * bt[k] * x;
                acc += ct[k] * hrow[k];
            }
            if let Some(ds) = op.d_skip {
                acc += ds[ch] * x;
            }
            if !acc.is_finite() {
                return Err(Error::Numeric(format!(
                    "selective_scan: non-finite output at step {t}, channel {ch}"
                )));
            }
            y[t * d + ch] = acc;
        }
        if let Some(s) = states.as_deref_mut() {
            s.extend_from_slice(&h);
        }
    }
    Ok(y)
}

struct ScanOp<T> {
    states: Vec<T>,
    reverse: bool,
    has_skip: bool,
}

impl<T: Real> CustomOp<T> for ScanOp<T> {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (u, delta, a_log, b, c) = (inputs[0], inputs[1], inputs[2], inputs[3], inputs[4]);
        let (l, d, n) = (u.rows(), u.cols(), a_log.cols());
        let a: Vec<T> = a_log.data().iter().map(|&v| -v.exp()).collect();
        let gy = grad.data();
        let mut gu = vec![T::zero(); l * d];
        let mut gdelta = vec![T::zero(); l * d];
        let mut ga = vec![T::zero(); d * n];
        let mut gb = vec![T::zero(); l * n];
        let mut gc = vec![T::zero(); l * n];
        let mut gh = vec![T::zero(); d * n];
        let zero_state = vec![T::zero(); d * n];
        for step in (0..l).rev() {
            let t = if self.reverse { l - 1 - step } else { step };
            let h = &self.states[step * d * n..(step + 1) * d * n];
            let hprev = if step == 0 {
                &zero_state[..]
            } else {
                &self.states[(step - 1) * d * n..step * d * n]
            };
            let bt = &b.data()[t * n..(t + 1) * n];
            let ct = &c.data()[t * n..(t + 1) * n];
            for ch in 0..d {
                let x = u.data()[t * d + ch];
                let dt = delta.data()[t * d + ch];
                let g = gy[t * d + ch];
                let mut gx = T::zero();
                let mut gdt = T::zero();
                let span = ch * n..(ch + 1) * n;
                let (hr, hp, ar) = (&h[span.clone()], &hprev[span.clone()], &a[span.clone()]);
                let (gar, ghr) = (&mut ga[span.clone()], &mut gh[span]);
                let (gbt, gct) = (&mut gb[t * n..(t + 1) * n], &mut gc[t * n..(t + 1) * n]);
                for k in 0..n {
                    gct[k] += g * hr[k];
                    let ght = ghr[k] + g * ct[k];
                    let ak = ar[k];
                    let (abar, coef, em1) = zoh_terms(ak, dt);
                    let g_abar = ght * hp[k];
                    let g_coef = ght * bt[k] * x;
                    gbt[k] += ght * coef * x;
                    gx += ght * coef * bt[k];
                    // ∂Ā/∂Δ = aĀ, ∂coef/∂Δ = Ā; ∂Ā/∂a = ΔĀ, ∂coef/∂a = Δ²φ'(Δa)
                    gdt += g_abar * ak * abar + g_coef * abar;
                    gar[k] += g_abar * dt * abar + g_coef * coef_grad_a(ak, dt, abar, em1);
                    ghr[k] = ght * abar;
                }
                if self.has_skip {
                    gx += g * inputs[5].data()[ch];
                }
                gu[t * d + ch] = gx;
                gdelta[t * d + ch] = gdt;
            }
        }
        let g_alog: Vec<T> = ga.iter().zip(&a).map(|(&g, &a)| g * a).collect();
        let mut out = vec![
            Some(Tensor::matrix(l, d, gu).expect("shape")),
            Some(Tensor::matrix(l, d, gdelta).expect("shape")),
            Some(Tensor::matrix(d, n, g_alog).expect("shape")),
            Some(Tensor::matrix(l, n, gb).expect("shape")),
            Some(Tensor::matrix(l, n, gc).expect("shape")),
        ];
        if self.has_skip {
            let mut gd = vec![T::zero(); d];
            for t in 0..l {
                for ch in 0..d {
                    gd[ch] += gy[t * d + ch] * u.data()[t * d + ch];
                }
            }
            out.push(Some(Tensor::new(inputs[5].shape().to_vec(), gd).expect("shape")));
        }
        out
    }
}

fn check_operands(l: usize, d: usize, n: usize, shapes: [(&[usize], usize, usize); 4]) -> Result<()> {
    for (shape, rows, cols) in shapes {
        let (r, c) = match shape {
            [r, c] => (*r, *c),
            [c] => (1, *c),
            _ => (0, 0),
        };
        if (r, c) != (rows, cols) {
            return Err(Error::dim("selective_scan", &[l, d, n], shape));
        }
    }
    Ok(())
}

impl<T: Real> Tape<T> {
    /// Recurrence over precomputed step sizes `delta` (`L×D`), `a_log`
    /// (`D×N`), `b`, `c` (`L×N`) and an optional skip `d_skip` (`D`).
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        &mut self,
        u: Var,
        delta: Var,
        a_log: Var,
        b: Var,
        c: Var,
        d_skip: Option<Var>,
        reverse: bool,
    ) -> Result<Var> {
        let (l, d) = (self.value(u).rows(), self.value(u).cols());
        let n = self.value(a_log).cols();
        check_operands(
            l,
            d,
            n,
            [
                (self.shape(delta), l, d),
                (self.shape(a_log), d, n),
                (self.shape(b), l, n),
                (self.shape(c), l, n),
            ],
        )?;
        if let Some(s) = d_skip {
            if self.value(s).len() != d {
                return Err(Error::dim("selective_scan skip", &[d], self.shape(s)));
            }
        }
        let a: Vec<T> = self.value(a_log).data().iter().map(|&v| -v.exp()).collect();
        let mut states = Vec::new();
        let y = scan_forward(
            &ScanOperands {
                u: self.value(u).data(),
                delta: self.value(delta).data(),
                a: &a,
                b: self.value(b).data(),
                c: self.value(c).data(),
                d_skip: d_skip.map(|s| self.value(s).data()),
                l,
                d,
                n,
                reverse,
            },
            Some(&mut states),
        )?;
        let mut inputs = vec![u, delta, a_log, b, c];
        inputs.extend(d_skip);
        Ok(self.custom(
            &inputs,
            Tensor::matrix(l, d, y)?,
            Box::new(ScanOp {
                states,
                reverse,
                has_skip: d_skip.is_some(),
            }),
        ))
    }

    /// Input-dependent scan: `Δ = softplus(u·W↓·W↑ + bias)`, `B = u·W_B`,
    /// `C = u·W_C`, then the recurrence.
    pub fn ssm(&mut self, u: Var, p: &SsmVars, reverse: bool) -> Result<Var> {
        let low = self.matmul(u, p.delta_down)?;
        let pre = self.matmul(low, p.delta_up)?;
        let pre = self.add_bias(pre, p.delta_bias)?;
        let delta = self.softplus(pre);
        let b = self.matmul(u, p.b_proj)?;
        let c = self.matmul(u, p.c_proj)?;
        self.selective_scan(u, delta, p.a_log, b, c, p.d_skip, reverse)
    }
}

/// Forward-only input-dependent scan over `u` (`L×D`).
pub fn selective_scan<T: Real>(u: &Tensor<T>, p: &SsmParams<T>, reverse: bool) -> Result<Tensor<T>> {
    let (l, d, n) = (u.rows(), u.cols(), p.state_dim());
    if d != p.channels() {
        return Err(Error::dim("selective_scan", u.shape(), p.a_log.shape()));
    }
    let low = linear(u, &p.delta_down, None)?;
    let delta = linear(&low, &p.delta_up, Some(&p.delta_bias))?.map(softplus_scalar);
    let b = linear(u, &p.b_proj, None)?;
    let c = linear(u, &p.c_proj, None)?;
    let a: Vec<T> = p.a_log.data().iter().map(|&v| -v.exp()).collect();
    let y = scan_forward(
        &ScanOperands {
            u: u.data(),
            delta: delta.data(),
            a: &a,
            b: b.data(),
            c: c.data(),
            d_skip: p.d_skip.as_ref().map(|s| s.data()),
            l,
            d,
            n,
            reverse,
        },
        None,
    )?;
    Tensor::matrix(l, d, y)
}

/// Discretized state matrices `Ā` (`L×D×N`, flattened) that the scan of
/// `u` would use; exposed for inspecting the forget-gate range.
pub fn discretized_decay<T: Real>(u: &Tensor<T>, p: &SsmParams<T>) -> Result<Vec<T>> {
    let low = linear(u, &p.delta_down, None)?;
    let delta = linear(&low, &p.delta_up, Some(&p.delta_bias))?.map(softplus_scalar);
    let n = p.state_dim();
    let mut out = Vec::with_capacity(delta.len() * n);
    for (i, &dt) in delta.data().iter().enumerate() {
        let ch = i % p.channels();
        for k in 0..n {
            let a = -p.a_log.data()[ch * n + k].exp();
            out.push(zoh_coefficients(a, dt).0);
        }
    }
    Ok(out)
}
