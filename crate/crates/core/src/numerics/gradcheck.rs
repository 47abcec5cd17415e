use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Absolute floor of the relative-error denominator.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

fn relative_error(a: f64, numeric: f64) -> f64 {
    (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Fourth-order central difference of `f` along one coordinate.
fn stencil(h: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let (p2, p1, m1, m2) = (f(2.0 * h)?, f(h)?, f(-h)?, f(-2.0 * h)?);
    Ok((-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h))
}

/// Compares the tape gradient of a scalar function against fourth-order
/// central differences with step `h` and returns the largest elementwise
/// relative error `|a − n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let out = f(&mut tape, xv)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |probe: Tensor<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.input(probe);
        let o = f(&mut t, v)?;
        Ok(t.value(o).item())
    };

    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let numeric = stencil(h, |d| {
            let mut probe = x.clone();
            probe.data_mut()[i] += d;
            eval(probe)
        })?;
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Like [`grad_check`], but over named entries of a parameter store that
/// `f` binds with [`Tape::param`]. At most `per_tensor` evenly spaced
/// elements of each tensor are probed.
pub fn grad_check_params<F>(f: F, store: &ParamStore<f64>, names: &[&str], h: f64, per_tensor: usize) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let grads = tape.backward(out)?;
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let o = f(&mut t, s)?;
        Ok(t.value(o).item())
    };
    let mut worst = 0.0f64;
    for &name in names {
        let value = store
            .value(name)
            .ok_or_else(|| Error::Parameter(format!("unknown parameter `{name}`")))?;
        let analytic = tape
            .bound(name)
            .and_then(|v| grads.get(v).cloned())
            .unwrap_or_else(|| Tensor::zeros(value.shape()));
        let n = value.len();
        let step = n.div_ceil(per_tensor.max(1)).max(1);
        for i in (0..n).step_by(step) {
            let numeric = stencil(h, |d| {
                let mut probe = store.clone();
                probe.value_mut(name).expect("present").data_mut()[i] += d;
                eval(&probe)
            })?;
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
    }
    Ok(worst)
}
