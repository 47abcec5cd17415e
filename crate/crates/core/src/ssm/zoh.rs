use crate::error::{Error, Result};
use crate::numerics::Real;

/// Below this `|Δ·a|` the input coefficient takes its `a → 0` limit `Δ`.
pub const ZOH_LIMIT: f64 = 1e-8;

/// Zero-order-hold coefficients `(Ā, (e^{Δa} − 1)/a)` for one diagonal entry.
#[inline]
pub(crate) fn zoh_coefficients<T: Real>(a: T, delta: T) -> (T, T) {
    let (abar, coef, _) = zoh_terms(a, delta);
    (abar, coef)
}

/// `(Ā, coef, e^z − 1)` for `z = Δa` with at most one `exp` call: a
/// Taylor series for `e^z − 1` when `|z| < 0.1`, where subtracting 1 from
/// `e^z` would cancel.
#[inline]
pub(crate) fn zoh_terms<T: Real>(a: T, delta: T) -> (T, T, T) {
    let z = delta * a;
    let (abar, em1) = if z.abs() < T::of(0.1) {
        let mut m = T::one();
        for k in (2..=8).rev() {
            m = T::one() + z / T::of(k as f64) * m;
        }
        let m = z * m;
        (m + T::one(), m)
    } else {
        let e = z.exp();
        (e, e - T::one())
    };
    let coef = if z.abs() < T::of(ZOH_LIMIT) { delta } else { em1 / a };
    (abar, coef, em1)
}

/// `∂coef/∂a = Δ²φ'(Δa)`, reusing the terms from [`zoh_terms`]; zero on the
/// limit branch where `coef = Δ`.
#[inline]
pub(crate) fn coef_grad_a<T: Real>(a: T, delta: T, abar: T, em1: T) -> T {
    let z = delta * a;
    if z.abs() < T::of(ZOH_LIMIT) {
        T::zero()
    } else if z.abs() < T::of(1e-3) {
        delta * delta * phi_prime(z)
    } else {
        (z * abar - em1) / (a * a)
    }
}

/// Derivative of `φ(z) = (e^z − 1)/z`.
#[inline]
pub(crate) fn phi_prime<T: Real>(z: T) -> T {
    if z.abs() < T::of(1e-3) {
        let (c2, c3, c8, c30) = (T::of(0.5), T::of(3.0), T::of(8.0), T::of(30.0));
        c2 + z / c3 + z * z / c8 + z * z * z / c30
    } else {
        (z * z.exp() - z.exp_m1()) / (z * z)
    }
}

/// Discretizes a diagonal system with step `delta`: `Ā = exp(Δa)` and
/// `B̄ = ((exp(Δa) − 1)/a)·B`, elementwise over `a` and `b`.
pub fn zoh_discretize<T: Real>(a: &[T], b: &[T], delta: T) -> Result<(Vec<T>, Vec<T>)> {
    if !(delta > T::zero()) {
        return Err(Error::Range(format!("zoh_discretize: step must be positive, got {delta}")));
    }
    if a.len() != b.len() {
        return Err(Error::dim("zoh_discretize", &[a.len()], &[b.len()]));
    }
    Ok(a.iter()
        .zip(b)
        .map(|(&a, &b)| {
            let (abar, coef) = zoh_coefficients(a, delta);
            (abar, coef * b)
        })
        .unzip())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_examples() {
        let (a, b) = zoh_discretize(&[-1.0f64], &[1.0], 2f64.ln()).unwrap();
        assert!((a[0] - 0.5).abs() < 1e-15 && (b[0] - 0.5).abs() < 1e-15);

        let (_, b) = zoh_discretize(&[1e-12f64], &[1.0], 1.0).unwrap();
        assert!((b[0] - 1.0).abs() < 1e-11);

        let (a, b) = zoh_discretize(&[-3.0f64], &[1.0], 1e-9).unwrap();
        assert!((a[0] - 1.0).abs() < 1e-8 && b[0].abs() < 1e-8);
    }

    #[test]
    fn rejects_non_positive_step() {
        assert!(matches!(zoh_discretize(&[-1.0f64], &[1.0], 0.0), Err(Error::Range(_))));
        assert!(zoh_discretize(&[-1.0f64], &[1.0], -0.1).is_err());
        assert!(zoh_discretize(&[-1.0f64], &[1.0], f64::NAN).is_err());
    }

    #[test]
    fn phi_prime_branches_agree() {
        for &z in &[-2e-3f64, -1e-3, 1e-3, 2e-3] {
            let exact = (z * z.exp() - z.exp_m1()) / (z * z);
            let series = 0.5 + z / 3.0 + z * z / 8.0 + z * z * z / 30.0;
            assert!((exact - series).abs() < 1e-9);
        }
        let z = 0.3f64;
        let h = 1e-6;
        let phi = |z: f64| z.exp_m1() / z;
        let fd = (phi(z + h) - phi(z - h)) / (2.0 * h);
        assert!((phi_prime(z) - fd).abs() < 1e-8);
    }
}
