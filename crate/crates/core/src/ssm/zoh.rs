//! Zero-order-hold discretization of a diagonal system.
//!
//! With `z = ΔA`, `Ā = exp(z)` and `B̄ = (exp(z) - 1) / z · ΔB`. The factor
//! `φ(z) = expm1(z) / z` switches to its Taylor series when `|z|` falls below
//! [`SERIES_THRESHOLD`].

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const SERIES_THRESHOLD: f64 = 1e-6;

/// `φ(z) = (e^z - 1) / z`, continuous at zero.
#[inline]
pub fn zoh_input_gain<F: Real>(z: F) -> F {
    if z.abs() < F::of(SERIES_THRESHOLD) {
        F::one() + z * F::of(0.5)
    } else {
        z.exp_m1() / z
    }
}

/// `φ'(z) = (e^z - φ(z)) / z`, with its series near zero where the quotient
/// cancels. `inv_z` is `1 / z`, which callers already have.
#[inline(always)]
pub(crate) fn zoh_input_gain_deriv<F: Real>(z: F, a: F, phi: F, inv_z: F) -> F {
    // both branches are evaluated so callers' loops compile to a blend
    let series = F::of(0.5) + z * (F::of(1.0 / 3.0) + z * (F::of(0.125) + z * F::of(1.0 / 30.0)));
    let quotient = (a - phi) * inv_z;
    if z.abs() < F::of(1e-3) {
        series
    } else {
        quotient
    }
}

/// Per-token discretized parameters, both `[L, D, N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscretizedParams<F: Real = f32> {
    pub a_bar: Tensor<F>,
    pub b_bar: Tensor<F>,
}

impl<F: Real> DiscretizedParams<F> {
    /// `(L, D, N)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.a_bar.shape();
        (s[0], s[1], s[2])
    }
}

/// Discretizes `A` (`[D, N]`) and `B` (`[L, D, N]`) with steps `Δ` (`[L, D]`).
pub fn zoh_discretize<F: Real>(delta: &Tensor<F>, a: &Tensor<F>, b: &Tensor<F>) -> Result<DiscretizedParams<F>> {
    if delta.rank() != 2 || a.rank() != 2 || b.rank() != 3 {
        return Err(Error::dim(
            "zoh_discretize",
            format!("delta {:?}, A {:?}, B {:?}", delta.shape(), a.shape(), b.shape()),
        ));
    }
    let (l, d) = (delta.shape()[0], delta.shape()[1]);
    let n = a.shape()[1];
    if a.shape()[0] != d || b.shape() != [l, d, n] {
        return Err(Error::dim(
            "zoh_discretize",
            format!("delta {:?}, A {:?}, B {:?}", delta.shape(), a.shape(), b.shape()),
        ));
    }
    if let Some(bad) = delta.data().iter().find(|&&v| !(v > F::zero())) {
        return Err(Error::Domain(format!("step size must be positive, got {bad}")));
    }
    let mut a_bar = vec![F::zero(); l * d * n];
    let mut b_bar = vec![F::zero(); l * d * n];
    for t in 0..l {
        for c in 0..d {
            let dt = delta.data()[t * d + c];
            for s in 0..n {
                let i = (t * d + c) * n + s;
                let z = dt * a.data()[c * n + s];
                let phi = zoh_input_gain(z);
                a_bar[i] = z.exp();
                b_bar[i] = phi * dt * b.data()[i];
            }
        }
    }
    Ok(DiscretizedParams { a_bar: Tensor::new(&[l, d, n], a_bar)?, b_bar: Tensor::new(&[l, d, n], b_bar)? })
}
