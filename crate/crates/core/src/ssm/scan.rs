//! Sequential and associative evaluations of the discretized recurrence.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

use super::zoh::DiscretizedParams;

fn check<F: Real>(
    dp: &DiscretizedParams<F>,
    c: &Tensor<F>,
    x: &Tensor<F>,
    h0: &Tensor<F>,
    skip: Option<&Tensor<F>>,
) -> Result<(usize, usize, usize)> {
    let (l, d, n) = dp.dims();
    let ok = dp.b_bar.shape() == [l, d, n]
        && c.shape() == [l, d, n]
        && x.shape() == [l, d]
        && h0.shape() == [d, n]
        && skip.map_or(true, |s| s.numel() == d);
    if !ok {
        return Err(Error::dim(
            "ssm_scan",
            format!(
                "A̅ {:?}, C {:?}, x {:?}, h0 {:?}, skip {:?}",
                dp.a_bar.shape(),
                c.shape(),
                x.shape(),
                h0.shape(),
                skip.map(|s| s.shape().to_vec())
            ),
        ));
    }
    Ok((l, d, n))
}

fn readout<F: Real>(
    states: impl Fn(usize) -> F,
    c: &Tensor<F>,
    x: &Tensor<F>,
    skip: Option<&Tensor<F>>,
    (l, d, n): (usize, usize, usize),
) -> Result<Tensor<F>> {
    let mut y = vec![F::zero(); l * d];
    for t in 0..l {
        for ch in 0..d {
            let mut acc = F::zero();
            for s in 0..n {
                let i = (t * d + ch) * n + s;
                acc += c.data()[i] * states(i);
            }
            if let Some(skip) = skip {
                acc += skip.data()[ch] * x.data()[t * d + ch];
            }
            y[t * d + ch] = acc;
        }
    }
    Tensor::new(&[l, d], y)
}

/// Reference evaluation: `h_t = Ā_t ⊙ h_{t-1} + B̄_t x_t`, `y_t = ⟨C_t, h_t⟩ + skip ⊙ x_t`.
pub fn ssm_recurrent<F: Real>(
    dp: &DiscretizedParams<F>,
    c: &Tensor<F>,
    x: &Tensor<F>,
    h0: &Tensor<F>,
    skip: Option<&Tensor<F>>,
) -> Result<Tensor<F>> {
    let dims @ (l, d, n) = check(dp, c, x, h0, skip)?;
    let mut h = h0.data().to_vec();
    let mut states = vec![F::zero(); l * d * n];
    for t in 0..l {
        for ch in 0..d {
            let xv = x.data()[t * d + ch];
            for s in 0..n {
                let i = (t * d + ch) * n + s;
                let j = ch * n + s;
                h[j] = dp.a_bar.data()[i] * h[j] + dp.b_bar.data()[i] * xv;
                states[i] = h[j];
            }
        }
    }
    readout(|i| states[i], c, x, skip, dims)
}

/// Same recurrence evaluated as a Blelloch prefix scan over the associative
/// composition `(a₁, b₁) ∘ (a₂, b₂) = (a₁a₂, a₂b₁ + b₂)`.
///
/// Each `(token, channel, state)` lane is an affine map `h ↦ a h + b`; the
/// inclusive prefix of the maps applied to `h0` yields every state. The sequence
/// is padded to a power of two with the identity map `(1, 0)`.
pub fn ssm_parallel_scan<F: Real>(
    dp: &DiscretizedParams<F>,
    c: &Tensor<F>,
    x: &Tensor<F>,
    h0: &Tensor<F>,
    skip: Option<&Tensor<F>>,
) -> Result<Tensor<F>> {
    let dims @ (l, d, n) = check(dp, c, x, h0, skip)?;
    let lanes = d * n;
    let len = l.next_power_of_two();

    let mut a = vec![F::one(); len * lanes];
    let mut b = vec![F::zero(); len * lanes];
    a[..l * lanes].copy_from_slice(dp.a_bar.data());
    for t in 0..l {
        for ch in 0..d {
            let xv = x.data()[t * d + ch];
            for s in 0..n {
                let i = (t * d + ch) * n + s;
                b[i] = dp.b_bar.data()[i] * xv;
            }
        }
    }
    let (elem_a, elem_b) = (a.clone(), b.clone());

    // up-sweep: node i accumulates the composition of its subtree
    let mut stride = 1;
    while stride < len {
        let mut i = 2 * stride - 1;
        while i < len {
            compose_into(&mut a, &mut b, i - stride, i, lanes, false);
            i += 2 * stride;
        }
        stride *= 2;
    }
    // down-sweep: node i ends up with the composition of everything before it
    a[(len - 1) * lanes..].iter_mut().for_each(|v| *v = F::one());
    b[(len - 1) * lanes..].iter_mut().for_each(|v| *v = F::zero());
    stride = len / 2;
    while stride >= 1 {
        let mut i = 2 * stride - 1;
        while i < len {
            compose_into(&mut a, &mut b, i - stride, i, lanes, true);
            i += 2 * stride;
        }
        stride /= 2;
    }

    // inclusive prefix = exclusive prefix ∘ element, then apply to h0
    let mut states = vec![F::zero(); l * lanes];
    for t in 0..l {
        for j in 0..lanes {
            let i = t * lanes + j;
            let pa = a[i] * elem_a[i];
            let pb = elem_a[i] * b[i] + elem_b[i];
            states[i] = pa * h0.data()[j] + pb;
        }
    }
    readout(|i| states[i], c, x, skip, dims)
}

/// Up-sweep (`swap = false`): `node[right] = node[left] ∘ node[right]`.
/// Down-sweep (`swap = true`): `node[left] = node[right]` and
/// `node[right] = node[right] ∘ old node[left]`.
fn compose_into<F: Real>(a: &mut [F], b: &mut [F], left: usize, right: usize, lanes: usize, swap: bool) {
    for j in 0..lanes {
        let (l, r) = (left * lanes + j, right * lanes + j);
        let (la, lb, ra, rb) = (a[l], b[l], a[r], b[r]);
        if swap {
            a[l] = ra;
            b[l] = rb;
            a[r] = ra * la;
            b[r] = la * rb + lb;
        } else {
            a[r] = la * ra;
            b[r] = ra * lb + rb;
        }
    }
}
