//! Elementwise arithmetic, activations, and layout shuffles.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[inline]
pub fn sigmoid_scalar<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

#[inline]
pub fn softplus_scalar<F: Real>(x: F) -> F {
    // log(1 + e^x) without overflow
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    x.map(sigmoid_scalar)
}

pub fn silu<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    x.map(|v| v * sigmoid_scalar(v))
}

pub fn softplus<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    x.map(softplus_scalar)
}

/// Binary operation applied between `x` viewed as `[outer, mid, inner]` and `e`
/// viewed as `[outer, inner]`, broadcasting `e` over the middle axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Broadcast {
    Add,
    Mul,
}

fn same_shape(op: &'static str, a: &Tensor<impl Real>, b: &Tensor<impl Real>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn zip_map<F: Real>(a: &Tensor<F>, b: &Tensor<F>, f: impl Fn(F, F) -> F) -> Tensor<F> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("shape preserved")
}

/// Sentinel in gather indices selecting a zero row.
pub const ZERO_ROW: usize = usize::MAX;

/// Copies rows of a `[rows, width]` view of `x` into a `[index.len(), width]`
/// output; `ZERO_ROW` entries produce zeros.
pub fn gather_rows<F: Real>(x: &Tensor<F>, width: usize, index: &[usize]) -> Result<Tensor<F>> {
    if width == 0 || x.numel() % width != 0 {
        return Err(Error::dim("gather_rows", format!("row width {width} does not divide {:?}", x.shape())));
    }
    let rows = x.numel() / width;
    let mut out = vec![F::zero(); index.len() * width];
    for (o, &src) in out.chunks_exact_mut(width).zip(index) {
        if src == ZERO_ROW {
            continue;
        }
        if src >= rows {
            return Err(Error::Layout(format!("gather index {src} out of {rows} rows")));
        }
        o.copy_from_slice(&x.data()[src * width..(src + 1) * width]);
    }
    Tensor::new(&[index.len(), width], out)
}

impl<F: Real> Tape<F> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push("add", out, &[a, b], Box::new(|c| vec![Some(c.grad.to_vec()), Some(c.grad.to_vec())])))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(
            "sub",
            out,
            &[a, b],
            Box::new(|c| vec![Some(c.grad.to_vec()), Some(c.grad.iter().map(|&g| -g).collect())]),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(
            "mul",
            out,
            &[a, b],
            Box::new(|c| {
                let (x, y) = (c.inputs[0].data(), c.inputs[1].data());
                vec![
                    c.needs[0].then(|| c.grad.iter().zip(y).map(|(&g, &v)| g * v).collect()),
                    c.needs[1].then(|| c.grad.iter().zip(x).map(|(&g, &v)| g * v).collect()),
                ]
            }),
        ))
    }

    pub fn scale(&mut self, a: Var, factor: F) -> Var {
        let out = self.value(a).map(|v| v * factor);
        self.push("scale", out, &[a], Box::new(move |c| vec![Some(c.grad.iter().map(|&g| g * factor).collect())]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = sigmoid(self.value(a));
        self.push(
            "sigmoid",
            out,
            &[a],
            Box::new(|c| {
                let s = c.output.data();
                vec![Some(c.grad.iter().zip(s).map(|(&g, &s)| g * s * (F::one() - s)).collect())]
            }),
        )
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = silu(self.value(a));
        self.push(
            "silu",
            out,
            &[a],
            Box::new(|c| {
                let x = c.inputs[0].data();
                vec![Some(
                    c.grad
                        .iter()
                        .zip(x)
                        .map(|(&g, &x)| {
                            let s = sigmoid_scalar(x);
                            g * s * (F::one() + x * (F::one() - s))
                        })
                        .collect(),
                )]
            }),
        )
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = softplus(self.value(a));
        self.push(
            "softplus",
            out,
            &[a],
            Box::new(|c| {
                let x = c.inputs[0].data();
                vec![Some(c.grad.iter().zip(x).map(|(&g, &x)| g * sigmoid_scalar(x)).collect())]
            }),
        )
    }

    /// `y = -exp(x)`, the map from a log-magnitude to a strictly negative value.
    pub fn neg_exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| -v.exp());
        self.push(
            "neg_exp",
            out,
            &[a],
            Box::new(|c| vec![Some(c.grad.iter().zip(c.output.data()).map(|(&g, &y)| g * y).collect())]),
        )
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push("sum", out, &[a], Box::new(|c| vec![Some(vec![c.grad[0]; c.inputs[0].numel()])]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push("reshape", out, &[a], Box::new(|c| vec![Some(c.grad.to_vec())])))
    }

    /// See [`Broadcast`]; `dims = [outer, mid, inner]` describes `x`.
    pub fn broadcast(&mut self, x: Var, e: Var, dims: [usize; 3], kind: Broadcast) -> Result<Var> {
        let [outer, mid, inner] = dims;
        let (xv, ev) = (self.value(x), self.value(e));
        if xv.numel() != outer * mid * inner || ev.numel() != outer * inner {
            return Err(Error::dim(
                "broadcast",
                format!("x {:?}, e {:?} against [{outer},{mid},{inner}]", xv.shape(), ev.shape()),
            ));
        }
        let mut out = xv.data().to_vec();
        for o in 0..outer {
            let erow = &ev.data()[o * inner..(o + 1) * inner];
            for m in 0..mid {
                let base = (o * mid + m) * inner;
                let row = &mut out[base..base + inner];
                match kind {
                    Broadcast::Add => row.iter_mut().zip(erow).for_each(|(r, &v)| *r += v),
                    Broadcast::Mul => row.iter_mut().zip(erow).for_each(|(r, &v)| *r *= v),
                }
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        Ok(self.push(
            "broadcast",
            out,
            &[x, e],
            Box::new(move |c| {
                let g = c.grad;
                let (xd, ed) = (c.inputs[0].data(), c.inputs[1].data());
                let mut gx = c.needs[0].then(|| vec![F::zero(); g.len()]);
                let mut ge = c.needs[1].then(|| vec![F::zero(); outer * inner]);
                for o in 0..outer {
                    for m in 0..mid {
                        let base = (o * mid + m) * inner;
                        for i in 0..inner {
                            let gv = g[base + i];
                            match kind {
                                Broadcast::Add => {
                                    if let Some(gx) = gx.as_mut() {
                                        gx[base + i] = gv;
                                    }
                                    if let Some(ge) = ge.as_mut() {
                                        ge[o * inner + i] += gv;
                                    }
                                }
                                Broadcast::Mul => {
                                    if let Some(gx) = gx.as_mut() {
                                        gx[base + i] = gv * ed[o * inner + i];
                                    }
                                    if let Some(ge) = ge.as_mut() {
                                        ge[o * inner + i] += gv * xd[base + i];
                                    }
                                }
                            }
                        }
                    }
                }
                vec![gx, ge]
            }),
        ))
    }

    /// Concatenates along the last axis; leading shapes must agree.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::dim("concat_last", format!("{sa:?} vs {sb:?}")));
        }
        let (ca, cb) = (av.last_dim(), bv.last_dim());
        let rows = av.numel() / ca;
        let mut out = Vec::with_capacity(av.numel() + bv.numel());
        for r in 0..rows {
            out.extend_from_slice(&av.data()[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&bv.data()[r * cb..(r + 1) * cb]);
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = ca + cb;
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(
            "concat_last",
            out,
            &[a, b],
            Box::new(move |c| {
                let mut ga = Vec::with_capacity(rows * ca);
                let mut gb = Vec::with_capacity(rows * cb);
                for row in c.grad.chunks_exact(ca + cb) {
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    /// Transpose of a matrix `[m, n] -> [n, m]`.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 2 {
            return Err(Error::dim("transpose", format!("expected rank 2, got {:?}", av.shape())));
        }
        let (m, n) = (av.shape()[0], av.shape()[1]);
        let out = Tensor::new(&[n, m], transpose_data(av.data(), m, n))?;
        Ok(self.push("transpose", out, &[a], Box::new(move |c| vec![Some(transpose_data(c.grad, n, m))])))
    }

    /// Taped [`gather_rows`]. The backward pass scatters adjoints back, summing
    /// rows that were gathered more than once.
    pub fn gather_rows(&mut self, x: Var, width: usize, index: Arc<Vec<usize>>) -> Result<Var> {
        let out = gather_rows(self.value(x), width, &index)?;
        let n_in = self.value(x).numel();
        Ok(self.push(
            "gather_rows",
            out,
            &[x],
            Box::new(move |c| {
                let mut gx = vec![F::zero(); n_in];
                for (g, &src) in c.grad.chunks_exact(width).zip(index.iter()) {
                    if src == ZERO_ROW {
                        continue;
                    }
                    gx[src * width..(src + 1) * width].iter_mut().zip(g).for_each(|(a, &b)| *a += b);
                }
                vec![Some(gx)]
            }),
        ))
    }
}

pub(crate) fn transpose_data<F: Real>(d: &[F], m: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn activation_anchor_values() {
        assert_eq!(sigmoid_scalar(0.0f64), 0.5);
        assert_eq!(silu(&Tensor::<f64>::scalar(0.0)).item(), 0.0);
        assert!((1.0 - sigmoid_scalar(40.0f32)).abs() < 1e-6);
        assert!(sigmoid_scalar(-800.0f64) >= 0.0);
        assert!((softplus_scalar(0.0f64) - 2f64.ln()).abs() < 1e-15);
        assert!(softplus_scalar(1000.0f64).is_finite());
    }

    #[test]
    fn silu_is_x_times_sigmoid() {
        let xs = [-3.5f64, -0.2, 0.0, 0.7, 4.1];
        for x in xs {
            assert_eq!(silu(&Tensor::scalar(x)).item(), x * sigmoid_scalar(x));
        }
    }

    #[test]
    fn gather_zero_rows_and_bounds() {
        let x = Tensor::<f32>::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let g = gather_rows(&x, 2, &[1, ZERO_ROW, 0]).unwrap();
        assert_eq!(g.data(), &[3.0, 4.0, 0.0, 0.0, 1.0, 2.0]);
        assert!(gather_rows(&x, 2, &[2]).is_err());
    }

    #[test]
    fn broadcast_shapes_are_checked() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[2, 3, 4]));
        let e = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(tape.broadcast(x, e, [2, 3, 4], Broadcast::Add).is_err());
    }
}
