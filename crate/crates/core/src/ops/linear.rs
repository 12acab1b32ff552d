use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn check<F: Real>(x: &Tensor<F>, w: &Tensor<F>, b: Option<&Tensor<F>>) -> Result<(usize, usize, usize)> {
    if w.rank() != 2 {
        return Err(Error::dim("linear", format!("weight must be [Din, Dout], got {:?}", w.shape())));
    }
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    if x.last_dim() != din {
        return Err(Error::dim("linear", format!("input {:?} vs weight {:?}", x.shape(), w.shape())));
    }
    if let Some(b) = b {
        if b.numel() != dout {
            return Err(Error::dim("linear", format!("bias {:?} vs Dout {dout}", b.shape())));
        }
    }
    Ok((x.numel() / din, din, dout))
}

/// `y = x W + b` over the trailing axis.
pub fn linear<F: Real>(x: &Tensor<F>, w: &Tensor<F>, b: Option<&Tensor<F>>) -> Result<Tensor<F>> {
    let (rows, din, dout) = check(x, w, b)?;
    let mut out = vec![F::zero(); rows * dout];
    if let Some(b) = b {
        for row in out.chunks_exact_mut(dout) {
            row.copy_from_slice(b.data());
        }
    }
    F::gemm(rows, din, dout, x.data(), false, w.data(), false, &mut out, F::one());
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = dout;
    Tensor::new(&shape, out)
}

impl<F: Real> Tape<F> {
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let (rows, din, dout) = check(self.value(x), self.value(w), None)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            "linear",
            out,
            &inputs,
            Box::new(move |c| {
                let (xd, wd, g) = (c.inputs[0].data(), c.inputs[1].data(), c.grad);
                let gx = c.needs[0].then(|| {
                    let mut gx = vec![F::zero(); rows * din];
                    F::gemm(rows, dout, din, g, false, wd, true, &mut gx, F::zero());
                    gx
                });
                let gw = c.needs[1].then(|| {
                    let mut gw = vec![F::zero(); din * dout];
                    F::gemm(din, rows, dout, xd, true, g, false, &mut gw, F::zero());
                    gw
                });
                let mut grads = vec![gx, gw];
                if c.inputs.len() == 3 {
                    let mut gb = vec![F::zero(); dout];
                    for row in g.chunks_exact(dout) {
                        gb.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                    }
                    grads.push(Some(gb));
                }
                grads
            }),
        ))
    }
}
