use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn mean_mid_data<F: Real>(x: &[F], [outer, mid, inner]: [usize; 3]) -> Vec<F> {
    let mut out = vec![F::zero(); outer * inner];
    let scale = F::one() / F::of(mid as f64);
    for o in 0..outer {
        let acc = &mut out[o * inner..(o + 1) * inner];
        for m in 0..mid {
            let row = &x[(o * mid + m) * inner..(o * mid + m + 1) * inner];
            acc.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
        }
        acc.iter_mut().for_each(|a| *a *= scale);
    }
    out
}

fn sum_leading_data<F: Real>(x: &[F], lead: usize) -> Vec<F> {
    let rest = x.len() / lead;
    let mut out = x[..rest].to_vec();
    for t in 1..lead {
        out.iter_mut().zip(&x[t * rest..(t + 1) * rest]).for_each(|(a, &v)| *a += v);
    }
    out
}

/// Mean over the spatial positions of a channel-last `[h, w, D]` map.
pub fn global_avg_pool<F: Real>(x: &Tensor<F>) -> Result<Tensor<F>> {
    if x.rank() != 3 {
        return Err(Error::dim("global_avg_pool", format!("expected [h, w, D], got {:?}", x.shape())));
    }
    let d = x.last_dim();
    Tensor::new(&[d], mean_mid_data(x.data(), [1, x.numel() / d, d]))
}

/// Elementwise sum over the leading (frame) axis.
pub fn sum_over_frames<F: Real>(x: &Tensor<F>) -> Result<Tensor<F>> {
    if x.rank() < 2 {
        return Err(Error::dim("sum_over_frames", format!("expected a frame axis, got {:?}", x.shape())));
    }
    Tensor::new(&x.shape()[1..], sum_leading_data(x.data(), x.shape()[0]))
}

impl<F: Real> Tape<F> {
    /// Mean over the middle axis of `x` viewed as `[outer, mid, inner]`; the
    /// result has shape `[outer, inner]`.
    pub fn mean_mid(&mut self, x: Var, dims: [usize; 3]) -> Result<Var> {
        let [outer, mid, inner] = dims;
        if self.value(x).numel() != outer * mid * inner {
            return Err(Error::dim("mean_mid", format!("{:?} vs {dims:?}", self.shape(x))));
        }
        let out = Tensor::new(&[outer, inner], mean_mid_data(self.value(x).data(), dims))?;
        Ok(self.push(
            "mean_mid",
            out,
            &[x],
            Box::new(move |c| {
                let scale = F::one() / F::of(mid as f64);
                let mut gx = vec![F::zero(); outer * mid * inner];
                for o in 0..outer {
                    let g = &c.grad[o * inner..(o + 1) * inner];
                    for m in 0..mid {
                        let base = (o * mid + m) * inner;
                        gx[base..base + inner].iter_mut().zip(g).for_each(|(a, &v)| *a = v * scale);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Sum over the leading axis.
    pub fn sum_over_frames(&mut self, x: Var) -> Result<Var> {
        let out = sum_over_frames(self.value(x))?;
        let lead = self.shape(x)[0];
        Ok(self.push(
            "sum_over_frames",
            out,
            &[x],
            Box::new(move |c| vec![Some(c.grad.repeat(lead))]),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pooling_and_frame_sum_anchors() {
        let c = Tensor::<f64>::full(&[3, 2, 2], 1.5);
        assert_eq!(global_avg_pool(&c).unwrap().data(), &[1.5, 1.5]);

        let x = Tensor::<f64>::from_f64(&[2, 2, 1], &[0.0, 2.0, 4.0, 2.0]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[2.0]);

        let frame = [1.0, -2.0, 0.5];
        let seq = Tensor::<f64>::from_f64(&[4, 3], &frame.repeat(4)).unwrap();
        assert_eq!(sum_over_frames(&seq).unwrap().data(), &[4.0, -8.0, 2.0]);
    }
}
