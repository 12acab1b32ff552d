use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn row_stats<F: Real>(row: &[F], eps: F) -> (F, F) {
    let n = F::of(row.len() as f64);
    let mean = row.iter().copied().sum::<F>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
    (mean, F::one() / (var + eps).sqrt())
}

/// Normalizes every position over the trailing (channel) axis, then applies the
/// affine `gamma`, `beta`.
pub fn layer_norm<F: Real>(x: &Tensor<F>, gamma: &Tensor<F>, beta: &Tensor<F>, eps: F) -> Result<Tensor<F>> {
    let d = x.last_dim();
    if gamma.numel() != d || beta.numel() != d {
        return Err(Error::dim(
            "layer_norm",
            format!("input {:?}, gamma {:?}, beta {:?}", x.shape(), gamma.shape(), beta.shape()),
        ));
    }
    let mut out = vec![F::zero(); x.numel()];
    for (row, o) in x.data().chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let (mean, rstd) = row_stats(row, eps);
        for i in 0..d {
            o[i] = (row[i] - mean) * rstd * gamma.data()[i] + beta.data()[i];
        }
    }
    Tensor::new(x.shape(), out)
}

impl<F: Real> Tape<F> {
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let out = layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let d = self.value(x).last_dim();
        Ok(self.push(
            "layer_norm",
            out,
            &[x, gamma, beta],
            Box::new(move |c| {
                let (xd, gd) = (c.inputs[0].data(), c.inputs[1].data());
                let mut gx = vec![F::zero(); xd.len()];
                let mut ggamma = vec![F::zero(); d];
                let mut gbeta = vec![F::zero(); d];
                let n = F::of(d as f64);
                let mut xhat = vec![F::zero(); d];
                let mut gxhat = vec![F::zero(); d];
                for ((row, gy), gxr) in xd.chunks_exact(d).zip(c.grad.chunks_exact(d)).zip(gx.chunks_exact_mut(d)) {
                    let (mean, rstd) = row_stats(row, eps);
                    let mut m1 = F::zero();
                    let mut m2 = F::zero();
                    for i in 0..d {
                        xhat[i] = (row[i] - mean) * rstd;
                        gxhat[i] = gy[i] * gd[i];
                        ggamma[i] += gy[i] * xhat[i];
                        gbeta[i] += gy[i];
                        m1 += gxhat[i];
                        m2 += gxhat[i] * xhat[i];
                    }
                    m1 = m1 / n;
                    m2 = m2 / n;
                    for i in 0..d {
                        gxr[i] = rstd * (gxhat[i] - m1 - xhat[i] * m2);
                    }
                }
                vec![c.needs[0].then_some(gx), c.needs[1].then_some(ggamma), c.needs[2].then_some(gbeta)]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn unit(d: usize) -> (Tensor<f64>, Tensor<f64>) {
        (Tensor::ones(&[d]), Tensor::zeros(&[d]))
    }

    #[test]
    fn constant_row_maps_to_zero() {
        let (g, b) = unit(4);
        let y = layer_norm(&Tensor::full(&[4], 3.0), &g, &b, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn symmetric_pair_is_already_normalized() {
        let (g, b) = unit(2);
        let y = layer_norm(&Tensor::from_f64(&[2], &[1.0, -1.0]).unwrap(), &g, &b, 1e-5).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-5 && (y.data()[1] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn random_rows_have_zero_mean_unit_variance() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn(&[10, 32], 4.0, &mut rng);
        let (g, b) = unit(32);
        let y = layer_norm(&x, &g, &b, 1e-5).unwrap();
        for row in y.data().chunks_exact(32) {
            let mean = row.iter().sum::<f64>() / 32.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
            assert!(mean.abs() <= 1e-6);
            assert!((var - 1.0).abs() <= 1e-4);
        }
    }
}
