use crate::error::{Error, Result};
use crate::ops::elementwise::softplus_scalar;
use crate::ops::linear;
use crate::real::Real;
use crate::tensor::Tensor;

use super::scan::{ssm_parallel_scan, ssm_recurrent};
use super::zoh::zoh_discretize;
use super::SsmParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ScanMode {
    #[default]
    Recurrent,
    Parallel,
}

/// Token-wise projections `B`, `C` (`[L, D, N]`, shared across channels) and
/// the step sizes `Δ` (`[L, D]`).
#[derive(Clone, Debug)]
pub struct SelectiveParams<F: Real> {
    pub b: Tensor<F>,
    pub c: Tensor<F>,
    pub delta: Tensor<F>,
}

/// `B_l = x_l W_B`, `C_l = x_l W_C`, `Δ_l = softplus(x_l · w_Δ + bias)`.
pub fn selective_parameters<F: Real>(x: &Tensor<F>, p: &SsmParams<F>) -> Result<SelectiveParams<F>> {
    let (d, n) = (p.channels(), p.state_size());
    if x.rank() != 2 || x.shape()[1] != d {
        return Err(Error::dim("selective_parameters", format!("x {:?} for {d} channels", x.shape())));
    }
    let l = x.shape()[0];
    let proj_b = linear(x, &p.w_b, None)?;
    let proj_c = linear(x, &p.w_c, None)?;
    let proj_dt = linear(x, &p.w_delta, None)?;

    let spread = |proj: &Tensor<F>| -> Result<Tensor<F>> {
        let mut out = Vec::with_capacity(l * d * n);
        for row in proj.data().chunks_exact(n) {
            for _ in 0..d {
                out.extend_from_slice(row);
            }
        }
        Tensor::new(&[l, d, n], out)
    };
    let mut delta = vec![F::zero(); l * d];
    for t in 0..l {
        for c in 0..d {
            delta[t * d + c] = softplus_scalar(proj_dt.data()[t] + p.b_delta.data()[c]);
        }
    }
    Ok(SelectiveParams { b: spread(&proj_b)?, c: spread(&proj_c)?, delta: Tensor::new(&[l, d], delta)? })
}

/// Selective scan of `x` (`[L, D]`) from a zero state.
pub fn s6_forward<F: Real>(x: &Tensor<F>, p: &SsmParams<F>, mode: ScanMode) -> Result<Tensor<F>> {
    let sp = selective_parameters(x, p)?;
    let dp = zoh_discretize(&sp.delta, &p.realized_a(), &sp.b)?;
    let h0 = Tensor::zeros(&[p.channels(), p.state_size()]);
    match mode {
        ScanMode::Recurrent => ssm_recurrent(&dp, &sp.c, x, &h0, p.skip.as_ref()),
        ScanMode::Parallel => ssm_parallel_scan(&dp, &sp.c, x, &h0, p.skip.as_ref()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::SsmInit;
    use rand::SeedableRng;

    fn params(d: usize, n: usize, seed: u64) -> SsmParams<f64> {
        SsmParams::init(d, n, &SsmInit::default(), &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn zero_weights_give_constant_softplus_bias() {
        let mut p = params(3, 4, 1);
        p.w_delta = Tensor::zeros(&[3, 1]);
        let sp = selective_parameters(&Tensor::zeros(&[5, 3]), &p).unwrap();
        for t in 0..5 {
            for c in 0..3 {
                assert_eq!(sp.delta.at(&[t, c]), softplus_scalar(p.b_delta.at(&[c])));
            }
        }
    }

    #[test]
    fn projections_are_token_local() {
        let p = params(4, 3, 2);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn(&[6, 4], 1.0, &mut rng);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let xp = crate::ops::gather_rows(&x, 4, &perm).unwrap();
        let (a, b) = (selective_parameters(&x, &p).unwrap(), selective_parameters(&xp, &p).unwrap());
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..4 {
                assert_eq!(b.delta.at(&[dst, c]), a.delta.at(&[src, c]));
                for s in 0..3 {
                    assert_eq!(b.b.at(&[dst, c, s]), a.b.at(&[src, c, s]));
                    assert_eq!(b.c.at(&[dst, c, s]), a.c.at(&[src, c, s]));
                }
            }
        }
    }

    #[test]
    fn projections_match_loops() {
        let p = params(5, 4, 4).cast::<f32>();
        let x = Tensor::<f32>::randn(&[7, 5], 1.0, &mut rand_chacha::ChaCha8Rng::seed_from_u64(5));
        let sp = selective_parameters(&x, &p).unwrap();
        for t in 0..7 {
            let mut dt = 0.0f64;
            for j in 0..5 {
                dt += x.at(&[t, j]) as f64 * p.w_delta.at(&[j, 0]) as f64;
            }
            for c in 0..5 {
                let want = softplus_scalar(dt + p.b_delta.at(&[c]) as f64);
                assert!((sp.delta.at(&[t, c]) as f64 - want).abs() <= 1e-6);
                for s in 0..4 {
                    let (mut b, mut cc) = (0.0f64, 0.0f64);
                    for j in 0..5 {
                        b += x.at(&[t, j]) as f64 * p.w_b.at(&[j, s]) as f64;
                        cc += x.at(&[t, j]) as f64 * p.w_c.at(&[j, s]) as f64;
                    }
                    assert!((sp.b.at(&[t, c, s]) as f64 - b).abs() <= 1e-6);
                    assert!((sp.c.at(&[t, c, s]) as f64 - cc).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn zero_input_zero_output() {
        let p = params(4, 3, 6);
        let y = s6_forward(&Tensor::zeros(&[9, 4]), &p, ScanMode::Parallel).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn modes_agree_and_scan_is_causal() {
        let p = params(6, 8, 7).cast::<f32>();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::<f32>::randn(&[40, 6], 1.0, &mut rng);
        let rec = s6_forward(&x, &p, ScanMode::Recurrent).unwrap();
        let par = s6_forward(&x, &p, ScanMode::Parallel).unwrap();
        assert!(rec.max_abs_diff(&par) <= 1e-5);

        let mut x2 = x.clone();
        for v in &mut x2.data_mut()[21 * 6..] {
            *v += 3.0;
        }
        let rec2 = s6_forward(&x2, &p, ScanMode::Recurrent).unwrap();
        assert_eq!(&rec.data()[..21 * 6], &rec2.data()[..21 * 6]);
        assert_ne!(&rec.data()[21 * 6..], &rec2.data()[21 * 6..]);
    }
}
