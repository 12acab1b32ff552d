use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Mean squared error over the maps of visible keypoints,
/// `Σ_k v_k ‖Ĥ_k − H_k‖² / (visible · h · w)`; zero when nothing is visible.
/// `pred` and `target` are `[K, h, w]`.
pub fn heatmap_loss<F: Real>(tape: &mut Tape<F>, pred: Var, target: &Tensor<F>, visible: &[bool]) -> Result<Var> {
    let s = tape.shape(pred).to_vec();
    if s != target.shape() || s.len() != 3 || s[0] != visible.len() {
        return Err(Error::dim(
            "heatmap_loss",
            format!("prediction {s:?}, target {:?}, {} visibility flags", target.shape(), visible.len()),
        ));
    }
    let count = visible.iter().filter(|&&v| v).count();
    let map = s[1] * s[2];
    if count == 0 {
        let total = tape.sum(pred);
        return Ok(tape.scale(total, F::zero()));
    }
    let mask: Vec<F> = visible.iter().flat_map(|&v| std::iter::repeat(if v { F::one() } else { F::zero() }).take(map)).collect();
    let mask = tape.constant(Tensor::new(&s, mask)?);
    let target = tape.constant(target.clone());
    let diff = tape.sub(pred, target)?;
    let diff = tape.mul(diff, mask)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq);
    Ok(tape.scale(total, F::of(1.0 / (count * map) as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_check, GradCheckConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn maps(seed: u64) -> Tensor<f64> {
        Tensor::randn(&[3, 4, 5], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn loss(pred: &Tensor<f64>, target: &Tensor<f64>, visible: &[bool]) -> f64 {
        let mut t = Tape::new();
        let p = t.constant(pred.clone());
        let l = heatmap_loss(&mut t, p, target, visible).unwrap();
        t.value(l).item()
    }

    #[test]
    fn equal_maps_give_zero_and_offsets_give_their_square() {
        let h = maps(1);
        assert_eq!(loss(&h, &h, &[true; 3]), 0.0);
        let shifted = h.map(|v| v + 0.3);
        assert!((loss(&shifted, &h, &[true; 3]) - 0.09).abs() < 1e-12);
    }

    #[test]
    fn hidden_maps_are_ignored() {
        let (p, h) = (maps(2), maps(3));
        let mut q = p.clone();
        q.data_mut()[..20].iter_mut().for_each(|v| *v += 5.0);
        assert_eq!(loss(&p, &h, &[false, true, true]), loss(&q, &h, &[false, true, true]));
        assert_eq!(loss(&p, &h, &[false; 3]), 0.0);
    }

    #[test]
    fn matches_direct_sum_and_is_nonnegative() {
        let (p, h) = (maps(4), maps(5));
        let vis = [true, false, true];
        let mut want = 0.0;
        for k in [0, 2] {
            for i in 0..20 {
                want += (p.data()[k * 20 + i] - h.data()[k * 20 + i]).powi(2);
            }
        }
        want /= 40.0;
        let got = loss(&p, &h, &vis);
        assert!((got - want).abs() < 1e-12 && got >= 0.0);
    }

    #[test]
    fn gradient_is_twice_the_residual_over_the_count() {
        let (p, h) = (maps(6), maps(7));
        let vis = [true, true, false];
        let mut t = Tape::new();
        let v = t.param(p.clone());
        let l = heatmap_loss(&mut t, v, &h, &vis).unwrap();
        t.backward(l).unwrap();
        let g = t.grad(v).unwrap();
        for (i, (&gi, (&a, &b))) in g.data().iter().zip(p.data().iter().zip(h.data())).enumerate() {
            let want = if i < 40 { 2.0 * (a - b) / 40.0 } else { 0.0 };
            assert!((gi - want).abs() < 1e-14);
        }
        let target = h.clone();
        let r = finite_diff_check(|t, x| heatmap_loss(t, x[0], &target, &vis), &[p], &GradCheckConfig::default()).unwrap();
        assert!(r.max_rel_error() < 1e-6, "{r:?}");
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut t = Tape::new();
        let p = t.constant(maps(8));
        assert!(heatmap_loss(&mut t, p, &Tensor::zeros(&[3, 4, 4]), &[true; 3]).is_err());
        assert!(heatmap_loss(&mut t, p, &maps(9), &[true; 2]).is_err());
    }
}
