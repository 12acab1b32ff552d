//! Central finite-difference verification of tape gradients.
//!
//! For each input tensor and a few random unit directions `v`, the directional
//! derivative `(f(x + εv) - f(x - εv)) / 2ε` is compared with `⟨∇f, v⟩` from the
//! tape. Errors are relative: `|fd - an| / max(|fd|, |an|, floor)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub directions: usize,
    pub seed: u64,
    /// Denominator floor guarding comparisons of two near-zero derivatives.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { eps: 1e-5, directions: 3, seed: 0, floor: 1e-8 }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst relative error per input, in input order.
    pub per_input: Vec<f64>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.per_input.iter().copied().fold(0.0, f64::max)
    }
}

fn eval<G>(f: &G, inputs: &[Tensor<f64>]) -> Result<f64>
where
    G: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(Error::Contract(format!("gradient check needs a scalar function, got {:?}", v.shape())));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(Error::Evaluation(format!("function value is {v}")));
    }
    Ok(v)
}

/// Compares tape gradients of the scalar function `f` with central differences
/// at `inputs`, in 64-bit precision.
pub fn finite_diff_check<G>(f: G, inputs: &[Tensor<f64>], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    G: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out);
    if value.numel() != 1 {
        return Err(Error::Contract(format!("gradient check needs a scalar function, got {:?}", value.shape())));
    }
    if !value.item().is_finite() {
        return Err(Error::Evaluation(format!("function value is {}", value.item())));
    }
    tape.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut per_input = Vec::with_capacity(inputs.len());
    for (i, var) in vars.iter().enumerate() {
        let grad = tape
            .grad(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let mut worst = 0.0f64;
        for _ in 0..cfg.directions {
            let mut dir = Tensor::<f64>::randn(inputs[i].shape(), 1.0, &mut rng);
            let norm = dir.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            dir.data_mut().iter_mut().for_each(|v| *v /= norm);

            let analytic: f64 = grad.data().iter().zip(dir.data()).map(|(g, d)| g * d).sum();
            let mut shifted = inputs.to_vec();
            shifted[i] = perturb(&inputs[i], &dir, cfg.eps);
            let plus = eval(&f, &shifted)?;
            shifted[i] = perturb(&inputs[i], &dir, -cfg.eps);
            let minus = eval(&f, &shifted)?;
            let numeric = (plus - minus) / (2.0 * cfg.eps);

            let denom = numeric.abs().max(analytic.abs()).max(cfg.floor);
            worst = worst.max((numeric - analytic).abs() / denom);
        }
        per_input.push(worst);
    }
    Ok(GradCheckReport { per_input })
}

fn perturb(x: &Tensor<f64>, dir: &Tensor<f64>, eps: f64) -> Tensor<f64> {
    let data = x.data().iter().zip(dir.data()).map(|(a, d)| a + eps * d).collect();
    Tensor::new(x.shape(), data).expect("same shape")
}
