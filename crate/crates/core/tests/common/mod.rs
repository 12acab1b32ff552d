#![allow(dead_code)]

use glsmamba::ssm::{SsmInit, SsmParams};
use glsmamba::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A seeded scan problem: token features and parameters, with step sizes
/// spread over roughly three decades.
pub struct ScanCase {
    pub x: Tensor<f64>,
    pub params: SsmParams<f64>,
}

pub fn scan_case(seed: u64, max_l: usize, max_d: usize, max_n: usize) -> ScanCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = rng.gen_range(1..=max_l);
    let d = rng.gen_range(1..=max_d);
    let n = rng.gen_range(1..=max_n);
    let mut params = SsmParams::<f64>::init(d, n, &SsmInit::default(), &mut rng);
    let shift = rng.gen_range(-1.0..3.0);
    params.b_delta = params.b_delta.map(|v| v + shift);
    params.w_delta = Tensor::randn(&[d, 1], 0.3, &mut rng);
    if rng.gen_bool(0.5) {
        params.skip = Some(Tensor::randn(&[d], 1.0, &mut rng));
    }
    ScanCase { x: Tensor::randn(&[l, d], 1.0, &mut rng), params }
}

fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.exp().ln_1p()
    }
}

/// Direct evaluation from the definitions: per token `B = x W_B`,
/// `C = x W_C`, `Δ = softplus(x w_Δ + b)`, then
/// `h ← e^{ΔA} h + (e^{ΔA} - 1)/A · B x` and `y = C·h + skip·x`.
pub fn naive_selective_scan(x: &Tensor<f64>, p: &SsmParams<f64>) -> Vec<f64> {
    let (l, d) = (x.shape()[0], x.shape()[1]);
    let n = p.a_log.shape()[1];
    let xv = x.data();
    let mut h = vec![0.0; d * n];
    let mut y = vec![0.0; l * d];
    for t in 0..l {
        let row = &xv[t * d..(t + 1) * d];
        let proj = |w: &Tensor<f64>, s: usize| -> f64 { (0..d).map(|j| row[j] * w.at(&[j, s])).sum() };
        let b: Vec<f64> = (0..n).map(|s| proj(&p.w_b, s)).collect();
        let c: Vec<f64> = (0..n).map(|s| proj(&p.w_c, s)).collect();
        let pre = proj(&p.w_delta, 0);
        for ch in 0..d {
            let dt = softplus(pre + p.b_delta.at(&[ch]));
            let mut acc = 0.0;
            for s in 0..n {
                let a = -p.a_log.at(&[ch, s]).exp();
                let decay = (dt * a).exp();
                let hv = &mut h[ch * n + s];
                *hv = decay * *hv + (decay - 1.0) / a * b[s] * row[ch];
                acc += c[s] * *hv;
            }
            y[t * d + ch] = acc + p.skip.as_ref().map_or(0.0, |k| k.at(&[ch]) * row[ch]);
        }
    }
    y
}

/// `∫₀^Δ e^{a s} ds` by composite 8-point Gauss-Legendre on `panels` panels.
pub fn zoh_integral(dt: f64, a: f64, panels: usize) -> f64 {
    const NODES: [f64; 4] = [0.183_434_642_495_649_8, 0.525_532_409_916_329, 0.796_666_477_413_626_7, 0.960_289_856_497_536_3];
    const WEIGHTS: [f64; 4] = [0.362_683_783_378_362, 0.313_706_645_877_887_3, 0.222_381_034_453_374_5, 0.101_228_536_290_376_3];
    let h = dt / panels as f64;
    let mut total = 0.0;
    for k in 0..panels {
        let mid = (k as f64 + 0.5) * h;
        for (x, w) in NODES.iter().zip(WEIGHTS) {
            for sign in [-1.0, 1.0] {
                total += w * (a * (mid + sign * x * h / 2.0)).exp();
            }
        }
    }
    total * h / 2.0
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
