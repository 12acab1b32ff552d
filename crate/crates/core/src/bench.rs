//! Wall-clock scaling of the selective scan against naive self-attention.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::linear;
use crate::ssm::{s6_forward, ScanMode, SsmInit, SsmParams};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Token counts, strictly ascending.
    pub lengths: Vec<usize>,
    pub channels: usize,
    pub state: usize,
    pub reps: usize,
    /// Attention rows whose working set exceeds this are reported as OOM.
    pub memory_cap_bytes: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            lengths: vec![1024, 2048, 4096, 8192, 15360, 16384],
            channels: 16,
            state: 16,
            reps: 5,
            memory_cap_bytes: 512 << 20,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lengths.is_empty() || self.lengths.windows(2).any(|w| w[0] >= w[1]) || self.lengths[0] == 0 {
            return Err(Error::Config("bench.lengths must be positive and strictly ascending".into()));
        }
        if self.reps < 5 {
            return Err(Error::Config(format!("bench.reps must be at least 5, got {}", self.reps)));
        }
        if self.channels == 0 || self.state == 0 {
            return Err(Error::Config("bench.channels and bench.state must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub len: usize,
    pub scan_ms: f64,
    /// `None` when the score matrix would exceed the memory cap.
    pub attn_ms: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub scan_exponent: f64,
    /// Fitted over the rows that ran; `None` with fewer than two.
    pub attn_exponent: Option<f64>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("L,scan_ms,attn_ms\n");
        for r in &self.rows {
            let attn = r.attn_ms.map_or("OOM".to_string(), |a| format!("{a:.3}"));
            s.push_str(&format!("{},{:.3},{attn}\n", r.len, r.scan_ms));
        }
        s
    }
}

/// Bytes held at peak by [`naive_attention`]: Q, K, V, output and the
/// `L × L` score matrix.
pub fn attention_bytes(len: usize, d: usize) -> usize {
    (len * len + 4 * len * d) * std::mem::size_of::<f32>()
}

/// Single-head softmax attention with materialized scores; `x` is `[L, D]`,
/// projections `[D, D]`.
pub fn naive_attention(x: &Tensor<f32>, wq: &Tensor<f32>, wk: &Tensor<f32>, wv: &Tensor<f32>) -> Result<Tensor<f32>> {
    let q = linear(x, wq, None)?;
    let k = linear(x, wk, None)?;
    let v = linear(x, wv, None)?;
    let (l, d) = (q.shape()[0], q.shape()[1]);
    let mut kt = vec![0.0f32; d * l];
    for (i, row) in k.data().chunks_exact(d).enumerate() {
        for (j, &val) in row.iter().enumerate() {
            kt[j * l + i] = val;
        }
    }
    let mut scores = linear(&q, &Tensor::new(&[d, l], kt)?, None)?;
    let scale = 1.0 / (d as f32).sqrt();
    for row in scores.data_mut().chunks_exact_mut(l) {
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v * scale));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v * scale - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    linear(&scores, &v, None)
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn fit_exponent(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Median milliseconds of `f` over `reps` runs after one warm-up run.
fn time_ms(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    f()?;
    let mut t = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        f()?;
        t.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(median(t))
}

pub fn run_bench(cfg: &BenchConfig, mut on_row: impl FnMut(&BenchRow)) -> Result<BenchReport> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.channels;
    let params = SsmParams::<f32>::init(d, cfg.state, &SsmInit::default(), &mut rng);
    let std = 1.0 / (d as f64).sqrt();
    let [wq, wk, wv] = [0, 1, 2].map(|_| Tensor::randn(&[d, d], std, &mut rng));
    let mut rows = Vec::with_capacity(cfg.lengths.len());
    for &len in &cfg.lengths {
        let x = Tensor::randn(&[len, d], 1.0, &mut rng);
        let scan_ms = time_ms(cfg.reps, || s6_forward(&x, &params, ScanMode::Recurrent).map(drop))?;
        let attn_ms = if attention_bytes(len, d) > cfg.memory_cap_bytes {
            None
        } else {
            Some(time_ms(cfg.reps, || naive_attention(&x, &wq, &wk, &wv).map(drop))?)
        };
        let row = BenchRow { len, scan_ms, attn_ms };
        on_row(&row);
        rows.push(row);
    }
    let pts = |f: &dyn Fn(&BenchRow) -> Option<f64>| -> Vec<(f64, f64)> {
        rows.iter().filter_map(|r| f(r).map(|ms| (r.len as f64, ms))).collect()
    };
    let scan_exponent = fit_exponent(&pts(&|r| Some(r.scan_ms))).unwrap_or(f64::NAN);
    let attn_exponent = fit_exponent(&pts(&|r| r.attn_ms));
    Ok(BenchReport { rows, scan_exponent, attn_exponent })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponent_of_a_power_law_is_recovered() {
        let pts: Vec<(f64, f64)> = [1.0, 2.0, 4.0, 8.0].iter().map(|&x: &f64| (x, 3.0 * x.powf(1.7))).collect();
        assert!((fit_exponent(&pts).unwrap() - 1.7).abs() < 1e-12);
        assert!(fit_exponent(&pts[..1]).is_none());
    }

    #[test]
    fn median_of_odd_and_even_counts() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn attention_rows_sum_like_a_convex_combination() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[7, 4], 1.0, &mut rng);
        let eye = {
            let mut t = Tensor::zeros(&[4, 4]);
            (0..4).for_each(|i| t.set(&[i, i], 1.0));
            t
        };
        // constant values pass through any convex combination
        let ones = Tensor::full(&[7, 4], 1.0);
        let out = naive_attention(&ones, &eye, &eye, &eye).unwrap();
        assert!(out.data().iter().all(|v| (v - 1.0).abs() < 1e-6));
        let out = naive_attention(&x, &eye, &eye, &eye).unwrap();
        assert_eq!(out.shape(), &[7, 4]);
    }

    #[test]
    fn memory_cap_marks_rows_oom() {
        let cfg = BenchConfig { lengths: vec![64, 128, 256], reps: 5, memory_cap_bytes: attention_bytes(128, 16), ..Default::default() };
        let r = run_bench(&cfg, |_| {}).unwrap();
        let oom: Vec<bool> = r.rows.iter().map(|r| r.attn_ms.is_none()).collect();
        assert_eq!(oom, [false, false, true]);
        assert!(r.to_csv().lines().nth(3).unwrap().ends_with(",OOM"));
        assert_eq!(r.to_csv().lines().count(), 4);
    }

    #[test]
    fn unsorted_lengths_are_rejected() {
        let cfg = BenchConfig { lengths: vec![128, 64], ..Default::default() };
        assert!(matches!(run_bench(&cfg, |_| {}), Err(Error::Config(_))));
    }
}
