use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Argmax `(y, x)` of every `[h, w]` map in `[K, h, w]`; ties go to the
/// smallest row-major index.
pub fn decode_heatmaps(maps: &Tensor<f32>) -> Result<Vec<(usize, usize)>> {
    let &[_, h, w] = maps.shape() else {
        return Err(Error::dim("decode_heatmaps", format!("expected [K, h, w], got {:?}", maps.shape())));
    };
    Ok(maps
        .data()
        .chunks_exact(h * w)
        .map(|m| {
            let mut best = 0;
            for (i, &v) in m.iter().enumerate() {
                if v > m[best] {
                    best = i;
                }
            }
            (best / w, best % w)
        })
        .collect())
}

/// Per-keypoint hit counts over visible keypoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PckTally {
    pub hits: Vec<usize>,
    pub totals: Vec<usize>,
}

impl PckTally {
    pub fn new(k: usize) -> Self {
        PckTally { hits: vec![0; k], totals: vec![0; k] }
    }

    /// Scores one sample: a hit lies within `tau · diag` of the truth.
    pub fn add(&mut self, maps: &Tensor<f32>, truth: &[[f64; 2]], visible: &[bool], tau: f64) -> Result<()> {
        if !(tau > 0.0) {
            return Err(Error::Config(format!("PCK threshold must be positive, got {tau}")));
        }
        let pred = decode_heatmaps(maps)?;
        if pred.len() != truth.len() || truth.len() != visible.len() || pred.len() != self.hits.len() {
            return Err(Error::dim("pck", format!("{} maps, {} keypoints, tally of {}", pred.len(), truth.len(), self.hits.len())));
        }
        let (h, w) = (maps.shape()[1] as f64, maps.shape()[2] as f64);
        let radius = tau * (h * h + w * w).sqrt();
        for (k, ((&(py, px), t), &v)) in pred.iter().zip(truth).zip(visible).enumerate() {
            if v {
                self.totals[k] += 1;
                if (py as f64 - t[0]).hypot(px as f64 - t[1]) <= radius {
                    self.hits[k] += 1;
                }
            }
        }
        Ok(())
    }

    pub fn per_keypoint(&self) -> Vec<f64> {
        self.hits.iter().zip(&self.totals).map(|(&h, &t)| if t == 0 { 0.0 } else { h as f64 / t as f64 }).collect()
    }

    /// Fraction of all visible keypoints that hit; 0 when none were visible.
    pub fn mean(&self) -> f64 {
        let t: usize = self.totals.iter().sum();
        if t == 0 {
            0.0
        } else {
            self.hits.iter().sum::<usize>() as f64 / t as f64
        }
    }
}

/// PCK of one `[K, h, w]` prediction.
pub fn decode_and_pck(maps: &Tensor<f32>, truth: &[[f64; 2]], visible: &[bool], tau: f64) -> Result<f64> {
    let mut tally = PckTally::new(truth.len());
    tally.add(maps, truth, visible, tau)?;
    Ok(tally.mean())
}
