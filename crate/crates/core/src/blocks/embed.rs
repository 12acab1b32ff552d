use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::Broadcast;
use crate::params::{Bound, ParamId};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::layers::{Init, Linear};

/// Fixed 2D sine-cosine table `[h, w, D]`: the first half of the channels
/// encodes `y`, the second half `x`, each as `D/4` sines followed by `D/4`
/// cosines at frequencies `10000^{-i/(D/4)}`.
pub fn sincos_2d(h: usize, w: usize, d: usize) -> Result<Tensor<f32>> {
    if d == 0 || d % 4 != 0 {
        return Err(Error::Config(format!("spatial embedding needs channels divisible by 4, got {d}")));
    }
    let q = d / 4;
    let freq: Vec<f64> = (0..q).map(|i| 10000f64.powf(-(i as f64) / q as f64)).collect();
    let mut out = Vec::with_capacity(h * w * d);
    for y in 0..h {
        for x in 0..w {
            for pos in [y as f64, x as f64] {
                out.extend(freq.iter().map(|f| (pos * f).sin() as f32));
                out.extend(freq.iter().map(|f| (pos * f).cos() as f32));
            }
        }
    }
    Tensor::new(&[h, w, d], out)
}

/// Input projection plus spatial and temporal embeddings.
#[derive(Clone, Debug)]
pub struct Embeddings {
    pub proj: Linear,
    /// Learnable `[T, D]`.
    pub temporal: ParamId,
    /// Fixed `[h, w, D]`.
    pub spatial: Tensor<f32>,
}

impl Embeddings {
    pub fn init<R: Rng>(init: &mut Init<'_, R>, din: usize, d: usize, t: usize, h: usize, w: usize) -> Result<Self> {
        let spatial = sincos_2d(h, w, d)?;
        Ok(init.scoped("embed", |s| Embeddings {
            proj: s.linear("proj", din, d),
            temporal: s.randn("temporal", &[t, d], 0.02),
            spatial,
        }))
    }

    /// `Linear(x) + E_spa + E_tem` for `x` of shape `[T, h, w, Din]`.
    pub fn apply<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let [t, h, w, _] = s[..] else {
            return Err(Error::dim("embed", format!("expected [T, h, w, Din], got {s:?}")));
        };
        if self.spatial.shape()[..2] != [h, w] || tape.shape(p[self.temporal])[0] != t {
            return Err(Error::dim(
                "embed",
                format!("input {s:?} against embeddings for {:?}", &self.spatial.shape()[..2]),
            ));
        }
        let d = self.spatial.last_dim();
        let y = self.proj.apply(tape, p, x)?;
        let y = tape.broadcast(y, p[self.temporal], [t, h * w, d], Broadcast::Add)?;
        let spa = tape.constant(self.spatial.cast());
        tape.broadcast(y, spa, [1, t, h * w * d], Broadcast::Add)
    }
}
