//! Local refinement block: windowed space-time scanning.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId};
use crate::real::Real;
use crate::routes::{Direction, WindowLayout};
use crate::ssm::{SsmHandles, SsmInit, SsmParams, SsmVars};
use crate::tape::{Tape, Var};

use super::layers::{merge_streams, Ffn, GatedStream, Init, Norm};

/// Scans every tubelet forward and in reverse with separate parameters and sums
/// the two results back on the grid. `z` is `[T, h, w, D]`.
pub fn wsts_apply<F: Real>(
    tape: &mut Tape<F>,
    z: Var,
    windows: &WindowLayout,
    forward: &SsmVars,
    reverse: &SsmVars,
) -> Result<Var> {
    let s = tape.shape(z).to_vec();
    let g = windows.grid;
    if s.len() != 4 || s[..3] != [g.t, g.h, g.w] {
        return Err(Error::Layout(format!("{s:?} against windows for {g:?}")));
    }
    let d = s[3];
    let mut merged = None;
    for (dir, order, vars) in
        [(Direction::Forward, windows.forward(), forward), (Direction::Reverse, windows.reverse(), reverse)]
    {
        let tokens = tape.gather_rows(z, d, order.clone())?;
        let y = tape.selective_scan(tokens, vars, windows.segment)?;
        let back = tape.gather_rows(y, d, windows.back(dir).clone())?;
        merged = Some(match merged {
            Some(acc) => tape.add(acc, back)?,
            None => back,
        });
    }
    tape.reshape(merged.unwrap(), &s)
}

#[derive(Clone, Debug)]
pub struct LrmBlock {
    pub norm: Norm,
    pub forward: SsmHandles,
    pub reverse: SsmHandles,
    pub gate: GatedStream,
    pub ffn: Ffn,
}

impl LrmBlock {
    pub fn init<R: Rng>(init: &mut Init<'_, R>, name: &str, d: usize, n: usize, expansion: usize, ssm: &SsmInit) -> Self {
        init.scoped(name, |b| {
            let norm = b.norm("norm", d);
            let fwd_name = b.name("ssm.forward");
            let forward = SsmParams::<f32>::init(d, n, ssm, b.rng).register(b.store, &fwd_name);
            let rev_name = b.name("ssm.reverse");
            let reverse = SsmParams::<f32>::init(d, n, ssm, b.rng).register(b.store, &rev_name);
            LrmBlock { norm, forward, reverse, gate: GatedStream::init(b, d), ffn: Ffn::init(b, d, expansion) }
        })
    }

    pub fn main_stream<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, x: Var, windows: &WindowLayout) -> Result<Var> {
        let z = self.norm.apply_silu(tape, p, x)?;
        wsts_apply(tape, z, windows, &self.forward.vars(p), &self.reverse.vars(p))
    }

    pub fn apply<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, x: Var, windows: &WindowLayout, residual: bool) -> Result<Var> {
        let main = self.main_stream(tape, p, x, windows)?;
        let gate = self.gate.apply(tape, p, x)?;
        merge_streams(tape, p, x, main, gate, &self.ffn, residual)
    }
}

pub const HEAD_INIT_STD: f64 = 1e-3;

/// Frame sum followed by a same-size 3×3 convolution to `K` heatmaps.
#[derive(Clone, Copy, Debug)]
pub struct DetectionHead {
    pub kernel: ParamId,
    pub bias: ParamId,
}

impl DetectionHead {
    pub fn init<R: Rng>(init: &mut Init<'_, R>, d: usize, k: usize) -> Self {
        init.scoped("head", |s| DetectionHead {
            // small final-layer init, as is usual for heatmap heads
            kernel: s.randn("kernel", &[3, 3, d, k], HEAD_INIT_STD),
            bias: s.param("bias", crate::tensor::Tensor::zeros(&[k])),
        })
    }

    /// `[T, h, w, D]` → `[K, h, w]`.
    pub fn apply<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let [_, h, w, d] = s[..] else {
            return Err(Error::dim("detection_head", format!("expected [T, h, w, D], got {s:?}")));
        };
        let frame = tape.sum_over_frames(x)?;
        let frame = tape.reshape(frame, &[1, h, w, d])?;
        let maps = tape.conv2d(frame, p[self.kernel], Some(p[self.bias]), crate::ops::Padding::Same, false)?;
        let k = tape.shape(maps)[3];
        let maps = tape.reshape(maps, &[h * w, k])?;
        let maps = tape.transpose(maps)?;
        tape.reshape(maps, &[k, h, w])
    }
}
