//! Global block: channel attention, six-route scanning, modulated merging.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::{Broadcast, Padding};
use crate::params::{Bound, ParamId};
use crate::real::Real;
use crate::routes::{Direction, RouteKind, RouteLayout};
use crate::ssm::{SsmHandles, SsmInit, SsmParams, SsmVars};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::layers::{merge_streams, Ffn, GatedStream, Init, Linear, Norm};

/// A route layout with its inverse gather index.
#[derive(Clone, Debug)]
pub struct RoutePlan {
    pub layout: RouteLayout,
    pub inverse: Arc<Vec<usize>>,
}

impl RoutePlan {
    pub fn new(layout: RouteLayout) -> Self {
        let inverse = layout.inverse();
        RoutePlan { layout, inverse }
    }
}

fn frame_dims<F: Real>(tape: &Tape<F>, x: Var, op: &'static str) -> Result<[usize; 4]> {
    match *tape.shape(x) {
        [t, h, w, d] => Ok([t, h, w, d]),
        ref s => Err(Error::dim(op, format!("expected [T, h, w, D], got {s:?}"))),
    }
}

/// Frame-wise channel descriptors → per-frame channel MLP → mixing across
/// frames per channel → sigmoid weights that rescale the input.
#[derive(Clone, Copy, Debug)]
pub struct ChannelAttention {
    pub squeeze: Linear,
    pub excite: Linear,
    pub temporal: Linear,
}

impl ChannelAttention {
    pub fn init<R: Rng>(init: &mut Init<'_, R>, d: usize, t: usize, reduction: usize) -> Self {
        init.scoped("attention", |s| {
            let mut eye = Tensor::zeros(&[t, t]);
            for i in 0..t {
                eye.set(&[i, i], 1.0);
            }
            ChannelAttention {
                squeeze: s.linear("squeeze", d, d / reduction),
                excite: s.linear("excite", d / reduction, d),
                temporal: s.scoped("temporal", |s| Linear {
                    w: s.param("w", eye),
                    b: Some(s.param("b", Tensor::zeros(&[t]))),
                }),
            }
        })
    }

    /// Attention weights `[T, D]` in `(0, 1)`.
    pub fn weights<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        let [t, h, w, d] = frame_dims(tape, x, "channel_attention")?;
        let gap = tape.mean_mid(x, [t, h * w, d])?;
        let z = self.squeeze.apply(tape, p, gap)?;
        let z = tape.silu(z);
        let z = self.excite.apply(tape, p, z)?;
        let zt = tape.transpose(z)?;
        let zt = self.temporal.apply(tape, p, zt)?;
        let z = tape.transpose(zt)?;
        Ok(tape.sigmoid(z))
    }

    pub fn apply<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        let [t, h, w, d] = frame_dims(tape, x, "channel_attention")?;
        let m = self.weights(tape, p, x)?;
        tape.broadcast(x, m, [t, h * w, d], Broadcast::Mul)
    }
}

/// Six selective scans, one per route; returns the route-ordered outputs.
pub fn sts6d_apply<F: Real>(tape: &mut Tape<F>, z: Var, routes: &[RoutePlan], ssm: &[SsmVars]) -> Result<Vec<Var>> {
    if routes.len() != ssm.len() {
        return Err(Error::Config(format!("{} routes but {} scan parameter sets", routes.len(), ssm.len())));
    }
    routes
        .iter()
        .zip(ssm)
        .map(|(r, vars)| {
            let tokens = tape.flatten_route(z, &r.layout)?;
            tape.selective_scan(tokens, vars, r.layout.len())
        })
        .collect()
}

/// Offset and modulation generators over a concatenated pair, and the
/// deformable kernel they steer.
#[derive(Clone, Copy, Debug)]
pub struct ModulationStage {
    pub offset_kernel: ParamId,
    pub offset_bias: ParamId,
    pub mask_kernel: ParamId,
    pub mask_bias: ParamId,
    pub kernel: ParamId,
}

impl ModulationStage {
    pub const TAPS: usize = 9;

    pub fn init<R: Rng>(init: &mut Init<'_, R>, name: &str, d: usize) -> Self {
        init.scoped(name, |s| ModulationStage {
            offset_kernel: s.param("offset_kernel", Tensor::zeros(&[3, 3, 2 * d, 2 * Self::TAPS])),
            offset_bias: s.param("offset_bias", Tensor::zeros(&[2 * Self::TAPS])),
            mask_kernel: s.param("mask_kernel", Tensor::zeros(&[3, 3, 2 * d, Self::TAPS])),
            // sigmoid(0) = 0.5
            mask_bias: s.param("mask_bias", Tensor::zeros(&[Self::TAPS])),
            kernel: s.randn("kernel", &[3, 3, d, d], 0.5 / (9.0 * d as f64).sqrt()),
        })
    }

    /// `base + DCN(base, O, W)` with `O`, `W` generated from `[base; guide]`.
    pub fn apply<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, base: Var, guide: Var) -> Result<Var> {
        let cat = tape.concat_last(base, guide)?;
        let off = tape.conv2d(cat, p[self.offset_kernel], Some(p[self.offset_bias]), Padding::Same, false)?;
        let mask = tape.conv2d(cat, p[self.mask_kernel], Some(p[self.mask_bias]), Padding::Same, false)?;
        let mask = tape.sigmoid(mask);
        let dcn = tape.deform_conv2d(base, off, mask, p[self.kernel])?;
        tape.add(base, dcn)
    }
}

/// Spatial then temporal modulation stages; a stage is absent when its route
/// kind is not scanned.
#[derive(Clone, Copy, Debug)]
pub struct Stmm {
    pub spatial: Option<ModulationStage>,
    pub temporal: Option<ModulationStage>,
}

/// Inverts every route output onto the grid, adds same-kind pairs, and merges
/// the kinds: through the modulation stages when `stmm` is given, by plain
/// addition otherwise.
pub fn stmm_merge<F: Real>(
    tape: &mut Tape<F>,
    p: &Bound,
    outputs: &[Var],
    routes: &[RoutePlan],
    stmm: Option<&Stmm>,
) -> Result<Var> {
    let mut kinds: [Option<Var>; 3] = [None; 3];
    for (&y, r) in outputs.iter().zip(routes) {
        let grid = tape.invert_route(y, &r.layout, r.inverse.clone())?;
        let slot = &mut kinds[r.layout.id.kind as usize];
        *slot = Some(match *slot {
            Some(acc) => tape.add(acc, grid)?,
            None => grid,
        });
    }
    let [unified, space, time] = kinds;
    let Some(mut out) = unified else {
        return Err(Error::Config("the unified route is required".into()));
    };
    match stmm {
        Some(stmm) => {
            if let (Some(stage), Some(s)) = (&stmm.spatial, space) {
                out = stage.apply(tape, p, out, s)?;
            }
            if let (Some(stage), Some(t)) = (&stmm.temporal, time) {
                out = stage.apply(tape, p, out, t)?;
            }
        }
        None => {
            for other in [space, time].into_iter().flatten() {
                out = tape.add(out, other)?;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct GsmBlock {
    pub attention: ChannelAttention,
    pub norm: Norm,
    /// One scan per route, aligned with the route plans.
    pub ssm: Vec<SsmHandles>,
    pub stmm: Option<Stmm>,
    pub gate: GatedStream,
    pub ffn: Ffn,
}

pub struct GsmShape<'a> {
    pub d: usize,
    pub n: usize,
    pub t: usize,
    pub reduction: usize,
    pub expansion: usize,
    pub routes: &'a [RoutePlan],
    pub stmm: bool,
    pub ssm: &'a SsmInit,
}

impl GsmBlock {
    pub fn init<R: Rng>(init: &mut Init<'_, R>, name: &str, s: &GsmShape<'_>) -> Self {
        init.scoped(name, |b| {
            let attention = ChannelAttention::init(b, s.d, s.t, s.reduction);
            let norm = b.norm("norm", s.d);
            let ssm = s
                .routes
                .iter()
                .map(|r| {
                    let prefix = b.name(&format!("ssm.{}", r.layout.id.name()));
                    SsmParams::<f32>::init(s.d, s.n, s.ssm, b.rng).register(b.store, &prefix)
                })
                .collect();
            let has = |k: RouteKind| s.routes.iter().any(|r| r.layout.id.kind == k && r.layout.id.dir == Direction::Forward);
            let stmm = s.stmm.then(|| Stmm {
                spatial: has(RouteKind::SpaceV).then(|| ModulationStage::init(b, "stmm.spatial", s.d)),
                temporal: has(RouteKind::TimeDepth).then(|| ModulationStage::init(b, "stmm.temporal", s.d)),
            });
            GsmBlock { attention, norm, ssm, stmm, gate: GatedStream::init(b, s.d), ffn: Ffn::init(b, s.d, s.expansion) }
        })
    }

    /// The main stream up to the merged scan output `F̃`.
    pub fn main_stream<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, x: Var, routes: &[RoutePlan]) -> Result<Var> {
        let a = self.attention.apply(tape, p, x)?;
        let z = self.norm.apply_silu(tape, p, a)?;
        let vars: Vec<SsmVars> = self.ssm.iter().map(|h| h.vars(p)).collect();
        let outs = sts6d_apply(tape, z, routes, &vars)?;
        stmm_merge(tape, p, &outs, routes, self.stmm.as_ref())
    }

    pub fn apply<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, x: Var, routes: &[RoutePlan], residual: bool) -> Result<Var> {
        let main = self.main_stream(tape, p, x, routes)?;
        let gate = self.gate.apply(tape, p, x)?;
        merge_streams(tape, p, x, main, gate, &self.ffn, residual)
    }
}
