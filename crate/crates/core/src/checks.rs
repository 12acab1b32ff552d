//! The 64-bit finite-difference suite behind `gradcheck`, at operator, block
//! and model granularity.

use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{wsts_apply, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::gradcheck::{finite_diff_check, GradCheckConfig};
use crate::ops::{Broadcast, Padding, LAYER_NORM_EPS, ZERO_ROW};
use crate::params::{Bound, ParamStore};
use crate::pipeline::heatmap_loss;
use crate::routes::WindowSpec;
use crate::ssm::SsmVars;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const GRAD_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Op,
    Block,
    Model,
}

impl FromStr for Scope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "op" => Ok(Scope::Op),
            "block" => Ok(Scope::Block),
            "model" => Ok(Scope::Model),
            _ => Err(Error::Config(format!("unknown gradcheck scope {s:?}; expected op, block or model"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub max_rel: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel <= GRAD_TOLERANCE
    }
}

/// The toy configuration used for block and model checks.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        in_channels: 6,
        channels: 16,
        state: 8,
        frames: 3,
        height: 8,
        width: 6,
        keypoints: 3,
        gsm_blocks: 1,
        lrm_blocks: 1,
        window: WindowSpec { wh: 4, ww: 3 },
        ..ModelConfig::default()
    }
}

struct Inputs(ChaCha8Rng);

impl Inputs {
    fn randn(&mut self, shape: &[usize], std: f64) -> Tensor<f64> {
        Tensor::randn(shape, std, &mut self.0)
    }

    fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        Tensor::uniform(shape, lo, hi, &mut self.0)
    }
}

/// `Σ y ⊙ w` with fixed pseudo-random `w`, so errors of either sign show.
fn probe(t: &mut Tape<f64>, y: Var) -> Result<Var> {
    let w = Tensor::randn(t.shape(y), 1.0, &mut ChaCha8Rng::seed_from_u64(0x5eed));
    let w = t.constant(w);
    let m = t.mul(y, w)?;
    Ok(t.sum(m))
}

fn check<G>(name: &str, f: G, inputs: &[Tensor<f64>], seed: u64) -> Result<CheckResult>
where
    G: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let cfg = GradCheckConfig { seed, ..GradCheckConfig::default() };
    let r = finite_diff_check(|t, v| f(t, v).and_then(|y| probe(t, y)), inputs, &cfg)?;
    Ok(CheckResult { name: name.into(), max_rel: r.max_rel_error() })
}

fn op_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut r = Inputs(ChaCha8Rng::seed_from_u64(seed));
    let mut out = Vec::new();
    let mut push = |c: Result<CheckResult>| c.map(|c| out.push(c));

    push(check("linear", |t, v| t.linear(v[0], v[1], Some(v[2])), &[r.randn(&[5, 4], 1.0), r.randn(&[4, 3], 1.0), r.randn(&[3], 1.0)], seed))?;
    push(check(
        "conv2d",
        |t, v| t.conv2d(v[0], v[1], Some(v[2]), Padding::Same, false),
        &[r.randn(&[2, 5, 4, 3], 1.0), r.randn(&[3, 3, 3, 4], 0.5), r.randn(&[4], 1.0)],
        seed,
    ))?;
    push(check(
        "conv2d_depthwise",
        |t, v| t.conv2d(v[0], v[1], Some(v[2]), Padding::Same, true),
        &[r.randn(&[2, 5, 4, 3], 1.0), r.randn(&[3, 3, 1, 3], 0.5), r.randn(&[3], 1.0)],
        seed,
    ))?;
    push(check(
        "deform_conv2d",
        |t, v| t.deform_conv2d(v[0], v[1], v[2], v[3]),
        &[r.randn(&[1, 5, 4, 3], 1.0), r.randn(&[1, 5, 4, 18], 0.7), r.uniform(&[1, 5, 4, 9], 0.1, 0.9), r.randn(&[3, 3, 3, 2], 0.5)],
        seed,
    ))?;
    push(check(
        "layer_norm",
        |t, v| t.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS),
        &[r.randn(&[6, 5], 1.0), r.randn(&[5], 1.0), r.randn(&[5], 1.0)],
        seed,
    ))?;
    push(check("mean_mid", |t, v| t.mean_mid(v[0], [2, 3, 4]), &[r.randn(&[2, 3, 4], 1.0)], seed))?;
    push(check("sum_over_frames", |t, v| t.sum_over_frames(v[0]), &[r.randn(&[3, 2, 2, 2], 1.0)], seed))?;
    for (name, kind) in [("broadcast_add", Broadcast::Add), ("broadcast_mul", Broadcast::Mul)] {
        push(check(name, move |t, v| t.broadcast(v[0], v[1], [2, 3, 4], kind), &[r.randn(&[2, 3, 4], 1.0), r.randn(&[2, 4], 1.0)], seed))?;
    }
    push(check("concat_last", |t, v| t.concat_last(v[0], v[1]), &[r.randn(&[3, 2], 1.0), r.randn(&[3, 4], 1.0)], seed))?;
    push(check("transpose", |t, v| t.transpose(v[0]), &[r.randn(&[3, 5], 1.0)], seed))?;
    let idx = Arc::new(vec![2, ZERO_ROW, 0, 3, 3]);
    push(check("gather_rows", move |t, v| t.gather_rows(v[0], 3, idx.clone()), &[r.randn(&[4, 3], 1.0)], seed))?;
    let pair = [r.randn(&[3, 4], 1.0), r.randn(&[3, 4], 1.0)];
    push(check("add", |t, v| t.add(v[0], v[1]), &pair, seed))?;
    push(check("sub", |t, v| t.sub(v[0], v[1]), &pair, seed))?;
    push(check("mul", |t, v| t.mul(v[0], v[1]), &pair, seed))?;
    let x = [r.randn(&[3, 4], 2.0)];
    push(check("scale", |t, v| Ok(t.scale(v[0], -1.7)), &x, seed))?;
    push(check("sigmoid", |t, v| Ok(t.sigmoid(v[0])), &x, seed))?;
    push(check("silu", |t, v| Ok(t.silu(v[0])), &x, seed))?;
    push(check("softplus", |t, v| Ok(t.softplus(v[0])), &x, seed))?;
    push(check("neg_exp", |t, v| Ok(t.neg_exp(v[0])), &x, seed))?;
    push(check(
        "selective_scan",
        |t, v| {
            let p = SsmVars { a_log: v[1], w_b: v[2], w_c: v[3], w_delta: v[4], b_delta: v[5], skip: Some(v[6]) };
            t.selective_scan(v[0], &p, 6)
        },
        &[
            r.randn(&[12, 4], 1.0),
            r.uniform(&[4, 3], -0.7, 1.0),
            r.randn(&[4, 3], 0.5),
            r.randn(&[4, 3], 0.5),
            r.randn(&[4, 1], 0.5),
            r.uniform(&[4], -3.0, -1.0),
            r.randn(&[4], 1.0),
        ],
        seed,
    ))?;
    let target = r.randn(&[2, 3, 4], 1.0);
    push(check("heatmap_loss", move |t, v| heatmap_loss(t, v[0], &target, &[true, false]), &[r.randn(&[2, 3, 4], 1.0)], seed))?;
    Ok(out)
}

/// Toy model with its f64 parameters; the modulation generators are moved off
/// their zero init so the offsets are fractional.
fn toy(seed: u64) -> Result<(Model, ParamStore<f64>)> {
    let (m, s) = Model::new(&toy_model_config(), seed)?;
    let mut store: ParamStore<f64> = s.cast();
    let mut r = Inputs(ChaCha8Rng::seed_from_u64(seed ^ 0xdc));
    let d = m.cfg.channels;
    for b in &m.gsm {
        for stage in b.stmm.iter().flat_map(|s| [s.spatial, s.temporal]).flatten() {
            *store.get_mut(stage.offset_kernel) = r.randn(&[3, 3, 2 * d, 18], 0.05);
            *store.get_mut(stage.mask_kernel) = r.randn(&[3, 3, 2 * d, 9], 0.05);
        }
    }
    // nonzero head so its gradient path is exercised at full scale
    *store.get_mut(m.head.kernel) = r.randn(&[3, 3, d, m.cfg.keypoints], 0.1);
    Ok((m, store))
}

/// Checks `f` with every parameter and then the input as gradient inputs.
fn check_with_params(
    name: &str,
    store: &ParamStore<f64>,
    input: Tensor<f64>,
    seed: u64,
    f: impl Fn(&mut Tape<f64>, &Bound, Var) -> Result<Var>,
) -> Result<CheckResult> {
    let mut inputs = store.values().to_vec();
    let n = inputs.len();
    inputs.push(input);
    check(name, |t, v| f(t, &Bound::from_vars(v[..n].to_vec()), v[n]), &inputs, seed)
}

fn block_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let (m, store) = toy(seed)?;
    let mut r = Inputs(ChaCha8Rng::seed_from_u64(seed ^ 0xb1));
    let c = &m.cfg;
    let x = || Tensor::randn(&[c.frames, c.height, c.width, c.channels], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    let g = &m.gsm[0];
    let l = &m.lrm[0];
    let stmm = g.stmm.ok_or_else(|| Error::Config("toy model has no modulation stages".into()))?;
    let stage = stmm.spatial.ok_or_else(|| Error::Config("toy model lacks the spatial stage".into()))?;
    let guide = r.randn(&[c.frames, c.height, c.width, c.channels], 1.0);
    Ok(vec![
        check_with_params(
            "embeddings",
            &store,
            r.randn(&[c.frames, c.height, c.width, c.in_channels], 1.0),
            seed,
            |t, p, v| m.embed.apply(t, p, v),
        )?,
        check_with_params("channel_attention", &store, x(), seed, |t, p, v| g.attention.apply(t, p, v))?,
        check_with_params("gated_stream", &store, x(), seed, |t, p, v| g.gate.apply(t, p, v))?,
        check_with_params("stmm_stage", &store, x(), seed, |t, p, v| {
            let gd = t.constant(guide.clone());
            stage.apply(t, p, v, gd)
        })?,
        check_with_params("gsm_block", &store, x(), seed, |t, p, v| g.apply(t, p, v, &m.routes, true))?,
        check_with_params("wsts", &store, x(), seed, |t, p, v| wsts_apply(t, v, &m.windows, &l.forward.vars(p), &l.reverse.vars(p)))?,
        check_with_params("lrm_block", &store, x(), seed, |t, p, v| l.apply(t, p, v, &m.windows, true))?,
        check_with_params("detection_head", &store, x(), seed, |t, p, v| m.head.apply(t, p, v))?,
    ])
}

fn model_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let (m, store) = toy(seed)?;
    let c = &m.cfg;
    let input = Tensor::randn(&[c.frames, c.height, c.width, c.in_channels], 1.0, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x70));
    let target = Tensor::uniform(&[c.keypoints, c.height, c.width], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x71));
    let vis = vec![true; c.keypoints];
    Ok(vec![
        check_with_params("toy_model", &store, input.clone(), seed, |t, p, v| m.forward(t, p, v))?,
        check_with_params("toy_model_loss", &store, input, seed, |t, p, v| {
            let y = m.forward(t, p, v)?;
            heatmap_loss(t, y, &target, &vis)
        })?,
    ])
}

pub fn run_gradchecks(scope: Scope, seed: u64) -> Result<Vec<CheckResult>> {
    match scope {
        Scope::Op => op_checks(seed),
        Scope::Block => block_checks(seed),
        Scope::Model => model_checks(seed),
    }
}
