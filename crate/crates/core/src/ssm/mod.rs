//! Selective state-space operator.
//!
//! The state matrix is diagonal per channel: every channel `d` carries `N`
//! independent first-order systems with decay `A[d, n] < 0`. Per token `l`,
//! input-dependent `B_l`, `C_l`, `Δ_l` are projected from the token itself,
//! discretized with a zero-order hold, and scanned:
//!
//! ```text
//! h_l = exp(Δ_l A) ⊙ h_{l-1} + B̄_l x_l,      y_l = ⟨C_l, h_l⟩ + skip ⊙ x_l
//! ```

mod fused;
mod scan;
mod selective;
mod zoh;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub use fused::SsmVars;
pub use scan::{ssm_parallel_scan, ssm_recurrent};
pub use selective::{s6_forward, selective_parameters, ScanMode, SelectiveParams};
pub use zoh::{zoh_discretize, zoh_input_gain, DiscretizedParams, SERIES_THRESHOLD};

/// Initialization ranges for [`SsmParams::init`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsmInit {
    /// `-A` is drawn log-uniformly from `[a_min, N]`.
    pub a_min: f64,
    /// Initial step sizes are drawn log-uniformly from this range.
    pub dt_min: f64,
    pub dt_max: f64,
    /// Learnable per-channel skip term, initialized to 1.
    pub skip: bool,
}

impl Default for SsmInit {
    fn default() -> Self {
        SsmInit { a_min: 0.5, dt_min: 0.01, dt_max: 0.1, skip: true }
    }
}

/// Parameters of one selective scan over `D` channels with state size `N`.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams<F: Real = f32> {
    /// `[D, N]`; the realized decay is `A = -exp(a_log)`.
    pub a_log: Tensor<F>,
    /// `[D, N]` projection of a token to `B_l ∈ R^N`.
    pub w_b: Tensor<F>,
    /// `[D, N]` projection of a token to `C_l ∈ R^N`.
    pub w_c: Tensor<F>,
    /// `[D, 1]` projection of a token to the shared step pre-activation.
    pub w_delta: Tensor<F>,
    /// `[D]` per-channel step bias.
    pub b_delta: Tensor<F>,
    /// `[D]` residual gain on the input.
    pub skip: Option<Tensor<F>>,
}

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl<F: Real> SsmParams<F> {
    pub fn init<R: Rng + ?Sized>(d: usize, n: usize, cfg: &SsmInit, rng: &mut R) -> Self {
        let (lo, hi) = (cfg.a_min.ln(), (n as f64).max(cfg.a_min * 1.0001).ln());
        let mut a_log = Tensor::zeros(&[d, n]);
        for v in a_log.data_mut() {
            *v = F::of(rng.gen_range(lo..hi));
        }
        let mut b_delta = Tensor::zeros(&[d]);
        for v in b_delta.data_mut() {
            let dt = rng.gen_range(cfg.dt_min.ln()..cfg.dt_max.ln()).exp();
            *v = F::of(inverse_softplus(dt));
        }
        let scale = 1.0 / (d as f64).sqrt();
        SsmParams {
            a_log,
            w_b: Tensor::randn(&[d, n], scale, rng),
            w_c: Tensor::randn(&[d, n], scale, rng),
            w_delta: Tensor::randn(&[d, 1], 0.1 * scale, rng),
            b_delta,
            skip: cfg.skip.then(|| Tensor::ones(&[d])),
        }
    }

    pub fn channels(&self) -> usize {
        self.a_log.shape()[0]
    }

    pub fn state_size(&self) -> usize {
        self.a_log.shape()[1]
    }

    /// `A = -exp(a_log)`, strictly negative.
    pub fn realized_a(&self) -> Tensor<F> {
        self.a_log.map(|v| -v.exp())
    }

    pub fn cast<G: Real>(&self) -> SsmParams<G> {
        SsmParams {
            a_log: self.a_log.cast(),
            w_b: self.w_b.cast(),
            w_c: self.w_c.cast(),
            w_delta: self.w_delta.cast(),
            b_delta: self.b_delta.cast(),
            skip: self.skip.as_ref().map(Tensor::cast),
        }
    }

    /// Moves the parameters into `store` under `prefix.*`.
    pub fn register(self, store: &mut ParamStore<F>, prefix: &str) -> SsmHandles {
        SsmHandles {
            a_log: store.register(format!("{prefix}.a_log"), self.a_log),
            w_b: store.register(format!("{prefix}.w_b"), self.w_b),
            w_c: store.register(format!("{prefix}.w_c"), self.w_c),
            w_delta: store.register(format!("{prefix}.w_delta"), self.w_delta),
            b_delta: store.register(format!("{prefix}.b_delta"), self.b_delta),
            skip: self.skip.map(|s| store.register(format!("{prefix}.skip"), s)),
        }
    }

    /// Records the parameters as trainable leaves.
    pub fn bind(&self, tape: &mut Tape<F>) -> SsmVars {
        SsmVars {
            a_log: tape.param(self.a_log.clone()),
            w_b: tape.param(self.w_b.clone()),
            w_c: tape.param(self.w_c.clone()),
            w_delta: tape.param(self.w_delta.clone()),
            b_delta: tape.param(self.b_delta.clone()),
            skip: self.skip.as_ref().map(|s| tape.param(s.clone())),
        }
    }
}

/// Registry handles of one scan's parameters.
#[derive(Clone, Copy, Debug)]
pub struct SsmHandles {
    pub a_log: ParamId,
    pub w_b: ParamId,
    pub w_c: ParamId,
    pub w_delta: ParamId,
    pub b_delta: ParamId,
    pub skip: Option<ParamId>,
}

impl SsmHandles {
    pub fn resolve<F: Real>(&self, store: &ParamStore<F>) -> SsmParams<F> {
        SsmParams {
            a_log: store.get(self.a_log).clone(),
            w_b: store.get(self.w_b).clone(),
            w_c: store.get(self.w_c).clone(),
            w_delta: store.get(self.w_delta).clone(),
            b_delta: store.get(self.b_delta).clone(),
            skip: self.skip.map(|s| store.get(s).clone()),
        }
    }

    pub fn vars(&self, bound: &crate::params::Bound) -> SsmVars {
        SsmVars {
            a_log: bound[self.a_log],
            w_b: bound[self.w_b],
            w_c: bound[self.w_c],
            w_delta: bound[self.w_delta],
            b_delta: bound[self.b_delta],
            skip: self.skip.map(|s| bound[s]),
        }
    }
}
