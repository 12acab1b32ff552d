//! Parameter handles for the small dense layers shared by the blocks.

use rand::Rng;

use crate::error::Result;
use crate::ops::{Padding, LAYER_NORM_EPS};
use crate::params::{Bound, ParamId, ParamStore};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Registers freshly initialized parameters under a name prefix.
pub struct Init<'a, R: Rng> {
    pub store: &'a mut ParamStore<f32>,
    pub rng: &'a mut R,
    prefix: String,
}

impl<'a, R: Rng> Init<'a, R> {
    pub fn new(store: &'a mut ParamStore<f32>, rng: &'a mut R) -> Self {
        Init { store, rng, prefix: String::new() }
    }

    pub fn name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Runs `f` with `scope` appended to the prefix.
    pub fn scoped<T>(&mut self, scope: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        let saved = std::mem::replace(&mut self.prefix, String::new());
        self.prefix = if saved.is_empty() { scope.to_string() } else { format!("{saved}.{scope}") };
        let out = f(self);
        self.prefix = saved;
        out
    }

    pub fn param(&mut self, name: &str, value: Tensor<f32>) -> ParamId {
        let full = self.name(name);
        self.store.register(full, value)
    }

    pub fn randn(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let t = Tensor::randn(shape, std, self.rng);
        self.param(name, t)
    }

    pub fn linear(&mut self, name: &str, din: usize, dout: usize) -> Linear {
        self.scoped(name, |s| Linear {
            w: s.randn("w", &[din, dout], 1.0 / (din as f64).sqrt()),
            b: Some(s.param("b", Tensor::zeros(&[dout]))),
        })
    }

    pub fn norm(&mut self, name: &str, d: usize) -> Norm {
        self.scoped(name, |s| Norm { gamma: s.param("gamma", Tensor::ones(&[d])), beta: s.param("beta", Tensor::zeros(&[d])) })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn apply<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p[self.w], self.b.map(|b| p[b]))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn apply<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p[self.gamma], p[self.beta], F::of(LAYER_NORM_EPS))
    }

    /// `SiLU(LayerNorm(x))`.
    pub fn apply_silu<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        let n = self.apply(tape, p, x)?;
        Ok(tape.silu(n))
    }
}

/// Position-wise `D → eD → D` with SiLU.
#[derive(Clone, Copy, Debug)]
pub struct Ffn {
    pub up: Linear,
    pub down: Linear,
}

impl Ffn {
    pub fn init<R: Rng>(init: &mut Init<'_, R>, d: usize, expansion: usize) -> Self {
        init.scoped("ffn", |s| Ffn { up: s.linear("up", d, expansion * d), down: s.linear("down", expansion * d, d) })
    }

    pub fn apply<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.up.apply(tape, p, x)?;
        let h = tape.silu(h);
        self.down.apply(tape, p, h)
    }
}

/// Per-frame 3×3 depthwise convolution, channel LayerNorm, SiLU.
#[derive(Clone, Copy, Debug)]
pub struct GatedStream {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub norm: Norm,
}

impl GatedStream {
    pub fn init<R: Rng>(init: &mut Init<'_, R>, d: usize) -> Self {
        init.scoped("gate", |s| GatedStream {
            kernel: s.randn("kernel", &[3, 3, 1, d], 1.0 / 3.0),
            bias: s.param("bias", Tensor::zeros(&[d])),
            norm: s.norm("norm", d),
        })
    }

    /// `x` is `[T, h, w, D]`.
    pub fn apply<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        let c = tape.conv2d(x, p[self.kernel], Some(p[self.bias]), Padding::Same, true)?;
        self.norm.apply_silu(tape, p, c)
    }
}

/// `x + FFN(main ⊙ gate)`, or without the residual when disabled.
pub fn merge_streams<F: Real>(
    tape: &mut Tape<F>,
    p: &Bound,
    x: Var,
    main: Var,
    gate: Var,
    ffn: &Ffn,
    residual: bool,
) -> Result<Var> {
    let m = tape.mul(main, gate)?;
    let y = ffn.apply(tape, p, m)?;
    if residual {
        tape.add(x, y)
    } else {
        Ok(y)
    }
}
