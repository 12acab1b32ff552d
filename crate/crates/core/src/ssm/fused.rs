//! Differentiable selective scan fused into a single tape record.
//!
//! The forward pass keeps its inputs and the token projections; the backward
//! pass re-runs the recurrence to recover the states, then sweeps the adjoint
//! recurrence `ḡ_{l-1} = Ā_l ⊙ (ḡ_l + C_l ȳ_l)` from the end of each segment.

use crate::error::{Error, Result};
use crate::ops::elementwise::{sigmoid_scalar, softplus_scalar};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::zoh::zoh_input_gain_deriv;

/// Scan parameters recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct SsmVars {
    pub a_log: Var,
    pub w_b: Var,
    pub w_c: Var,
    pub w_delta: Var,
    pub b_delta: Var,
    pub skip: Option<Var>,
}

/// Sum of `a ⊙ b` with eight independent accumulators, so the loop vectorizes.
#[inline(always)]
fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    let mut acc = [F::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for j in 0..8 {
            acc[j] += x[j] * y[j];
        }
    }
    let tail: F = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    acc.iter().copied().sum::<F>() + tail
}

#[inline(always)]
fn sum8<F: Real>(v: &[F]) -> F {
    let mut acc = [F::zero(); 8];
    let mut c = v.chunks_exact(8);
    for x in &mut c {
        for j in 0..8 {
            acc[j] += x[j];
        }
    }
    acc.iter().copied().sum::<F>() + c.remainder().iter().copied().sum::<F>()
}

struct Projections<F> {
    b: Vec<F>,
    c: Vec<F>,
    /// softplus pre-activation `[L, D]`
    u: Vec<F>,
    delta: Vec<F>,
    a: Vec<F>,
    inv_a: Vec<F>,
}

struct Dims {
    l: usize,
    d: usize,
    n: usize,
    seg: usize,
}

fn project<F: Real>(x: &[F], a_log: &[F], wb: &[F], wc: &[F], wdt: &[F], bdt: &[F], dims: &Dims) -> Projections<F> {
    let Dims { l, d, n, .. } = *dims;
    let mut b = vec![F::zero(); l * n];
    let mut c = vec![F::zero(); l * n];
    let mut s = vec![F::zero(); l];
    F::gemm(l, d, n, x, false, wb, false, &mut b, F::zero());
    F::gemm(l, d, n, x, false, wc, false, &mut c, F::zero());
    F::gemm(l, d, 1, x, false, wdt, false, &mut s, F::zero());
    let mut u = vec![F::zero(); l * d];
    let mut delta = vec![F::zero(); l * d];
    for t in 0..l {
        for ch in 0..d {
            let v = s[t] + bdt[ch];
            u[t * d + ch] = v;
            delta[t * d + ch] = softplus_scalar(v);
        }
    }
    let a: Vec<F> = a_log.iter().map(|&v| -v.exp()).collect();
    let inv_a = a.iter().map(|&v| v.recip()).collect();
    Projections { b, c, u, delta, a, inv_a }
}

/// `h ← e^{ΔA} h + Δ·φ(ΔA) b x` over one channel's states, using
/// `Δ·φ(ΔA) = (e^{ΔA} - 1) / A`. Out of line for the same aliasing reason as
/// [`adjoint_lane`].
#[inline(never)]
fn state_step<F: Real>(dt: F, xv: F, ad: &[F], inv: &[F], bt: &[F], h: &mut [F]) {
    let n = ad.len();
    let (inv, bt, h) = (&inv[..n], &bt[..n], &mut h[..n]);
    for s in 0..n {
        let e = (dt * ad[s]).expm1_kernel();
        h[s] = (F::one() + e) * h[s] + e * inv[s] * bt[s] * xv;
    }
}

/// Runs one segment of the recurrence. When `states` is given, the state after
/// every token is written to it (`[seg, D, N]`).
#[allow(clippy::too_many_arguments)]
fn scan_segment<F: Real>(
    x: &[F],
    pr: &Projections<F>,
    skip: Option<&[F]>,
    dims: &Dims,
    start: usize,
    y: &mut [F],
    h: &mut [F],
    mut states: Option<&mut [F]>,
) {
    let Dims { d, n, seg, .. } = *dims;
    h.iter_mut().for_each(|v| *v = F::zero());
    for t in start..start + seg {
        let bt = &pr.b[t * n..(t + 1) * n];
        let ct = &pr.c[t * n..(t + 1) * n];
        for ch in 0..d {
            let dt = pr.delta[t * d + ch];
            let xv = x[t * d + ch];
            let ad = &pr.a[ch * n..(ch + 1) * n];
            let inv = &pr.inv_a[ch * n..(ch + 1) * n];
            let hd = &mut h[ch * n..(ch + 1) * n];
            state_step(dt, xv, ad, inv, bt, hd);
            let mut acc = dot(ct, hd);
            if let Some(skip) = skip {
                acc += skip[ch] * xv;
            }
            y[t * d + ch] = acc;
        }
        if let Some(st) = states.as_deref_mut() {
            let o = (t - start) * d * n;
            st[o..o + d * n].copy_from_slice(h);
        }
    }
}

impl<F: Real> Tape<F> {
    /// Selective scan of `x` (`[L, D]`) treated as independent segments of
    /// `segment` tokens, each starting from a zero state.
    pub fn selective_scan(&mut self, x: Var, p: &SsmVars, segment: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ps = self.shape(p.a_log).to_vec();
        let (d, n) = (ps[0], ps[1]);
        let err = |detail: String| Err(Error::dim("selective_scan", detail));
        if xs.len() != 2 || xs[1] != d || ps.len() != 2 {
            return err(format!("x {xs:?} against A {ps:?}"));
        }
        let l = xs[0];
        if segment == 0 || l % segment != 0 {
            return err(format!("{l} tokens do not split into segments of {segment}"));
        }
        if self.shape(p.w_b) != [d, n]
            || self.shape(p.w_c) != [d, n]
            || self.shape(p.w_delta) != [d, 1]
            || self.value(p.b_delta).numel() != d
            || p.skip.is_some_and(|s| self.value(s).numel() != d)
        {
            return err("projection shapes do not match A".into());
        }
        let dims = Dims { l, d, n, seg: segment };
        let pr = project(
            self.value(x).data(),
            self.value(p.a_log).data(),
            self.value(p.w_b).data(),
            self.value(p.w_c).data(),
            self.value(p.w_delta).data(),
            self.value(p.b_delta).data(),
            &dims,
        );
        let mut y = vec![F::zero(); l * d];
        let mut h = vec![F::zero(); d * n];
        let skip = p.skip.map(|s| self.value(s).data());
        for start in (0..l).step_by(segment) {
            scan_segment(self.value(x).data(), &pr, skip, &dims, start, &mut y, &mut h, None);
        }
        let out = Tensor::new(&[l, d], y)?;

        let mut inputs = vec![x, p.a_log, p.w_b, p.w_c, p.w_delta, p.b_delta];
        inputs.extend(p.skip);
        Ok(self.push(
            "selective_scan",
            out,
            &inputs,
            Box::new(move |c| {
                let [x, wb, wc, wdt] = [0, 2, 3, 4].map(|i| c.inputs[i].data());
                let skip = c.inputs.get(6).map(|s| s.data());
                backward(&pr, x, wb, wc, wdt, skip, c.grad, &Dims { l, d, n, seg: segment })
            }),
        ))
    }
}

/// One `(token, channel)` step of the adjoint sweep. Kept out of line so each
/// slice argument is known not to alias, which the vectorizer needs.
#[inline(never)]
#[allow(clippy::too_many_arguments)]
fn adjoint_lane<F: Real>(
    (dt, inv_dt, xv, g): (F, F, F, F),
    ad: &[F],
    inv: &[F],
    hcur: &[F],
    hprev: &[F],
    bt: &[F],
    ct: &[F],
    gbt: &mut [F],
    gct: &mut [F],
    sx: &mut [F],
    sdt: &mut [F],
    cr: &mut [F],
    gad: &mut [F],
) {
    let n = ad.len();
    let (inv, hcur, hprev, bt, ct) = (&inv[..n], &hcur[..n], &hprev[..n], &bt[..n], &ct[..n]);
    let (gbt, gct, sx, sdt, cr, gad) = (&mut gbt[..n], &mut gct[..n], &mut sx[..n], &mut sdt[..n], &mut cr[..n], &mut gad[..n]);
    for s in 0..n {
        let a = ad[s];
        let z = dt * a;
        let em = z.expm1_kernel();
        let a_bar = F::one() + em;
        // Δ·φ(z) and Δ²·φ'(z)
        let gain = em * inv[s];
        let dphi = zoh_input_gain_deriv(z, a_bar, gain * inv_dt, inv[s] * inv_dt);
        let gh = cr[s] + g * ct[s];
        let bx = bt[s] * xv;
        gct[s] += g * hcur[s];
        gbt[s] += gh * xv * gain;
        sx[s] = gh * gain * bt[s];
        sdt[s] = gh * a_bar * (a * hprev[s] + bx);
        gad[s] += gh * dt * (a_bar * hprev[s] + dt * dphi * bx);
        cr[s] = gh * a_bar;
    }
}

#[allow(clippy::too_many_arguments)]
fn backward<F: Real>(
    pr: &Projections<F>,
    x: &[F],
    wb: &[F],
    wc: &[F],
    wdt: &[F],
    skip: Option<&[F]>,
    gy: &[F],
    dims: &Dims,
) -> Vec<Option<Vec<F>>> {
    let Dims { l, d, n, seg } = *dims;

    let mut gx = vec![F::zero(); l * d];
    let mut gb = vec![F::zero(); l * n];
    let mut gc = vec![F::zero(); l * n];
    let mut gdelta = vec![F::zero(); l * d];
    let mut ga = vec![F::zero(); d * n];
    let mut gskip = vec![F::zero(); d];

    let mut y = vec![F::zero(); l * d];
    let mut h = vec![F::zero(); d * n];
    let mut states = vec![F::zero(); seg * d * n];
    let mut carry = vec![F::zero(); d * n];
    let zeros = vec![F::zero(); n];
    let mut sx = vec![F::zero(); n];
    let mut sdt = vec![F::zero(); n];
    let mut gbt = vec![F::zero(); n];
    let mut gct = vec![F::zero(); n];

    for start in (0..l).step_by(seg) {
        scan_segment(x, pr, skip, dims, start, &mut y, &mut h, Some(&mut states));
        carry.iter_mut().for_each(|v| *v = F::zero());
        for t in (start..start + seg).rev() {
            let k = t - start;
            let bt = &pr.b[t * n..(t + 1) * n];
            let ct = &pr.c[t * n..(t + 1) * n];
            gbt.iter_mut().for_each(|v| *v = F::zero());
            gct.iter_mut().for_each(|v| *v = F::zero());
            for ch in 0..d {
                let g = gy[t * d + ch];
                let dt = pr.delta[t * d + ch];
                let xv = x[t * d + ch];
                let lane = ch * n..(ch + 1) * n;
                let inv_dt = dt.recip();
                let hprev = if k == 0 { &zeros[..] } else { &states[(k - 1) * d * n..k * d * n][lane.clone()] };
                adjoint_lane(
                    (dt, inv_dt, xv, g),
                    &pr.a[lane.clone()],
                    &pr.inv_a[lane.clone()],
                    &states[k * d * n..(k + 1) * d * n][lane.clone()],
                    hprev,
                    bt,
                    ct,
                    &mut gbt,
                    &mut gct,
                    &mut sx,
                    &mut sdt,
                    &mut carry[lane.clone()],
                    &mut ga[lane],
                );
                let mut gx_acc = sum8(&sx);
                if let Some(skip) = skip {
                    gx_acc += g * skip[ch];
                    gskip[ch] += g * xv;
                }
                gx[t * d + ch] += gx_acc;
                gdelta[t * d + ch] = sum8(&sdt);
            }
            gb[t * n..(t + 1) * n].copy_from_slice(&gbt);
            gc[t * n..(t + 1) * n].copy_from_slice(&gct);
        }
    }

    // Δ = softplus(x w_Δ + bias)
    let mut gs = vec![F::zero(); l];
    let mut gbdt = vec![F::zero(); d];
    for t in 0..l {
        for ch in 0..d {
            let gu = gdelta[t * d + ch] * sigmoid_scalar(pr.u[t * d + ch]);
            gs[t] += gu;
            gbdt[ch] += gu;
        }
    }
    let mut gwb = vec![F::zero(); d * n];
    let mut gwc = vec![F::zero(); d * n];
    let mut gwdt = vec![F::zero(); d];
    F::gemm(d, l, n, x, true, &gb, false, &mut gwb, F::zero());
    F::gemm(d, l, n, x, true, &gc, false, &mut gwc, F::zero());
    F::gemm(d, l, 1, x, true, &gs, false, &mut gwdt, F::zero());
    F::gemm(l, n, d, &gb, false, wb, true, &mut gx, F::one());
    F::gemm(l, n, d, &gc, false, wc, true, &mut gx, F::one());
    F::gemm(l, 1, d, &gs, false, wdt, true, &mut gx, F::one());
    // A = -exp(a_log) so dA/da_log = A
    let ga_log = ga.iter().zip(&pr.a).map(|(&g, &a)| g * a).collect();

    let mut grads = vec![Some(gx), Some(ga_log), Some(gwb), Some(gwc), Some(gwdt), Some(gbdt)];
    if skip.is_some() {
        grads.push(Some(gskip));
    }
    grads
}
