//! Zero-padded 2D cross-correlation over channel-last frames `[B, h, w, C]`.
//!
//! Kernels are stored `[kh, kw, Cin, Cout]`; depthwise kernels are
//! `[kh, kw, 1, C]` (one input channel per group).

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// `(kh/2, kw/2)`; requires odd kernels so the output keeps the input size.
    Same,
    Explicit(usize, usize),
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    batch: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
    depthwise: bool,
}

impl Geometry {
    fn new(x: &[usize], k: &[usize], pad: Padding, depthwise: bool) -> Result<Self> {
        let (batch, h, w, cin) = match *x {
            [h, w, c] => (1, h, w, c),
            [b, h, w, c] => (b, h, w, c),
            _ => return Err(Error::dim("conv2d", format!("input must be [B,h,w,C] or [h,w,C], got {x:?}"))),
        };
        let [kh, kw, kin, cout] = *k else {
            return Err(Error::dim("conv2d", format!("kernel must be [kh,kw,Cin,Cout], got {k:?}")));
        };
        if depthwise {
            if kin != 1 || cout != cin {
                return Err(Error::dim("conv2d", format!("depthwise kernel {k:?} for {cin} channels")));
            }
        } else if kin != cin {
            return Err(Error::dim("conv2d", format!("kernel {k:?} for {cin} input channels")));
        }
        let (ph, pw) = match pad {
            Padding::Same => {
                if kh % 2 == 0 || kw % 2 == 0 {
                    return Err(Error::Config(format!("same-size padding needs an odd kernel, got {kh}x{kw}")));
                }
                (kh / 2, kw / 2)
            }
            Padding::Explicit(ph, pw) => (ph, pw),
        };
        if h + 2 * ph < kh || w + 2 * pw < kw {
            return Err(Error::dim("conv2d", format!("kernel {kh}x{kw} larger than padded {h}x{w}")));
        }
        Ok(Geometry {
            batch,
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            ph,
            pw,
            oh: h + 2 * ph - kh + 1,
            ow: w + 2 * pw - kw + 1,
            depthwise,
        })
    }

    fn out_shape(&self, rank: usize) -> Vec<usize> {
        if rank == 3 {
            vec![self.oh, self.ow, self.cout]
        } else {
            vec![self.batch, self.oh, self.ow, self.cout]
        }
    }

    fn frame_in(&self) -> usize {
        self.h * self.w * self.cin
    }

    fn frame_out(&self) -> usize {
        self.oh * self.ow * self.cout
    }

    /// Input coordinate feeding output `(oy, ox)` through tap `(ky, kx)`.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let y = (oy + ky).checked_sub(self.ph)?;
        let x = (ox + kx).checked_sub(self.pw)?;
        (y < self.h && x < self.w).then_some(y * self.w + x)
    }

    fn im2col<F: Real>(&self, frame: &[F], cols: &mut [F]) {
        let kc = self.kh * self.kw * self.cin;
        cols.iter_mut().for_each(|v| *v = F::zero());
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let row = &mut cols[(oy * self.ow + ox) * kc..(oy * self.ow + ox + 1) * kc];
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        if let Some(src) = self.source(oy, ox, ky, kx) {
                            let t = (ky * self.kw + kx) * self.cin;
                            row[t..t + self.cin].copy_from_slice(&frame[src * self.cin..(src + 1) * self.cin]);
                        }
                    }
                }
            }
        }
    }

    fn col2im<F: Real>(&self, cols: &[F], frame: &mut [F]) {
        let kc = self.kh * self.kw * self.cin;
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let row = &cols[(oy * self.ow + ox) * kc..(oy * self.ow + ox + 1) * kc];
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        if let Some(src) = self.source(oy, ox, ky, kx) {
                            let t = (ky * self.kw + kx) * self.cin;
                            frame[src * self.cin..(src + 1) * self.cin]
                                .iter_mut()
                                .zip(&row[t..t + self.cin])
                                .for_each(|(a, &b)| *a += b);
                        }
                    }
                }
            }
        }
    }
}

fn dense_forward<F: Real>(g: &Geometry, x: &[F], k: &[F], bias: Option<&[F]>) -> Vec<F> {
    let p = g.oh * g.ow;
    let kc = g.kh * g.kw * g.cin;
    let mut out = vec![F::zero(); g.batch * g.frame_out()];
    let mut cols = vec![F::zero(); p * kc];
    for b in 0..g.batch {
        g.im2col(&x[b * g.frame_in()..(b + 1) * g.frame_in()], &mut cols);
        let o = &mut out[b * g.frame_out()..(b + 1) * g.frame_out()];
        if let Some(bias) = bias {
            o.chunks_exact_mut(g.cout).for_each(|r| r.copy_from_slice(bias));
        }
        F::gemm(p, kc, g.cout, &cols, false, k, false, o, F::one());
    }
    out
}

fn depthwise_forward<F: Real>(g: &Geometry, x: &[F], k: &[F], bias: Option<&[F]>) -> Vec<F> {
    let c = g.cin;
    let mut out = vec![F::zero(); g.batch * g.frame_out()];
    for b in 0..g.batch {
        let frame = &x[b * g.frame_in()..(b + 1) * g.frame_in()];
        let o = &mut out[b * g.frame_out()..(b + 1) * g.frame_out()];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let acc = &mut o[(oy * g.ow + ox) * c..(oy * g.ow + ox + 1) * c];
                if let Some(bias) = bias {
                    acc.copy_from_slice(bias);
                }
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        if let Some(src) = g.source(oy, ox, ky, kx) {
                            let kt = &k[(ky * g.kw + kx) * c..(ky * g.kw + kx + 1) * c];
                            let xv = &frame[src * c..(src + 1) * c];
                            for i in 0..c {
                                acc[i] += xv[i] * kt[i];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Zero-padded cross-correlation of channel-last frames. With `depthwise`, each
/// channel is filtered by its own single-channel kernel.
pub fn conv2d<F: Real>(
    x: &Tensor<F>,
    k: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    pad: Padding,
    depthwise: bool,
) -> Result<Tensor<F>> {
    let g = Geometry::new(x.shape(), k.shape(), pad, depthwise)?;
    if let Some(b) = bias {
        if b.numel() != g.cout {
            return Err(Error::dim("conv2d", format!("bias {:?} for {} outputs", b.shape(), g.cout)));
        }
    }
    let bias = bias.map(|b| b.data());
    let out = if depthwise {
        depthwise_forward(&g, x.data(), k.data(), bias)
    } else {
        dense_forward(&g, x.data(), k.data(), bias)
    };
    Tensor::new(&g.out_shape(x.rank()), out)
}

impl<F: Real> Tape<F> {
    pub fn conv2d(&mut self, x: Var, k: Var, bias: Option<Var>, pad: Padding, depthwise: bool) -> Result<Var> {
        let out = conv2d(self.value(x), self.value(k), bias.map(|b| self.value(b)), pad, depthwise)?;
        let g = Geometry::new(self.shape(x), self.shape(k), pad, depthwise)?;
        let mut inputs = vec![x, k];
        inputs.extend(bias);
        Ok(self.push(
            "conv2d",
            out,
            &inputs,
            Box::new(move |c| {
                let (xd, kd, gy) = (c.inputs[0].data(), c.inputs[1].data(), c.grad);
                let (gx, gk) = if g.depthwise {
                    depthwise_backward(&g, xd, kd, gy)
                } else {
                    dense_backward(&g, xd, kd, gy, c.needs[0])
                };
                let mut grads = vec![gx, Some(gk)];
                if c.inputs.len() == 3 {
                    let mut gb = vec![F::zero(); g.cout];
                    for row in gy.chunks_exact(g.cout) {
                        gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                    grads.push(Some(gb));
                }
                grads
            }),
        ))
    }
}

fn dense_backward<F: Real>(g: &Geometry, x: &[F], k: &[F], gy: &[F], need_x: bool) -> (Option<Vec<F>>, Vec<F>) {
    let p = g.oh * g.ow;
    let kc = g.kh * g.kw * g.cin;
    let mut gk = vec![F::zero(); kc * g.cout];
    let mut gx = need_x.then(|| vec![F::zero(); g.batch * g.frame_in()]);
    let mut cols = vec![F::zero(); p * kc];
    let mut gcols = vec![F::zero(); p * kc];
    for b in 0..g.batch {
        let gyb = &gy[b * g.frame_out()..(b + 1) * g.frame_out()];
        g.im2col(&x[b * g.frame_in()..(b + 1) * g.frame_in()], &mut cols);
        F::gemm(kc, p, g.cout, &cols, true, gyb, false, &mut gk, F::one());
        if let Some(gx) = gx.as_mut() {
            F::gemm(p, g.cout, kc, gyb, false, k, true, &mut gcols, F::zero());
            g.col2im(&gcols, &mut gx[b * g.frame_in()..(b + 1) * g.frame_in()]);
        }
    }
    (gx, gk)
}

fn depthwise_backward<F: Real>(g: &Geometry, x: &[F], k: &[F], gy: &[F]) -> (Option<Vec<F>>, Vec<F>) {
    let c = g.cin;
    let mut gk = vec![F::zero(); k.len()];
    let mut gx = vec![F::zero(); x.len()];
    for b in 0..g.batch {
        let frame = &x[b * g.frame_in()..(b + 1) * g.frame_in()];
        let gframe = &mut gx[b * g.frame_in()..(b + 1) * g.frame_in()];
        let gyb = &gy[b * g.frame_out()..(b + 1) * g.frame_out()];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let go = &gyb[(oy * g.ow + ox) * c..(oy * g.ow + ox + 1) * c];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        if let Some(src) = g.source(oy, ox, ky, kx) {
                            let t = (ky * g.kw + kx) * c;
                            for i in 0..c {
                                gk[t + i] += go[i] * frame[src * c + i];
                                gframe[src * c + i] += go[i] * k[t + i];
                            }
                        }
                    }
                }
            }
        }
    }
    (Some(gx), gk)
}
