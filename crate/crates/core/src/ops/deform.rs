//! Bilinear sampling and modulated deformable convolution.
//!
//! Each output position `p` and kernel tap `k` samples the input at
//! `p + (ky - kh/2, kx - kw/2) + offset[p, k]` by bilinear interpolation, scales
//! the sample by `mask[p, k]`, and contracts the gathered columns with the kernel.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Neighbor indices and weights of a bilinear sample. Out-of-range neighbors are
/// reported as `None` and contribute zero.
#[derive(Clone, Copy, Debug)]
struct Corners<F> {
    idx: [Option<usize>; 4],
    ly: F,
    lx: F,
}

impl<F: Real> Corners<F> {
    #[inline]
    fn new(h: usize, w: usize, py: F, px: F) -> Self {
        let y0 = py.floor();
        let x0 = px.floor();
        let (ly, lx) = (py - y0, px - x0);
        let (y0, x0) = (y0.to_i64().unwrap_or(i64::MIN / 2), x0.to_i64().unwrap_or(i64::MIN / 2));
        let cell = |y: i64, x: i64| {
            (y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w).then(|| y as usize * w + x as usize)
        };
        Corners { idx: [cell(y0, x0), cell(y0, x0 + 1), cell(y0 + 1, x0), cell(y0 + 1, x0 + 1)], ly, lx }
    }

    #[inline]
    fn weights(&self) -> [F; 4] {
        let one = F::one();
        [(one - self.ly) * (one - self.lx), (one - self.ly) * self.lx, self.ly * (one - self.lx), self.ly * self.lx]
    }

    /// d(weight)/d(ly) and d(weight)/d(lx).
    #[inline]
    fn weight_grads(&self) -> ([F; 4], [F; 4]) {
        let one = F::one();
        (
            [-(one - self.lx), -self.lx, one - self.lx, self.lx],
            [-(one - self.ly), one - self.ly, -self.ly, self.ly],
        )
    }

    fn is_empty(&self) -> bool {
        self.idx.iter().all(Option::is_none)
    }
}

/// Bilinear interpolation of a channel-last `[h, w, C]` map at `(y, x)`.
/// Neighbors outside the map count as zero, so any point outside
/// `(-1, h) × (-1, w)` samples to zero.
pub fn bilinear_sample<F: Real>(x: &Tensor<F>, y: F, xp: F) -> Result<Tensor<F>> {
    if x.rank() != 3 {
        return Err(Error::dim("bilinear_sample", format!("expected [h, w, C], got {:?}", x.shape())));
    }
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = vec![F::zero(); c];
    let corners = Corners::new(h, w, y, xp);
    for (idx, wt) in corners.idx.iter().zip(corners.weights()) {
        if let Some(i) = idx {
            out.iter_mut().zip(&x.data()[i * c..(i + 1) * c]).for_each(|(o, &v)| *o += wt * v);
        }
    }
    Tensor::new(&[c], out)
}

#[derive(Clone, Copy, Debug)]
struct DeformGeometry {
    batch: usize,
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    cout: usize,
}

impl DeformGeometry {
    fn new(x: &[usize], off: &[usize], mask: &[usize], k: &[usize]) -> Result<Self> {
        let err = || {
            Error::dim(
                "deform_conv2d",
                format!("x {x:?}, offsets {off:?}, mask {mask:?}, kernel {k:?}"),
            )
        };
        let [batch, h, w, c] = *x else { return Err(err()) };
        let [kh, kw, kin, cout] = *k else { return Err(err()) };
        let taps = kh * kw;
        if kin != c
            || kh % 2 == 0
            || kw % 2 == 0
            || off != [batch, h, w, 2 * taps]
            || mask != [batch, h, w, taps]
        {
            return Err(err());
        }
        Ok(DeformGeometry { batch, h, w, c, kh, kw, cout })
    }

    fn taps(&self) -> usize {
        self.kh * self.kw
    }

    #[inline]
    fn corners<F: Real>(&self, pos: usize, tap: usize, off: &[F]) -> Corners<F> {
        let (y, x) = (pos / self.w, pos % self.w);
        let (ky, kx) = (tap / self.kw, tap % self.kw);
        let base = F::of(y as f64 + ky as f64 - (self.kh / 2) as f64);
        let basex = F::of(x as f64 + kx as f64 - (self.kw / 2) as f64);
        Corners::new(self.h, self.w, base + off[2 * tap], basex + off[2 * tap + 1])
    }

    /// Modulated sampled columns `[h·w, taps·C]` for one frame.
    fn columns<F: Real>(&self, frame: &[F], off: &[F], mask: &[F], cols: &mut [F]) {
        let (c, taps, p) = (self.c, self.taps(), self.h * self.w);
        cols.iter_mut().for_each(|v| *v = F::zero());
        for pos in 0..p {
            for tap in 0..taps {
                let corners = self.corners(pos, tap, &off[pos * 2 * taps..]);
                let m = mask[pos * taps + tap];
                let col = &mut cols[(pos * taps + tap) * c..(pos * taps + tap + 1) * c];
                for (idx, wt) in corners.idx.iter().zip(corners.weights()) {
                    if let Some(i) = idx {
                        let s = wt * m;
                        col.iter_mut().zip(&frame[i * c..(i + 1) * c]).for_each(|(o, &v)| *o += s * v);
                    }
                }
            }
        }
    }
}

/// Modulated deformable convolution over channel-last frames. `offsets` holds
/// `(dy, dx)` per tap, `mask` one modulation scalar per tap; the kernel is
/// `[kh, kw, C, Cout]` and the output keeps the input's spatial size.
pub fn deform_conv2d<F: Real>(
    x: &Tensor<F>,
    offsets: &Tensor<F>,
    mask: &Tensor<F>,
    kernel: &Tensor<F>,
) -> Result<Tensor<F>> {
    let g = DeformGeometry::new(x.shape(), offsets.shape(), mask.shape(), kernel.shape())?;
    let p = g.h * g.w;
    let kc = g.taps() * g.c;
    let mut out = vec![F::zero(); g.batch * p * g.cout];
    let mut cols = vec![F::zero(); p * kc];
    for b in 0..g.batch {
        g.columns(
            &x.data()[b * p * g.c..(b + 1) * p * g.c],
            &offsets.data()[b * p * 2 * g.taps()..(b + 1) * p * 2 * g.taps()],
            &mask.data()[b * p * g.taps()..(b + 1) * p * g.taps()],
            &mut cols,
        );
        F::gemm(p, kc, g.cout, &cols, false, kernel.data(), false, &mut out[b * p * g.cout..(b + 1) * p * g.cout], F::zero());
    }
    Tensor::new(&[g.batch, g.h, g.w, g.cout], out)
}

impl<F: Real> Tape<F> {
    pub fn deform_conv2d(&mut self, x: Var, offsets: Var, mask: Var, kernel: Var) -> Result<Var> {
        let out = deform_conv2d(self.value(x), self.value(offsets), self.value(mask), self.value(kernel))?;
        let g = DeformGeometry::new(self.shape(x), self.shape(offsets), self.shape(mask), self.shape(kernel))?;
        Ok(self.push(
            "deform_conv2d",
            out,
            &[x, offsets, mask, kernel],
            Box::new(move |ctx| {
                let [x, off, mask, kernel] = [0, 1, 2, 3].map(|i| ctx.inputs[i].data());
                let (c, taps, p) = (g.c, g.taps(), g.h * g.w);
                let kc = taps * c;
                let mut gx = vec![F::zero(); x.len()];
                let mut goff = vec![F::zero(); off.len()];
                let mut gmask = vec![F::zero(); mask.len()];
                let mut gk = vec![F::zero(); kernel.len()];
                let mut cols = vec![F::zero(); p * kc];
                let mut gcols = vec![F::zero(); p * kc];
                for b in 0..g.batch {
                    let frame = &x[b * p * c..(b + 1) * p * c];
                    let offb = &off[b * p * 2 * taps..(b + 1) * p * 2 * taps];
                    let maskb = &mask[b * p * taps..(b + 1) * p * taps];
                    let gy = &ctx.grad[b * p * g.cout..(b + 1) * p * g.cout];
                    if ctx.needs[3] {
                        g.columns(frame, offb, maskb, &mut cols);
                        F::gemm(kc, p, g.cout, &cols, true, gy, false, &mut gk, F::one());
                    }
                    F::gemm(p, g.cout, kc, gy, false, kernel, true, &mut gcols, F::zero());
                    let gxf = &mut gx[b * p * c..(b + 1) * p * c];
                    for pos in 0..p {
                        for tap in 0..taps {
                            let corners = g.corners(pos, tap, &offb[pos * 2 * taps..]);
                            if corners.is_empty() {
                                continue;
                            }
                            let gc = &gcols[(pos * taps + tap) * c..(pos * taps + tap + 1) * c];
                            let m = maskb[pos * taps + tap];
                            let wts = corners.weights();
                            let (dwy, dwx) = corners.weight_grads();
                            let (mut gm, mut gly, mut glx) = (F::zero(), F::zero(), F::zero());
                            for n in 0..4 {
                                let Some(i) = corners.idx[n] else { continue };
                                let v = &frame[i * c..(i + 1) * c];
                                let dot: F = gc.iter().zip(v).map(|(&a, &b)| a * b).sum();
                                gm += wts[n] * dot;
                                gly += dwy[n] * dot;
                                glx += dwx[n] * dot;
                                let s = wts[n] * m;
                                gxf[i * c..(i + 1) * c].iter_mut().zip(gc).for_each(|(a, &b)| *a += s * b);
                            }
                            gmask[(b * p + pos) * taps + tap] = gm;
                            goff[(b * p + pos) * 2 * taps + 2 * tap] = m * gly;
                            goff[(b * p + pos) * 2 * taps + 2 * tap + 1] = m * glx;
                        }
                    }
                }
                vec![Some(gx), Some(goff), Some(gmask), Some(gk)]
            }),
        ))
    }
}
