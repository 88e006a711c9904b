//! Bilinear sampling and linear resizing.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{check_axis, Mask, Tensor};

#[derive(Clone, Copy, Default)]
struct Tap<T> {
    valid: bool,
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: T,
    fy: T,
}

fn tap<T: Scalar>(x: T, y: T, h: usize, w: usize) -> Tap<T> {
    let (wf, hf) = (T::lit((w - 1) as f64), T::lit((h - 1) as f64));
    if !(x >= T::zero() && x <= wf && y >= T::zero() && y <= hf) {
        return Tap::default();
    }
    let x0 = x.floor().to_usize().unwrap_or(0).min(w.saturating_sub(2));
    let y0 = y.floor().to_usize().unwrap_or(0).min(h.saturating_sub(2));
    Tap {
        valid: true,
        x0,
        x1: (x0 + 1).min(w - 1),
        y0,
        y1: (y0 + 1).min(h - 1),
        fx: x - T::lit(x0 as f64),
        fy: y - T::lit(y0 as f64),
    }
}

impl<T: Scalar> Tensor<T> {
    /// Bilinear sampling of `self: [C, H, W]` at `grid: [.., H', W', 2]`.
    ///
    /// Grid entries are `(x, y)` in continuous pixel units of the input
    /// (column first). Points outside `[0, W−1] × [0, H−1]` produce zeros
    /// and a `false` mask entry. The result has shape `[.., C, H', W']` and
    /// is differentiable with respect to both the input and the grid.
    pub fn grid_sample_2d(&self, grid: &Tensor<T>) -> Result<(Tensor<T>, Mask)> {
        let gs = grid.shape();
        if self.rank() != 3 || gs.len() < 3 || gs[gs.len() - 1] != 2 {
            return Err(Error::dim("grid_sample_2d", self.shape(), gs));
        }
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        if h == 0 || w == 0 {
            return Err(Error::dim("grid_sample_2d", self.shape(), gs));
        }
        let (ho, wo) = (gs[gs.len() - 3], gs[gs.len() - 2]);
        let q = ho * wo;
        let batch: usize = gs[..gs.len() - 3].iter().product();
        let gd = grid.data();
        let taps: Vec<Tap<T>> = (0..batch * q)
            .map(|i| tap(gd[2 * i], gd[2 * i + 1], h, w))
            .collect();
        let x = self.data();
        let mut out = vec![T::zero(); batch * c * q];
        out.par_chunks_mut(c * q).enumerate().for_each(|(b, ob)| {
            let tb = &taps[b * q..(b + 1) * q];
            for ch in 0..c {
                let xc = &x[ch * h * w..(ch + 1) * h * w];
                let oc = &mut ob[ch * q..(ch + 1) * q];
                for (o, t) in oc.iter_mut().zip(tb) {
                    if t.valid {
                        let one = T::one();
                        let top = (one - t.fx) * xc[t.y0 * w + t.x0] + t.fx * xc[t.y0 * w + t.x1];
                        let bot = (one - t.fx) * xc[t.y1 * w + t.x0] + t.fx * xc[t.y1 * w + t.x1];
                        *o = (one - t.fy) * top + t.fy * bot;
                    }
                }
            }
        });
        let mask_shape: Vec<usize> = gs[..gs.len() - 1].to_vec();
        let mask = Mask::new(taps.iter().map(|t| t.valid).collect(), &mask_shape)?;
        let mut shape = gs[..gs.len() - 3].to_vec();
        shape.extend([c, ho, wo]);
        let t = Tensor::from_op(
            out,
            shape,
            "grid_sample_2d",
            vec![self.clone(), grid.clone()],
            Box::new(move |g, _, inputs| {
                let (inp, grd) = (&inputs[0], &inputs[1]);
                let x = inp.data();
                let gin = inp.requires_grad().then(|| {
                    let mut gin = vec![T::zero(); c * h * w];
                    gin.par_chunks_mut(h * w).enumerate().for_each(|(ch, gc)| {
                        for b in 0..batch {
                            let gb = &g[(b * c + ch) * q..(b * c + ch + 1) * q];
                            for (&gv, t) in gb.iter().zip(&taps[b * q..(b + 1) * q]) {
                                if !t.valid {
                                    continue;
                                }
                                let one = T::one();
                                gc[t.y0 * w + t.x0] += gv * (one - t.fx) * (one - t.fy);
                                gc[t.y0 * w + t.x1] += gv * t.fx * (one - t.fy);
                                gc[t.y1 * w + t.x0] += gv * (one - t.fx) * t.fy;
                                gc[t.y1 * w + t.x1] += gv * t.fx * t.fy;
                            }
                        }
                    });
                    gin
                });
                let ggrid = grd.requires_grad().then(|| {
                    let mut gg = vec![T::zero(); batch * q * 2];
                    gg.par_chunks_mut(q * 2).enumerate().for_each(|(b, gb)| {
                        for (i, t) in taps[b * q..(b + 1) * q].iter().enumerate() {
                            if !t.valid {
                                continue;
                            }
                            let (mut dx, mut dy) = (T::zero(), T::zero());
                            for ch in 0..c {
                                let xc = &x[ch * h * w..(ch + 1) * h * w];
                                let gv = g[(b * c + ch) * q + i];
                                let v00 = xc[t.y0 * w + t.x0];
                                let v01 = xc[t.y0 * w + t.x1];
                                let v10 = xc[t.y1 * w + t.x0];
                                let v11 = xc[t.y1 * w + t.x1];
                                let one = T::one();
                                dx += gv * ((one - t.fy) * (v01 - v00) + t.fy * (v11 - v10));
                                dy += gv * ((one - t.fx) * (v10 - v00) + t.fx * (v11 - v01));
                            }
                            gb[2 * i] = dx;
                            gb[2 * i + 1] = dy;
                        }
                    });
                    gg
                });
                vec![gin, ggrid]
            }),
        );
        Ok((t, mask))
    }

    /// Linear resize along one axis to `len` samples.
    ///
    /// Sample-aligned convention: output index `i` reads input coordinate
    /// `i · n / len` (clamped to the last sample), so for a 2× upsample the
    /// even outputs copy the input exactly. This matches the pixel grid of
    /// stride-2 convolutions and of camera intrinsics scaled by 1/2.
    pub fn resize_axis(&self, axis: usize, len: usize) -> Result<Tensor<T>> {
        check_axis("resize_axis", self.shape(), axis)?;
        let (outer, n, inner) = super::reduce::split_axis(self.shape(), axis);
        if n == 0 || len == 0 {
            return Err(Error::dim("resize_axis", self.shape(), &[axis, len]));
        }
        let coeffs: Vec<(usize, usize, T)> = (0..len)
            .map(|i| {
                let src = (i as f64 * n as f64 / len as f64).min((n - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(n - 1);
                (i0, i1, T::lit(src - i0 as f64))
            })
            .collect();
        let x = self.data();
        let mut out = vec![T::zero(); outer * len * inner];
        out.par_chunks_mut(len * inner)
            .enumerate()
            .for_each(|(o, dst)| {
                let src = &x[o * n * inner..(o + 1) * n * inner];
                for (i, &(i0, i1, f)) in coeffs.iter().enumerate() {
                    let d = &mut dst[i * inner..(i + 1) * inner];
                    let a = &src[i0 * inner..(i0 + 1) * inner];
                    let b = &src[i1 * inner..(i1 + 1) * inner];
                    for ((dv, &av), &bv) in d.iter_mut().zip(a).zip(b) {
                        *dv = (T::one() - f) * av + f * bv;
                    }
                }
            });
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Tensor::from_op(
            out,
            shape,
            "resize_axis",
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![T::zero(); outer * n * inner];
                gx.par_chunks_mut(n * inner)
                    .enumerate()
                    .for_each(|(o, dst)| {
                        let go = &g[o * len * inner..(o + 1) * len * inner];
                        for (i, &(i0, i1, f)) in coeffs.iter().enumerate() {
                            for k in 0..inner {
                                let gv = go[i * inner + k];
                                dst[i0 * inner + k] += (T::one() - f) * gv;
                                dst[i1 * inner + k] += f * gv;
                            }
                        }
                    });
                vec![Some(gx)]
            }),
        ))
    }

    /// Resizes the trailing axes to `sizes` (bilinear for two axes,
    /// trilinear for three).
    pub fn resize_trailing(&self, sizes: &[usize]) -> Result<Tensor<T>> {
        if sizes.len() > self.rank() {
            return Err(Error::dim("resize_trailing", self.shape(), sizes));
        }
        let first = self.rank() - sizes.len();
        let mut t = self.clone();
        for (i, &len) in sizes.iter().enumerate() {
            if t.shape()[first + i] != len {
                t = t.resize_axis(first + i, len)?;
            }
        }
        Ok(t)
    }

    /// Doubles the last two axes by bilinear interpolation.
    pub fn upsample_bilinear_2x(&self) -> Result<Tensor<T>> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::dim("upsample_bilinear_2x", self.shape(), &[]));
        }
        let (h, w) = (self.shape()[r - 2], self.shape()[r - 1]);
        self.resize_trailing(&[2 * h, 2 * w])
    }
}
