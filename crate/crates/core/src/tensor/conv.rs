//! 2D and 3D convolutions (cross-correlation, no kernel flip).
//!
//! Both front-ends share one kernel over three spatial axes; 2D inputs are
//! treated as volumes of depth one.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvOptions {
    pub stride: usize,
    pub padding: usize,
}

impl Default for ConvOptions {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
        }
    }
}

impl ConvOptions {
    /// Stride one, padding that preserves extent for a `k`-wide kernel.
    pub fn same(k: usize) -> Self {
        Self {
            stride: 1,
            padding: k / 2,
        }
    }

    pub fn strided(k: usize, stride: usize) -> Self {
        Self {
            stride,
            padding: k / 2,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Geom {
    ci: usize,
    co: usize,
    inp: [usize; 3],
    k: [usize; 3],
    s: [usize; 3],
    p: [usize; 3],
    out: [usize; 3],
}

impl Geom {
    fn in_len(&self) -> usize {
        self.inp.iter().product()
    }

    fn out_len(&self) -> usize {
        self.out.iter().product()
    }

    fn k_len(&self) -> usize {
        self.k.iter().product()
    }

    /// Output positions along axis `a` whose input tap `kk` lies in range.
    fn valid(&self, a: usize, kk: usize) -> (usize, usize) {
        let (s, p, n) = (self.s[a] as isize, self.p[a] as isize, self.inp[a] as isize);
        let kk = kk as isize;
        // 0 <= o*s + kk - p < n
        let lo = (p - kk).max(0);
        let lo = (lo + s - 1) / s;
        let hi = (n - 1 + p - kk).div_euclid(s) + 1;
        let hi = hi.clamp(0, self.out[a] as isize);
        let lo = lo.min(hi);
        (lo as usize, hi as usize)
    }

    fn src(&self, a: usize, o: usize, kk: usize) -> usize {
        o * self.s[a] + kk - self.p[a]
    }
}

/// Calls `f(out_row_start, in_row_start, count)` for every output row touched
/// by one kernel tap. Input elements along the row are `stride` apart.
#[inline]
fn for_each_row(g: &Geom, kz: usize, ky: usize, kx: usize, mut f: impl FnMut(usize, usize, usize)) {
    let (zlo, zhi) = g.valid(0, kz);
    let (ylo, yhi) = g.valid(1, ky);
    let (xlo, xhi) = g.valid(2, kx);
    if xlo >= xhi {
        return;
    }
    let [_, ih, iw] = g.inp;
    let [_, oh, ow] = g.out;
    for oz in zlo..zhi {
        let iz = g.src(0, oz, kz);
        for oy in ylo..yhi {
            let iy = g.src(1, oy, ky);
            let ix = g.src(2, xlo, kx);
            f(
                (oz * oh + oy) * ow + xlo,
                (iz * ih + iy) * iw + ix,
                xhi - xlo,
            );
        }
    }
}

fn forward<T: Scalar>(x: &[T], w: &[T], g: &Geom) -> Vec<T> {
    let (ol, il, kl) = (g.out_len(), g.in_len(), g.k_len());
    let sx = g.s[2];
    let mut out = vec![T::zero(); g.co * ol];
    out.par_chunks_mut(ol).enumerate().for_each(|(co, oc)| {
        for ci in 0..g.ci {
            let xc = &x[ci * il..(ci + 1) * il];
            let wk = &w[(co * g.ci + ci) * kl..(co * g.ci + ci + 1) * kl];
            for kz in 0..g.k[0] {
                for ky in 0..g.k[1] {
                    for kx in 0..g.k[2] {
                        let wv = wk[(kz * g.k[1] + ky) * g.k[2] + kx];
                        for_each_row(g, kz, ky, kx, |o, i, n| {
                            if sx == 1 {
                                oc[o..o + n]
                                    .iter_mut()
                                    .zip(&xc[i..i + n])
                                    .for_each(|(a, &b)| *a += wv * b);
                            } else {
                                for t in 0..n {
                                    oc[o + t] += wv * xc[i + t * sx];
                                }
                            }
                        });
                    }
                }
            }
        }
    });
    out
}

fn grad_input<T: Scalar>(gout: &[T], w: &[T], g: &Geom) -> Vec<T> {
    let (ol, il, kl) = (g.out_len(), g.in_len(), g.k_len());
    let sx = g.s[2];
    let mut gx = vec![T::zero(); g.ci * il];
    gx.par_chunks_mut(il).enumerate().for_each(|(ci, gc)| {
        for co in 0..g.co {
            let go = &gout[co * ol..(co + 1) * ol];
            let wk = &w[(co * g.ci + ci) * kl..(co * g.ci + ci + 1) * kl];
            for kz in 0..g.k[0] {
                for ky in 0..g.k[1] {
                    for kx in 0..g.k[2] {
                        let wv = wk[(kz * g.k[1] + ky) * g.k[2] + kx];
                        for_each_row(g, kz, ky, kx, |o, i, n| {
                            if sx == 1 {
                                gc[i..i + n]
                                    .iter_mut()
                                    .zip(&go[o..o + n])
                                    .for_each(|(a, &b)| *a += wv * b);
                            } else {
                                for t in 0..n {
                                    gc[i + t * sx] += wv * go[o + t];
                                }
                            }
                        });
                    }
                }
            }
        }
    });
    gx
}

fn grad_kernel<T: Scalar>(gout: &[T], x: &[T], g: &Geom) -> Vec<T> {
    let (ol, il, kl) = (g.out_len(), g.in_len(), g.k_len());
    let sx = g.s[2];
    let mut gw = vec![T::zero(); g.co * g.ci * kl];
    gw.par_chunks_mut(g.ci * kl)
        .enumerate()
        .for_each(|(co, gk)| {
            let go = &gout[co * ol..(co + 1) * ol];
            for ci in 0..g.ci {
                let xc = &x[ci * il..(ci + 1) * il];
                for kz in 0..g.k[0] {
                    for ky in 0..g.k[1] {
                        for kx in 0..g.k[2] {
                            let mut acc = T::zero();
                            for_each_row(g, kz, ky, kx, |o, i, n| {
                                if sx == 1 {
                                    acc += go[o..o + n]
                                        .iter()
                                        .zip(&xc[i..i + n])
                                        .map(|(&a, &b)| a * b)
                                        .sum::<T>();
                                } else {
                                    for t in 0..n {
                                        acc += go[o + t] * xc[i + t * sx];
                                    }
                                }
                            });
                            gk[ci * kl + (kz * g.k[1] + ky) * g.k[2] + kx] = acc;
                        }
                    }
                }
            }
        });
    gw
}

#[allow(clippy::too_many_arguments)]
fn conv_general<T: Scalar>(
    op: &'static str,
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    inp: [usize; 3],
    k: [usize; 3],
    s: [usize; 3],
    p: [usize; 3],
    out_shape_prefix: usize,
) -> Result<Tensor<T>> {
    let ci = input.shape()[0];
    let co = kernel.shape()[0];
    if kernel.shape()[1] != ci {
        return Err(Error::dim(op, input.shape(), kernel.shape()));
    }
    let mut out = [0usize; 3];
    for a in 0..3 {
        let span = inp[a] + 2 * p[a];
        if span < k[a] || s[a] == 0 {
            return Err(Error::dim(op, input.shape(), kernel.shape()));
        }
        out[a] = (span - k[a]) / s[a] + 1;
    }
    let g = Geom {
        ci,
        co,
        inp,
        k,
        s,
        p,
        out,
    };
    let data = forward(input.data(), kernel.data(), &g);
    let mut shape = vec![co];
    shape.extend_from_slice(&out[3 - out_shape_prefix..]);
    Ok(Tensor::from_op(
        data,
        shape,
        op,
        vec![input.clone(), kernel.clone()],
        Box::new(move |gout, _, inputs| {
            let (x, w) = (&inputs[0], &inputs[1]);
            let gx = x.requires_grad().then(|| grad_input(gout, w.data(), &g));
            let gw = w.requires_grad().then(|| grad_kernel(gout, x.data(), &g));
            vec![gx, gw]
        }),
    ))
}

fn check_kernel(op: &'static str, input: &Tensor<impl Scalar>, ks: &[usize]) -> Result<()> {
    if ks[2..].iter().any(|&k| k % 2 == 0) || ks[2..].windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::dim(op, input.shape(), ks));
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    /// `[C_in, H, W] ⋆ [C_out, C_in, k, k] -> [C_out, H', W']` with
    /// `H' = floor((H + 2·pad − k) / stride) + 1`.
    pub fn conv2d(&self, kernel: &Tensor<T>, opts: ConvOptions) -> Result<Tensor<T>> {
        if self.rank() != 3 || kernel.rank() != 4 {
            return Err(Error::dim("conv2d", self.shape(), kernel.shape()));
        }
        check_kernel("conv2d", self, kernel.shape())?;
        let (h, w) = (self.shape()[1], self.shape()[2]);
        let k = kernel.shape()[2];
        let (s, p) = (opts.stride, opts.padding);
        conv_general(
            "conv2d",
            self,
            kernel,
            [1, h, w],
            [1, k, k],
            [1, s, s],
            [0, p, p],
            2,
        )
    }

    /// `[C_in, D, H, W] ⋆ [C_out, C_in, k, k, k] -> [C_out, D', H', W']`.
    pub fn conv3d(&self, kernel: &Tensor<T>, opts: ConvOptions) -> Result<Tensor<T>> {
        if self.rank() != 4 || kernel.rank() != 5 {
            return Err(Error::dim("conv3d", self.shape(), kernel.shape()));
        }
        check_kernel("conv3d", self, kernel.shape())?;
        let (d, h, w) = (self.shape()[1], self.shape()[2], self.shape()[3]);
        let k = kernel.shape()[2];
        let (s, p) = (opts.stride, opts.padding);
        conv_general(
            "conv3d",
            self,
            kernel,
            [d, h, w],
            [k, k, k],
            [s, s, s],
            [p, p, p],
            3,
        )
    }
}
