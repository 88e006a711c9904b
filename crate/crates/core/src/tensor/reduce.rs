use rayon::prelude::*;

use crate::error::Result;
use crate::scalar::Scalar;

use super::{check_axis, Tensor};

/// Splits a shape around `axis` into (outer, axis length, inner).
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
    let mut s = shape.to_vec();
    if keepdim {
        s[axis] = 1;
    } else {
        s.remove(axis);
    }
    s
}

impl<T: Scalar> Tensor<T> {
    /// Sum of all elements as a scalar tensor.
    pub fn sum(&self) -> Tensor<T> {
        let total = self.data().iter().copied().sum();
        Tensor::from_op(
            vec![total],
            Vec::new(),
            "sum",
            vec![self.clone()],
            Box::new(|g, _, inputs| vec![Some(vec![g[0]; inputs[0].numel()])]),
        )
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = self.numel().max(1) as f64;
        self.sum().mul_scalar(1.0 / n)
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor<T>> {
        check_axis("sum_axis", self.shape(), axis)?;
        let (outer, n, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &x[(o * n + k) * inner..(o * n + k + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
            }
        }
        Ok(Tensor::from_op(
            out,
            reduced_shape(self.shape(), axis, keepdim),
            "sum_axis",
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    for k in 0..n {
                        gx[(o * n + k) * inner..(o * n + k + 1) * inner]
                            .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor<T>> {
        check_axis("mean_axis", self.shape(), axis)?;
        let n = self.shape()[axis].max(1) as f64;
        Ok(self.sum_axis(axis, keepdim)?.mul_scalar(1.0 / n))
    }

    /// Maximum along `axis` with the index attaining it (first index on
    /// ties). The gradient flows only to the argmax element.
    pub fn max_with_argmax(&self, axis: usize) -> Result<(Tensor<T>, Vec<usize>)> {
        check_axis("max_with_argmax", self.shape(), axis)?;
        let (outer, n, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut vals = vec![T::zero(); outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = x[o * n * inner + i];
                let mut bi = 0;
                for k in 1..n {
                    let v = x[(o * n + k) * inner + i];
                    if v > best {
                        best = v;
                        bi = k;
                    }
                }
                vals[o * inner + i] = best;
                arg[o * inner + i] = bi;
            }
        }
        let arg_bw = arg.clone();
        let t = Tensor::from_op(
            vals,
            reduced_shape(self.shape(), axis, false),
            "max_axis",
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let k = arg_bw[o * inner + i];
                        gx[(o * n + k) * inner + i] = g[o * inner + i];
                    }
                }
                vec![Some(gx)]
            }),
        );
        Ok((t, arg))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        check_axis("softmax", self.shape(), axis)?;
        let (_, n, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut out = vec![T::zero(); x.len()];
        out.par_chunks_mut(n * inner)
            .enumerate()
            .for_each(|(o, dst)| {
                let src = &x[o * n * inner..(o + 1) * n * inner];
                for i in 0..inner {
                    let mut m = src[i];
                    for k in 1..n {
                        m = m.max(src[k * inner + i]);
                    }
                    let mut z = T::zero();
                    for k in 0..n {
                        let e = (src[k * inner + i] - m).exp();
                        dst[k * inner + i] = e;
                        z += e;
                    }
                    for k in 0..n {
                        dst[k * inner + i] /= z;
                    }
                }
            });
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            "softmax",
            vec![self.clone()],
            Box::new(move |g, y, _| {
                let mut gx = vec![T::zero(); y.len()];
                gx.par_chunks_mut(n * inner)
                    .enumerate()
                    .for_each(|(o, dst)| {
                        let base = o * n * inner;
                        for i in 0..inner {
                            let mut dot = T::zero();
                            for k in 0..n {
                                let j = base + k * inner + i;
                                dot += g[j] * y[j];
                            }
                            for k in 0..n {
                                let j = base + k * inner + i;
                                dst[k * inner + i] = y[j] * (g[j] - dot);
                            }
                        }
                    });
                vec![Some(gx)]
            }),
        ))
    }

    /// Zero-mean, unit-variance normalization of every row along the last
    /// axis (no affine terms). Serves as per-token layer norm on `[L, F]`
    /// and as instance norm on `[C, H*W]`.
    pub fn normalize_last_axis(&self, eps: f64) -> Result<Tensor<T>> {
        let rank = self.rank();
        if rank == 0 {
            return Err(crate::Error::dim("normalize_last_axis", self.shape(), &[]));
        }
        let n = self.shape()[rank - 1];
        let x = self.data();
        let eps_t = T::lit(eps);
        let nt = T::lit(n as f64);
        let rows = x.len() / n.max(1);
        let mut out = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); rows];
        out.par_chunks_mut(n)
            .zip(inv_std.par_iter_mut())
            .enumerate()
            .for_each(|(r, (dst, is))| {
                let src = &x[r * n..(r + 1) * n];
                let mean = src.iter().copied().sum::<T>() / nt;
                let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
                let s = T::one() / (var + eps_t).sqrt();
                *is = s;
                dst.iter_mut()
                    .zip(src)
                    .for_each(|(d, &v)| *d = (v - mean) * s);
            });
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            "normalize_last_axis",
            vec![self.clone()],
            Box::new(move |g, y, _| {
                let mut gx = vec![T::zero(); y.len()];
                gx.par_chunks_mut(n).enumerate().for_each(|(r, dst)| {
                    let gy = &g[r * n..(r + 1) * n];
                    let yy = &y[r * n..(r + 1) * n];
                    let mg = gy.iter().copied().sum::<T>() / nt;
                    let mgy = gy.iter().zip(yy).map(|(&a, &b)| a * b).sum::<T>() / nt;
                    let s = inv_std[r];
                    for k in 0..n {
                        dst[k] = s * (gy[k] - mg - yy[k] * mgy);
                    }
                });
                vec![Some(gx)]
            }),
        ))
    }
}
