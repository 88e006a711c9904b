use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::elementwise::{broadcast_index, broadcast_shape};
use super::Tensor;

const PAR_WORK: usize = 1 << 16;

/// `c[m,n] += a[m,k] · b[k,n]`
pub(crate) fn gemm<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let row = |(i, ci): (usize, &mut [T])| {
        let ai = &a[i * k..(i + 1) * k];
        for (p, &av) in ai.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let bp = &b[p * n..(p + 1) * n];
            ci.iter_mut().zip(bp).for_each(|(c, &bv)| *c += av * bv);
        }
    };
    if m * k * n >= PAR_WORK && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

/// `c[m,k] += g[m,n] · b[k,n]ᵀ`
pub(crate) fn gemm_nt<T: Scalar>(g: &[T], b: &[T], c: &mut [T], m: usize, n: usize, k: usize) {
    let row = |(i, ci): (usize, &mut [T])| {
        let gi = &g[i * n..(i + 1) * n];
        for (p, cv) in ci.iter_mut().enumerate() {
            let bp = &b[p * n..(p + 1) * n];
            *cv += gi.iter().zip(bp).map(|(&x, &y)| x * y).sum::<T>();
        }
    };
    if m * k * n >= PAR_WORK && m > 1 {
        c.par_chunks_mut(k).enumerate().for_each(row);
    } else {
        c.chunks_mut(k).enumerate().for_each(row);
    }
}

/// `c[k,n] += a[m,k]ᵀ · g[m,n]`
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], g: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let row = |(p, cp): (usize, &mut [T])| {
        for i in 0..m {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let gi = &g[i * n..(i + 1) * n];
            cp.iter_mut().zip(gi).for_each(|(c, &gv)| *c += av * gv);
        }
    };
    if m * k * n >= PAR_WORK && k > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

impl<T: Scalar> Tensor<T> {
    /// Matrix product over the last two axes with broadcast batch axes.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::dim("matmul", sa, sb));
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let batch = broadcast_shape(ba, bb).ok_or_else(|| Error::dim("matmul", sa, sb))?;
        let ia = broadcast_index(&batch, ba);
        let ib = broadcast_index(&batch, bb);
        let nb = ia.len();
        let (a, b) = (self.data(), other.data());
        let mut out = vec![T::zero(); nb * m * n];
        for (bi, c) in out.chunks_mut(m * n).enumerate() {
            gemm(
                &a[ia[bi] * m * k..(ia[bi] + 1) * m * k],
                &b[ib[bi] * k * n..(ib[bi] + 1) * k * n],
                c,
                m,
                k,
                n,
            );
        }
        let mut shape = batch;
        shape.extend([m, n]);
        Ok(Tensor::from_op(
            out,
            shape,
            "matmul",
            vec![self.clone(), other.clone()],
            Box::new(move |g, _, inputs| {
                let (ta, tb) = (&inputs[0], &inputs[1]);
                let (a, b) = (ta.data(), tb.data());
                let ga = ta.requires_grad().then(|| {
                    let mut ga = vec![T::zero(); a.len()];
                    for bi in 0..nb {
                        gemm_nt(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &b[ib[bi] * k * n..(ib[bi] + 1) * k * n],
                            &mut ga[ia[bi] * m * k..(ia[bi] + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    ga
                });
                let gb = tb.requires_grad().then(|| {
                    let mut gb = vec![T::zero(); b.len()];
                    for bi in 0..nb {
                        gemm_tn(
                            &a[ia[bi] * m * k..(ia[bi] + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut gb[ib[bi] * k * n..(ib[bi] + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_times_b_is_b() {
        let eye =
            Tensor::<f64>::new(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], &[3, 3]).unwrap();
        let b = Tensor::<f64>::new((1..=9).map(f64::from).collect(), &[3, 3]).unwrap();
        assert_eq!(eye.matmul(&b).unwrap().to_vec(), b.to_vec());
    }

    #[test]
    fn permutation_example() {
        let a = Tensor::<f64>::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let p = Tensor::<f64>::new(vec![0.0, 1.0, 1.0, 0.0], &[2, 2]).unwrap();
        assert_eq!(a.matmul(&p).unwrap().to_vec(), vec![2.0, 1.0, 4.0, 3.0]);
    }

    #[test]
    fn inner_mismatch_reports_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[4, 2]);
        match a.matmul(&b) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 2]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn batch_broadcast() {
        let a = Tensor::<f64>::new((0..12).map(f64::from).collect(), &[2, 2, 3]).unwrap();
        let b = Tensor::<f64>::new((0..6).map(f64::from).collect(), &[3, 2]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 2, 2]);
        // second batch, first row: [6,7,8]·[[0,1],[2,3],[4,5]] = [46, 67]
        assert_eq!(&c.to_vec()[4..6], &[46.0, 67.0]);
    }
}
