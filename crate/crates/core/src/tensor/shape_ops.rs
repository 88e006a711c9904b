use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{check_axis, strides, Tensor};

impl<T: Scalar> Tensor<T> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::dim("reshape", self.shape(), shape));
        }
        Ok(self.view_as(shape.to_vec(), "reshape"))
    }

    /// Collapses all axes into one.
    pub fn flatten(&self) -> Tensor<T> {
        self.view_as(vec![self.numel()], "flatten")
    }

    pub fn unsqueeze(&self, axis: usize) -> Result<Tensor<T>> {
        if axis > self.rank() {
            return Err(Error::dim("unsqueeze", self.shape(), &[axis]));
        }
        let mut s = self.shape().to_vec();
        s.insert(axis, 1);
        Ok(self.view_as(s, "unsqueeze"))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank
            || axes.iter().any(|&a| {
                if a >= rank || seen[a] {
                    return true;
                }
                seen[a] = true;
                false
            })
        {
            return Err(Error::dim("permute", self.shape(), axes));
        }
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
        let in_strides = strides(&in_shape);
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let index = gather_index(&out_shape, &src_strides);
        let x = self.data();
        let data: Vec<T> = index.iter().map(|&i| x[i]).collect();
        Ok(Tensor::from_op(
            data,
            out_shape,
            "permute",
            vec![self.clone()],
            Box::new(move |g, _, inputs| {
                let mut gx = vec![T::zero(); inputs[0].numel()];
                for (&gi, &i) in g.iter().zip(&index) {
                    gx[i] = gi;
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Swaps two axes.
    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor<T>> {
        check_axis("transpose", self.shape(), a)?;
        check_axis("transpose", self.shape(), b)?;
        let mut axes: Vec<usize> = (0..self.rank()).collect();
        axes.swap(a, b);
        self.permute(&axes)
    }

    /// Contiguous sub-range `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        check_axis("narrow", self.shape(), axis)?;
        if start + len > self.shape()[axis] {
            return Err(Error::dim("narrow", self.shape(), &[axis, start, len]));
        }
        let (outer, n, inner) = super::reduce::split_axis(self.shape(), axis);
        let x = self.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&x[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Tensor::from_op(
            data,
            shape,
            "narrow",
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    gx[(o * n + start) * inner..(o * n + start + len) * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Joins tensors along an existing axis; all other extents must agree.
    pub fn concat(tensors: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = tensors
            .first()
            .ok_or_else(|| Error::contract("concat of an empty list"))?;
        check_axis("concat", first.shape(), axis)?;
        for t in tensors {
            let ok = t.rank() == first.rank()
                && t.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::dim("concat", first.shape(), t.shape()));
            }
        }
        let (outer, _, inner) = super::reduce::split_axis(first.shape(), axis);
        let lens: Vec<usize> = tensors.iter().map(|t| t.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (t, &l) in tensors.iter().zip(&lens) {
                data.extend_from_slice(&t.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Ok(Tensor::from_op(
            data,
            shape,
            "concat",
            tensors.to_vec(),
            Box::new(move |g, _, inputs| {
                let mut grads: Vec<Vec<T>> = inputs
                    .iter()
                    .map(|t| Vec::with_capacity(t.numel()))
                    .collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (gi, &l) in grads.iter_mut().zip(&lens) {
                        gi.extend_from_slice(&g[off..off + l * inner]);
                        off += l * inner;
                    }
                }
                grads.into_iter().map(Some).collect()
            }),
        ))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(tensors: &[Tensor<T>]) -> Result<Tensor<T>> {
        let expanded = tensors
            .iter()
            .map(|t| t.unsqueeze(0))
            .collect::<Result<Vec<_>>>()?;
        Tensor::concat(&expanded, 0)
    }
}

/// Flat source index for each output element, given the source strides
/// associated with each output axis.
fn gather_index(out_shape: &[usize], src_strides: &[usize]) -> Vec<usize> {
    let n: usize = out_shape.iter().product();
    let rank = out_shape.len();
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    let mut cur = 0usize;
    for _ in 0..n {
        idx.push(cur);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            cur += src_strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            cur -= src_strides[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    idx
}
