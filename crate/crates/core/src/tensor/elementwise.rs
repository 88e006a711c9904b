use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{strides, Tensor};

const PAR_THRESHOLD: usize = 1 << 15;

/// Result shape of broadcasting two shapes (numpy rules, right-aligned).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each flat index of `out_shape`, the flat index into a tensor of
/// `in_shape` broadcast against it.
pub(crate) fn broadcast_index(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let in_strides = strides(in_shape);
    let mut eff = vec![0usize; rank];
    for i in 0..in_shape.len() {
        let o = i + rank - in_shape.len();
        eff[o] = if in_shape[i] == 1 { 0 } else { in_strides[i] };
    }
    let n: usize = out_shape.iter().product();
    let mut idx = vec![0usize; n];
    let mut counter = vec![0usize; rank];
    let mut cur = 0usize;
    for slot in idx.iter_mut() {
        *slot = cur;
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            cur += eff[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            cur -= eff[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    idx
}

fn reduce_to<T: Scalar>(grad: &[T], index: &[usize], len: usize) -> Vec<T> {
    let mut out = vec![T::zero(); len];
    for (g, &i) in grad.iter().zip(index) {
        out[i] += *g;
    }
    out
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl<T: Scalar> Tensor<T> {
    fn unary<F, D>(&self, name: &'static str, f: F, df: D) -> Tensor<T>
    where
        F: Fn(T) -> T + Sync,
        D: Fn(T, T) -> T + Send + Sync + 'static,
    {
        let x = self.data();
        let data: Vec<T> = if x.len() >= PAR_THRESHOLD {
            x.par_iter().map(|&v| f(v)).collect()
        } else {
            x.iter().map(|&v| f(v)).collect()
        };
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            name,
            vec![self.clone()],
            Box::new(move |g, out, inputs| {
                let x = inputs[0].data();
                let gx = g
                    .iter()
                    .zip(x)
                    .zip(out)
                    .map(|((&g, &x), &y)| g * df(x, y))
                    .collect();
                vec![Some(gx)]
            }),
        )
    }

    pub fn neg(&self) -> Tensor<T> {
        self.unary("neg", |v| -v, |_, _| -T::one())
    }

    pub fn exp(&self) -> Tensor<T> {
        self.unary("exp", |v| v.exp(), |_, y| y)
    }

    /// Natural logarithm. Inputs must be positive.
    pub fn log(&self) -> Tensor<T> {
        self.unary("log", |v| v.ln(), |x, _| T::one() / x)
    }

    pub fn relu(&self) -> Tensor<T> {
        self.unary(
            "relu",
            |v| if v > T::zero() { v } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    /// Exponential linear unit with alpha = 1.
    pub fn elu(&self) -> Tensor<T> {
        self.unary(
            "elu",
            |v| if v > T::zero() { v } else { v.exp_m1() },
            |x, y| {
                if x > T::zero() {
                    T::one()
                } else {
                    y + T::one()
                }
            },
        )
    }

    /// `elu(x) + 1`, the positive feature map used by linear attention.
    pub fn elu_plus_one(&self) -> Tensor<T> {
        self.unary(
            "elu_plus_one",
            |v| if v > T::zero() { v + T::one() } else { v.exp() },
            |x, y| if x > T::zero() { T::one() } else { y },
        )
    }

    pub fn sqrt(&self) -> Tensor<T> {
        self.unary("sqrt", |v| v.sqrt(), |_, y| T::lit(0.5) / y)
    }

    pub fn powf(&self, p: f64) -> Tensor<T> {
        let pt = T::lit(p);
        self.unary(
            "powf",
            move |v| v.powf(pt),
            move |x, _| pt * x.powf(pt - T::one()),
        )
    }

    pub fn add_scalar(&self, s: f64) -> Tensor<T> {
        let st = T::lit(s);
        self.unary("add_scalar", move |v| v + st, |_, _| T::one())
    }

    pub fn mul_scalar(&self, s: f64) -> Tensor<T> {
        let st = T::lit(s);
        self.unary("mul_scalar", move |v| v * st, move |_, _| st)
    }

    fn binary(&self, other: &Tensor<T>, op: BinOp, name: &'static str) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa == sb {
            let (a, b) = (self.data(), other.data());
            let f = |(&x, &y): (&T, &T)| match op {
                BinOp::Add => x + y,
                BinOp::Sub => x - y,
                BinOp::Mul => x * y,
                BinOp::Div => x / y,
            };
            let data: Vec<T> = if a.len() >= PAR_THRESHOLD {
                a.par_iter().zip(b.par_iter()).map(f).collect()
            } else {
                a.iter().zip(b).map(f).collect()
            };
            return Ok(Tensor::from_op(
                data,
                sa.to_vec(),
                name,
                vec![self.clone(), other.clone()],
                Box::new(move |g, out, inputs| {
                    let (a, b) = (&inputs[0], &inputs[1]);
                    let ga = a.requires_grad().then(|| match op {
                        BinOp::Add | BinOp::Sub => g.to_vec(),
                        BinOp::Mul => g.iter().zip(b.data()).map(|(&g, &y)| g * y).collect(),
                        BinOp::Div => g.iter().zip(b.data()).map(|(&g, &y)| g / y).collect(),
                    });
                    let gb = b.requires_grad().then(|| match op {
                        BinOp::Add => g.to_vec(),
                        BinOp::Sub => g.iter().map(|&g| -g).collect(),
                        BinOp::Mul => g.iter().zip(a.data()).map(|(&g, &x)| g * x).collect(),
                        BinOp::Div => g
                            .iter()
                            .zip(out)
                            .zip(b.data())
                            .map(|((&g, &o), &y)| -g * o / y)
                            .collect(),
                    });
                    vec![ga, gb]
                }),
            ));
        }
        let out_shape = broadcast_shape(sa, sb).ok_or_else(|| Error::dim(name, sa, sb))?;
        let ia = broadcast_index(&out_shape, sa);
        let ib = broadcast_index(&out_shape, sb);
        let (a, b) = (self.data(), other.data());
        let data: Vec<T> = ia
            .iter()
            .zip(&ib)
            .map(|(&i, &j)| {
                let (x, y) = (a[i], b[j]);
                match op {
                    BinOp::Add => x + y,
                    BinOp::Sub => x - y,
                    BinOp::Mul => x * y,
                    BinOp::Div => x / y,
                }
            })
            .collect();
        Ok(Tensor::from_op(
            data,
            out_shape,
            name,
            vec![self.clone(), other.clone()],
            Box::new(move |g, out, inputs| {
                let (a, b) = (&inputs[0], &inputs[1]);
                let ga = a.requires_grad().then(|| {
                    let local: Vec<T> = match op {
                        BinOp::Add | BinOp::Sub => g.to_vec(),
                        BinOp::Mul => g.iter().zip(&ib).map(|(&g, &j)| g * b.data()[j]).collect(),
                        BinOp::Div => g.iter().zip(&ib).map(|(&g, &j)| g / b.data()[j]).collect(),
                    };
                    reduce_to(&local, &ia, a.numel())
                });
                let gb = b.requires_grad().then(|| {
                    let local: Vec<T> = match op {
                        BinOp::Add => g.to_vec(),
                        BinOp::Sub => g.iter().map(|&g| -g).collect(),
                        BinOp::Mul => g.iter().zip(&ia).map(|(&g, &i)| g * a.data()[i]).collect(),
                        BinOp::Div => g
                            .iter()
                            .zip(out)
                            .zip(&ib)
                            .map(|((&g, &o), &j)| -g * o / b.data()[j])
                            .collect(),
                    };
                    reduce_to(&local, &ib, b.numel())
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinOp::Add, "add")
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinOp::Sub, "sub")
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinOp::Mul, "mul")
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinOp::Div, "div")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[4, 1, 3], &[2, 1]), Some(vec![4, 2, 3]));
        assert_eq!(broadcast_shape(&[2, 3], &[2]), None);
    }

    #[test]
    fn broadcast_add_and_grad() {
        let a = Tensor::<f64>::parameter(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        let b = Tensor::<f64>::parameter(vec![10.0, 20.0], &[2, 1]).unwrap();
        let c = a.add(&b).unwrap();
        assert_eq!(c.to_vec(), vec![11.0, 12.0, 13.0, 24.0, 25.0, 26.0]);
        c.sum().backward().unwrap();
        assert_eq!(b.grad().unwrap(), vec![3.0, 3.0]);
        assert_eq!(a.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn mismatched_shapes_report_both() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[4]);
        match a.mul(&b) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn elu_values() {
        let x = Tensor::<f64>::new(vec![0.0, 2.5, -1.0], &[3]).unwrap();
        let y = x.elu().to_vec();
        assert_eq!(y[0], 0.0);
        assert_eq!(y[1], 2.5);
        assert!((y[2] - ((-1.0f64).exp() - 1.0)).abs() < 1e-15);
        let z = x.elu_plus_one().to_vec();
        assert_eq!(z[0], 1.0);
        assert_eq!(z[1], 3.5);
    }
}
