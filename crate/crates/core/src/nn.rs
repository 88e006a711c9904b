//! Named trainable parameters and the small set of layers the network uses.

use std::sync::{Arc, Mutex, RwLock};

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ConvOptions, Tensor};

/// Layer-norm / instance-norm variance floor.
pub const NORM_EPS: f64 = 1e-5;

/// A trainable tensor that can be swapped for an updated leaf between steps.
#[derive(Clone)]
pub struct Param<T: Scalar> {
    name: Arc<str>,
    value: Arc<RwLock<Tensor<T>>>,
}

impl<T: Scalar> Param<T> {
    pub fn name(&self) -> &str {
        &self.name
    }

    /// The current leaf; gradients of any graph built from it land here.
    pub fn get(&self) -> Tensor<T> {
        self.value.read().expect("parameter lock poisoned").clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.get().shape().to_vec()
    }

    /// Replaces the value with a fresh leaf holding `data`.
    pub fn set_data(&self, data: Vec<T>) -> Result<()> {
        let shape = self.shape();
        *self.value.write().expect("parameter lock poisoned") = Tensor::parameter(data, &shape)?;
        Ok(())
    }
}

impl<T: Scalar> std::fmt::Debug for Param<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Param({}, {:?})", self.name, self.shape())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Uniform in `±gain·sqrt(3 / fan_in)`.
    Uniform {
        fan_in: usize,
        gain: f64,
    },
}

struct StoreInner<T: Scalar> {
    params: IndexMap<String, Param<T>>,
    rng: ChaCha8Rng,
}

/// Ordered registry of parameters; creation order is deterministic, so a
/// seed fully determines initialization.
#[derive(Clone)]
pub struct ParamStore<T: Scalar> {
    inner: Arc<Mutex<StoreInner<T>>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: Arc::new(Mutex::new(StoreInner {
                params: IndexMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            })),
        }
    }

    pub fn root(&self) -> ParamPath<T> {
        ParamPath {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    /// All parameters in creation order.
    pub fn params(&self) -> Vec<Param<T>> {
        self.inner
            .lock()
            .expect("store lock poisoned")
            .params
            .values()
            .cloned()
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<Param<T>> {
        self.inner
            .lock()
            .expect("store lock poisoned")
            .params
            .get(name)
            .cloned()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("store lock poisoned").params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_scalars(&self) -> usize {
        self.params().iter().map(|p| p.get().numel()).sum()
    }

    pub fn zero_grad(&self) {
        for p in self.params() {
            p.get().zero_grad();
        }
    }

    fn create(&self, name: String, shape: &[usize], init: Init) -> Result<Param<T>> {
        let mut inner = self.inner.lock().expect("store lock poisoned");
        if inner.params.contains_key(&name) {
            return Err(Error::contract(format!("parameter `{name}` defined twice")));
        }
        let n: usize = shape.iter().product();
        let data: Vec<T> = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Const(v) => vec![T::lit(v); n],
            Init::Uniform { fan_in, gain } => {
                let a = gain * (3.0 / fan_in.max(1) as f64).sqrt();
                (0..n)
                    .map(|_| T::lit(inner.rng.gen_range(-a..=a)))
                    .collect()
            }
        };
        let p = Param {
            name: name.clone().into(),
            value: Arc::new(RwLock::new(Tensor::parameter(data, shape)?)),
        };
        inner.params.insert(name, p.clone());
        Ok(p)
    }
}

/// Hierarchical name prefix into a [`ParamStore`].
#[derive(Clone)]
pub struct ParamPath<T: Scalar> {
    store: ParamStore<T>,
    prefix: String,
}

impl<T: Scalar> ParamPath<T> {
    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Self {
            store: self.store.clone(),
            prefix,
        }
    }

    pub fn param(&self, name: &str, shape: &[usize], init: Init) -> Result<Param<T>> {
        self.store.create(self.pp(name).prefix, shape, init)
    }
}

/// Instance normalization of `[C, ...]` over everything but the channel axis.
pub fn instance_norm<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape().to_vec();
    let c = s[0];
    let rest: usize = s[1..].iter().product();
    x.reshape(&[c, rest])?
        .normalize_last_axis(NORM_EPS)?
        .reshape(&s)
}

/// 2D convolution with bias on `[C, H, W]`.
pub struct Conv2d<T: Scalar> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub opts: ConvOptions,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        p: &ParamPath<T>,
        ci: usize,
        co: usize,
        k: usize,
        opts: ConvOptions,
    ) -> Result<Self> {
        Ok(Self {
            weight: p.param(
                "weight",
                &[co, ci, k, k],
                Init::Uniform {
                    fan_in: ci * k * k,
                    gain: 1.0,
                },
            )?,
            bias: p.param("bias", &[co, 1, 1], Init::Zeros)?,
            opts,
        })
    }

    /// Convolution whose weight starts at exactly zero.
    pub fn zeroed(
        p: &ParamPath<T>,
        ci: usize,
        co: usize,
        k: usize,
        opts: ConvOptions,
    ) -> Result<Self> {
        Ok(Self {
            weight: p.param("weight", &[co, ci, k, k], Init::Zeros)?,
            bias: p.param("bias", &[co, 1, 1], Init::Zeros)?,
            opts,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.conv2d(&self.weight.get(), self.opts)?
            .add(&self.bias.get())
    }
}

/// 3D convolution with bias on `[C, D, H, W]`.
pub struct Conv3d<T: Scalar> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub opts: ConvOptions,
}

impl<T: Scalar> Conv3d<T> {
    pub fn new(
        p: &ParamPath<T>,
        ci: usize,
        co: usize,
        k: usize,
        opts: ConvOptions,
    ) -> Result<Self> {
        Ok(Self {
            weight: p.param(
                "weight",
                &[co, ci, k, k, k],
                Init::Uniform {
                    fan_in: ci * k * k * k,
                    gain: 1.0,
                },
            )?,
            bias: p.param("bias", &[co, 1, 1, 1], Init::Zeros)?,
            opts,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.conv3d(&self.weight.get(), self.opts)?
            .add(&self.bias.get())
    }
}

/// `y = x·W + b` on `[L, in]`.
pub struct Linear<T: Scalar> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(p: &ParamPath<T>, fan_in: usize, fan_out: usize, gain: f64) -> Result<Self> {
        Ok(Self {
            weight: p.param("weight", &[fan_in, fan_out], Init::Uniform { fan_in, gain })?,
            bias: p.param("bias", &[fan_out], Init::Zeros)?,
        })
    }

    pub fn zeroed(p: &ParamPath<T>, fan_in: usize, fan_out: usize) -> Result<Self> {
        Ok(Self {
            weight: p.param("weight", &[fan_in, fan_out], Init::Zeros)?,
            bias: p.param("bias", &[fan_out], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.matmul(&self.weight.get())?.add(&self.bias.get())
    }
}

/// Per-token normalization with learned scale and shift on `[L, F]`.
pub struct LayerNorm<T: Scalar> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(p: &ParamPath<T>, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: p.param("gamma", &[dim], Init::Const(1.0))?,
            beta: p.param("beta", &[dim], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.normalize_last_axis(NORM_EPS)?
            .mul(&self.gamma.get())?
            .add(&self.beta.get())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_hierarchical_and_unique() {
        let store = ParamStore::<f64>::new(0);
        let root = store.root();
        let c = Conv2d::new(&root.pp("fpn").pp("conv0"), 3, 8, 3, ConvOptions::same(3)).unwrap();
        assert_eq!(c.weight.name(), "fpn.conv0.weight");
        assert!(root
            .pp("fpn")
            .pp("conv0")
            .param("weight", &[1], Init::Zeros)
            .is_err());
        assert_eq!(store.len(), 2);
        assert_eq!(store.num_scalars(), 8 * 3 * 9 + 8);
    }

    #[test]
    fn same_seed_same_init() {
        let a = ParamStore::<f32>::new(5);
        let b = ParamStore::<f32>::new(5);
        let la = Linear::new(&a.root(), 4, 3, 1.0).unwrap();
        let lb = Linear::new(&b.root(), 4, 3, 1.0).unwrap();
        assert_eq!(la.weight.get().to_vec(), lb.weight.get().to_vec());
    }

    #[test]
    fn set_data_replaces_leaf() {
        let store = ParamStore::<f64>::new(0);
        let p = store.root().param("w", &[2], Init::Const(1.0)).unwrap();
        let y = p.get().mul(&p.get()).unwrap().sum();
        y.backward().unwrap();
        assert_eq!(p.get().grad(), Some(vec![2.0, 2.0]));
        p.set_data(vec![3.0, 4.0]).unwrap();
        assert_eq!(p.get().grad(), None);
        assert!(p.get().requires_grad());
        assert_eq!(p.get().to_vec(), vec![3.0, 4.0]);
    }

    #[test]
    fn instance_norm_zero_mean_per_channel() {
        let x = Tensor::<f64>::from_f64(&[1.0, 2.0, 3.0, 4.0, 10.0, 10.0, 12.0, 12.0], &[2, 2, 2])
            .unwrap();
        let y = instance_norm(&x).unwrap().to_vec();
        assert!(y[..4].iter().sum::<f64>().abs() < 1e-12);
        assert!(y[4..].iter().sum::<f64>().abs() < 1e-12);
    }
}
