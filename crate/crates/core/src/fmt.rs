//! Feature matching transformer: positional encoding, multi-head linear
//! attention, shared-weight intra-attention and unidirectional
//! inter-attention from source views onto the reference.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, ParamPath};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Normalizer floor in linear attention.
pub const ATTENTION_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct FmtConfig {
    /// Attention blocks (each: intra then inter).
    pub blocks: usize,
    pub heads: usize,
    /// Divide by `Φ(Q)(Φ(K)ᵀ𝟙) + ε`; off gives the bare `Φ(Q)(Φ(K)ᵀV)`.
    pub normalize: bool,
    /// Start the feed-forward output layer at zero so every block is the identity.
    pub zero_init_output: bool,
}

impl Default for FmtConfig {
    fn default() -> Self {
        Self {
            blocks: 4,
            heads: 8,
            normalize: true,
            zero_init_output: false,
        }
    }
}

/// Frequency of channel group member `k` out of `n` per group.
fn pe_frequency(k: usize, n: usize) -> f64 {
    10000f64.powf(-(k as f64) / n as f64)
}

/// 2D sinusoidal encoding `[C, H, W]`: four channel groups holding
/// `sin(ωx)`, `cos(ωx)`, `sin(ωy)`, `cos(ωy)` at geometrically spaced `ω`.
pub fn positional_encoding<T: Scalar>(c: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    if !c.is_multiple_of(4) || c == 0 {
        return Err(Error::dim("positional_encode", &[c], &[4]));
    }
    let g = c / 4;
    let mut out = vec![0.0; c * h * w];
    for k in 0..g {
        let om = pe_frequency(k, g);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let (xf, yf) = (om * x as f64, om * y as f64);
                out[k * h * w + i] = xf.sin();
                out[(g + k) * h * w + i] = xf.cos();
                out[(2 * g + k) * h * w + i] = yf.sin();
                out[(3 * g + k) * h * w + i] = yf.cos();
            }
        }
    }
    Tensor::from_f64(&out, &[c, h, w])
}

pub fn positional_encode<T: Scalar>(feat: &Tensor<T>) -> Result<Tensor<T>> {
    let s = feat.shape();
    if s.len() != 3 {
        return Err(Error::dim("positional_encode", s, &[]));
    }
    feat.add(&positional_encoding(s[0], s[1], s[2])?)
}

/// `[C, H, W]` to a token sequence `[H·W, C]`.
pub fn flatten_tokens<T: Scalar>(feat: &Tensor<T>) -> Result<Tensor<T>> {
    let s = feat.shape();
    if s.len() != 3 {
        return Err(Error::dim("flatten_tokens", s, &[]));
    }
    feat.reshape(&[s[0], s[1] * s[2]])?.transpose(0, 1)
}

pub fn unflatten_tokens<T: Scalar>(tokens: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = tokens.shape();
    if s.len() != 2 || s[0] != h * w {
        return Err(Error::dim("unflatten_tokens", s, &[h * w]));
    }
    tokens.transpose(0, 1)?.reshape(&[s[1], h, w])
}

fn split_heads<T: Scalar>(x: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 2 || heads == 0 || !s[1].is_multiple_of(heads) {
        return Err(Error::dim("split_heads", s, &[heads]));
    }
    x.reshape(&[s[0], heads, s[1] / heads])?.permute(&[1, 0, 2])
}

fn merge_heads<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape().to_vec();
    x.permute(&[1, 0, 2])?.reshape(&[s[1], s[0] * s[2]])
}

/// Multi-head linear attention in the factored order
/// `Φ(Q)·(Φ(K)ᵀV)` with `Φ = elu + 1`; cost `O(L·F²/N_h)`.
///
/// `q: [L, F]`, `k`, `v: [S, F]`.
pub fn linear_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    normalize: bool,
) -> Result<Tensor<T>> {
    if k.shape() != v.shape() || q.rank() != 2 || k.rank() != 2 || q.shape()[1] != k.shape()[1] {
        return Err(Error::dim("linear_attention", q.shape(), k.shape()));
    }
    let phi_q = split_heads(&q.elu_plus_one(), heads)?; // [H, L, d]
    let phi_k = split_heads(&k.elu_plus_one(), heads)?; // [H, S, d]
    let vh = split_heads(v, heads)?;
    let kv = phi_k.transpose(1, 2)?.matmul(&vh)?; // [H, d, d]
    let num = phi_q.matmul(&kv)?; // [H, L, d]
    let out = if normalize {
        let ksum = phi_k.sum_axis(1, true)?; // [H, 1, d]
        let den = phi_q
            .mul(&ksum)?
            .sum_axis(2, true)?
            .add_scalar(ATTENTION_EPS);
        num.div(&den)?
    } else {
        num
    };
    merge_heads(&out)
}

/// Multiply-adds of [`linear_attention`] for `L` queries, `S` keys, width
/// `F` and `N_h` heads: `Φ(K)ᵀV`, `Φ(Q)·KV`, and the normalizer terms.
pub fn linear_attention_flops(l: usize, s: usize, f: usize, heads: usize, normalize: bool) -> u64 {
    let d = (f / heads) as u64;
    let (l, s, h) = (l as u64, s as u64, heads as u64);
    let mut n = h * (s * d * d + l * d * d);
    if normalize {
        n += h * (s * d + l * d);
    }
    n
}

/// Explicit `O(L·S)` evaluation: rows of `Φ(Q)Φ(K)ᵀ`, normalized when
/// requested, applied to `V`. Plain loops, for checking the factored form.
#[allow(clippy::too_many_arguments)]
pub fn kernel_attention_quadratic(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    l: usize,
    s: usize,
    f: usize,
    heads: usize,
    normalize: bool,
) -> Vec<f64> {
    let phi = |x: f64| if x > 0.0 { x + 1.0 } else { x.exp() };
    let d = f / heads;
    let mut out = vec![0.0; l * f];
    for hh in 0..heads {
        for i in 0..l {
            let mut weights = vec![0.0; s];
            for j in 0..s {
                weights[j] = (0..d)
                    .map(|c| phi(q[i * f + hh * d + c]) * phi(k[j * f + hh * d + c]))
                    .sum();
            }
            let z: f64 = if normalize {
                weights.iter().sum::<f64>() + ATTENTION_EPS
            } else {
                1.0
            };
            for c in 0..d {
                out[i * f + hh * d + c] = (0..s)
                    .map(|j| weights[j] * v[j * f + hh * d + c])
                    .sum::<f64>()
                    / z;
            }
        }
    }
    out
}

/// Scaled dot-product softmax attention, one query row at a time
/// (`O(L·S·F)` time, `O(S)` scratch per row). Benchmark baseline.
pub fn softmax_attention<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    l: usize,
    s: usize,
    f: usize,
    heads: usize,
) -> Vec<T> {
    let d = f / heads;
    let scale = T::lit(1.0 / (d as f64).sqrt());
    let mut out = vec![T::zero(); l * f];
    out.par_chunks_mut(f).enumerate().for_each(|(i, row)| {
        let mut logits = vec![T::zero(); s];
        for hh in 0..heads {
            let qi = &q[i * f + hh * d..i * f + (hh + 1) * d];
            let mut m = T::neg_infinity();
            for (j, lg) in logits.iter_mut().enumerate() {
                let kj = &k[j * f + hh * d..j * f + (hh + 1) * d];
                let dot = qi.iter().zip(kj).fold(T::zero(), |a, (&x, &y)| a + x * y) * scale;
                *lg = dot;
                if dot > m {
                    m = dot;
                }
            }
            let mut z = T::zero();
            let acc = &mut row[hh * d..(hh + 1) * d];
            for (j, lg) in logits.iter().enumerate() {
                let e = (*lg - m).exp();
                z += e;
                for (a, &vv) in acc.iter_mut().zip(&v[j * f + hh * d..j * f + (hh + 1) * d]) {
                    *a += e * vv;
                }
            }
            acc.iter_mut().for_each(|a| *a /= z);
        }
    });
    out
}

/// Pre-norm attention layer followed by the feed-forward merge
/// `x + MLP([x, message])`.
pub struct AttentionLayer<T: Scalar> {
    norm: LayerNorm<T>,
    wq: Linear<T>,
    wk: Linear<T>,
    wv: Linear<T>,
    merge: Linear<T>,
    mlp1: Linear<T>,
    mlp2: Linear<T>,
    heads: usize,
    normalize: bool,
}

impl<T: Scalar> AttentionLayer<T> {
    pub fn new(p: &ParamPath<T>, f: usize, cfg: &FmtConfig) -> Result<Self> {
        if cfg.heads == 0 || !f.is_multiple_of(cfg.heads) {
            return Err(Error::Config(format!(
                "feature width {f} is not divisible by {} heads",
                cfg.heads
            )));
        }
        let mlp2 = if cfg.zero_init_output {
            Linear::zeroed(&p.pp("mlp2"), 2 * f, f)?
        } else {
            Linear::new(&p.pp("mlp2"), 2 * f, f, 0.1)?
        };
        Ok(Self {
            norm: LayerNorm::new(&p.pp("norm"), f)?,
            wq: Linear::new(&p.pp("q"), f, f, 1.0)?,
            wk: Linear::new(&p.pp("k"), f, f, 1.0)?,
            wv: Linear::new(&p.pp("v"), f, f, 1.0)?,
            merge: Linear::new(&p.pp("merge"), f, f, 1.0)?,
            mlp1: Linear::new(&p.pp("mlp1"), 2 * f, 2 * f, 1.0)?,
            mlp2,
            heads: cfg.heads,
            normalize: cfg.normalize,
        })
    }

    /// Updates `x: [L, F]` with the message gathered from `source: [S, F]`.
    pub fn forward(&self, x: &Tensor<T>, source: &Tensor<T>) -> Result<Tensor<T>> {
        let xn = self.norm.forward(x)?;
        let sn = if x.id() == source.id() {
            xn.clone()
        } else {
            self.norm.forward(source)?
        };
        let q = self.wq.forward(&xn)?;
        let k = self.wk.forward(&sn)?;
        let v = self.wv.forward(&sn)?;
        let msg = self
            .merge
            .forward(&linear_attention(&q, &k, &v, self.heads, self.normalize)?)?;
        let h = self
            .mlp1
            .forward(&Tensor::concat(&[x.clone(), msg], 1)?)?
            .relu();
        x.add(&self.mlp2.forward(&h)?)
    }
}

/// Intra-attention shared by all views, then inter-attention that updates
/// sources only.
pub struct AttentionBlock<T: Scalar> {
    pub intra: AttentionLayer<T>,
    pub inter: AttentionLayer<T>,
}

impl<T: Scalar> AttentionBlock<T> {
    pub fn new(p: &ParamPath<T>, f: usize, cfg: &FmtConfig) -> Result<Self> {
        Ok(Self {
            intra: AttentionLayer::new(&p.pp("intra"), f, cfg)?,
            inter: AttentionLayer::new(&p.pp("inter"), f, cfg)?,
        })
    }

    /// Intra step alone; the same parameters serve every view.
    pub fn intra_step(&self, views: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        views.iter().map(|x| self.intra.forward(x, x)).collect()
    }

    /// `views[0]` is the reference; it is returned untouched.
    pub fn inter_step(&self, views: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        let reference = &views[0];
        let mut out = vec![reference.clone()];
        for src in &views[1..] {
            out.push(self.inter.forward(src, reference)?);
        }
        Ok(out)
    }

    /// Token sequences `[L, F]`, reference first.
    pub fn forward(&self, views: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        if views.len() < 2 {
            return Err(Error::contract(format!(
                "attention block needs a reference and at least one source, got {} views",
                views.len()
            )));
        }
        let s = views[0].shape();
        if views.iter().any(|v| v.shape() != s) {
            return Err(Error::dim("attention_block", s, views[1].shape()));
        }
        self.inter_step(&self.intra_step(views)?)
    }
}

pub struct FeatureMatchingTransformer<T: Scalar> {
    pub blocks: Vec<AttentionBlock<T>>,
}

impl<T: Scalar> FeatureMatchingTransformer<T> {
    pub fn new(p: &ParamPath<T>, f: usize, cfg: &FmtConfig) -> Result<Self> {
        let blocks = (0..cfg.blocks)
            .map(|i| AttentionBlock::new(&p.pp(format!("block{i}")), f, cfg))
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    /// Positional encoding, flatten, blocks, unflatten. `feats[0]` is the
    /// reference, every entry `[C, H, W]`.
    pub fn forward(&self, feats: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        let s = feats
            .first()
            .ok_or_else(|| Error::contract("transformer needs at least one view"))?
            .shape()
            .to_vec();
        if s.len() != 3 {
            return Err(Error::dim("fmt_forward", &s, &[]));
        }
        let (h, w) = (s[1], s[2]);
        let mut tokens = feats
            .iter()
            .map(|f| flatten_tokens(&positional_encode(f)?))
            .collect::<Result<Vec<_>>>()?;
        for b in &self.blocks {
            tokens = b.forward(&tokens)?;
        }
        tokens.iter().map(|t| unflatten_tokens(t, h, w)).collect()
    }
}

pub fn fmt_forward<T: Scalar>(
    feats: &[Tensor<T>],
    fmt: &FeatureMatchingTransformer<T>,
) -> Result<Vec<Tensor<T>>> {
    fmt.forward(feats)
}
