//! Feature pyramid, deformable (adaptive receptive field) convolution and
//! the upsample-and-add pathway between pyramid levels.

use crate::error::{Error, Result};
use crate::nn::{instance_norm, Conv2d, ParamPath};
use crate::scalar::Scalar;
use crate::tensor::{ConvOptions, Tensor};

/// Channels at the 1/4, 1/2 and full-resolution levels.
pub const PYRAMID_CHANNELS: [usize; 3] = [32, 16, 8];

/// Per-view features, coarsest level first.
#[derive(Debug, Clone)]
pub struct FeaturePyramid<T: Scalar> {
    pub levels: [Tensor<T>; 3],
}

fn conv_in_relu<T: Scalar>(c: &Conv2d<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(instance_norm(&c.forward(x)?)?.relu())
}

/// Strided encoder with top-down lateral merges.
pub struct FeatureNet<T: Scalar> {
    conv0: [Conv2d<T>; 2],
    conv1: [Conv2d<T>; 2],
    conv2: [Conv2d<T>; 2],
    lateral1: Conv2d<T>,
    lateral0: Conv2d<T>,
    out: [Conv2d<T>; 3],
}

impl<T: Scalar> FeatureNet<T> {
    pub fn new(p: &ParamPath<T>, in_channels: usize) -> Result<Self> {
        let [c1, c2, c3] = PYRAMID_CHANNELS;
        let s = ConvOptions::same(3);
        let d = ConvOptions::strided(3, 2);
        let one = ConvOptions::same(1);
        Ok(Self {
            conv0: [
                Conv2d::new(&p.pp("conv0a"), in_channels, c3, 3, s)?,
                Conv2d::new(&p.pp("conv0b"), c3, c3, 3, s)?,
            ],
            conv1: [
                Conv2d::new(&p.pp("conv1a"), c3, c2, 3, d)?,
                Conv2d::new(&p.pp("conv1b"), c2, c2, 3, s)?,
            ],
            conv2: [
                Conv2d::new(&p.pp("conv2a"), c2, c1, 3, d)?,
                Conv2d::new(&p.pp("conv2b"), c1, c1, 3, s)?,
            ],
            lateral1: Conv2d::new(&p.pp("lateral1"), c2, c1, 1, one)?,
            lateral0: Conv2d::new(&p.pp("lateral0"), c3, c1, 1, one)?,
            out: [
                Conv2d::new(&p.pp("out1"), c1, c1, 1, one)?,
                Conv2d::new(&p.pp("out2"), c1, c2, 3, s)?,
                Conv2d::new(&p.pp("out3"), c1, c3, 3, s)?,
            ],
        })
    }

    /// `image: [C, H, W]` with `H`, `W` multiples of 4.
    pub fn extract_pyramid(&self, image: &Tensor<T>) -> Result<FeaturePyramid<T>> {
        let s = image.shape();
        if s.len() != 3
            || !s[1].is_multiple_of(4)
            || !s[2].is_multiple_of(4)
            || s[1] == 0
            || s[2] == 0
        {
            return Err(Error::dim("extract_pyramid", s, &[0, 4, 4]));
        }
        let f0 = conv_in_relu(&self.conv0[1], &conv_in_relu(&self.conv0[0], image)?)?;
        let f1 = conv_in_relu(&self.conv1[1], &conv_in_relu(&self.conv1[0], &f0)?)?;
        let f2 = conv_in_relu(&self.conv2[1], &conv_in_relu(&self.conv2[0], &f1)?)?;
        let inner1 = f2
            .upsample_bilinear_2x()?
            .add(&self.lateral1.forward(&f1)?)?;
        let inner0 = inner1
            .upsample_bilinear_2x()?
            .add(&self.lateral0.forward(&f0)?)?;
        Ok(FeaturePyramid {
            levels: [
                self.out[0].forward(&f2)?,
                self.out[1].forward(&inner1)?,
                self.out[2].forward(&inner0)?,
            ],
        })
    }
}

/// Deformable 3×3 convolution (no modulation) whose offsets come from a
/// zero-initialized 3×3 convolution over the same input.
pub struct DeformableConv<T: Scalar> {
    /// `[C_out, C_in, 3, 3]`
    pub kernel: Conv2d<T>,
    /// Predicts `2·9` offset channels, `(dx, dy)` per tap in row-major tap order.
    pub offsets: Conv2d<T>,
}

impl<T: Scalar> DeformableConv<T> {
    pub fn new(p: &ParamPath<T>, ci: usize, co: usize) -> Result<Self> {
        Ok(Self {
            kernel: Conv2d::new(&p.pp("kernel"), ci, co, 3, ConvOptions::same(3))?,
            offsets: Conv2d::zeroed(&p.pp("offsets"), ci, 18, 3, ConvOptions::same(3))?,
        })
    }

    pub fn forward(&self, feat: &Tensor<T>) -> Result<Tensor<T>> {
        let off = self.offsets.forward(feat)?;
        deform_conv2d(feat, &off, &self.kernel.weight.get())?.add(&self.kernel.bias.get())
    }
}

/// Adaptive receptive field: deformable convolution of `feat`.
pub fn arf_apply<T: Scalar>(feat: &Tensor<T>, params: &DeformableConv<T>) -> Result<Tensor<T>> {
    params.forward(feat)
}

/// Deformable convolution v1: tap `k` of output pixel `p` samples `x`
/// bilinearly at `p + tap_k + offset_k(p)`.
///
/// `x: [C_in, H, W]`, `offsets: [18, H, W]`, `kernel: [C_out, C_in, 3, 3]`.
/// Samples outside the image read zero and blend continuously toward it.
pub fn deform_conv2d<T: Scalar>(
    x: &Tensor<T>,
    offsets: &Tensor<T>,
    kernel: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (xs, os, ks) = (x.shape(), offsets.shape(), kernel.shape());
    if xs.len() != 3 || ks.len() != 4 || ks[1] != xs[0] || ks[2] != 3 || ks[3] != 3 {
        return Err(Error::dim("deform_conv2d", xs, ks));
    }
    let (ci, h, w) = (xs[0], xs[1], xs[2]);
    if os != [18, h, w] {
        return Err(Error::dim("deform_conv2d", os, &[18, h, w]));
    }
    let co = ks[0];
    // A one-pixel zero border keeps sampling continuous where taps leave
    // the image; grid coordinates are shifted into the padded frame.
    let zc = Tensor::zeros(&[ci, h, 1]);
    let xp = Tensor::concat(&[zc.clone(), x.clone(), zc], 2)?;
    let zr = Tensor::zeros(&[ci, 1, w + 2]);
    let xp = Tensor::concat(&[zr.clone(), xp, zr], 1)?;
    let mut base = Vec::with_capacity(9 * h * w * 2);
    for k in 0..9 {
        let (dy, dx) = ((k / 3) as f64, (k % 3) as f64);
        for y in 0..h {
            for xx in 0..w {
                base.push(T::lit(xx as f64 + dx));
                base.push(T::lit(y as f64 + dy));
            }
        }
    }
    let base = Tensor::new(base, &[9, h, w, 2])?;
    let grid = offsets
        .reshape(&[9, 2, h, w])?
        .permute(&[0, 2, 3, 1])?
        .add(&base)?;
    let (sampled, _) = xp.grid_sample_2d(&grid)?; // [9, C_in, H, W]
    let cols = sampled.permute(&[1, 0, 2, 3])?.reshape(&[ci * 9, h * w])?;
    kernel
        .reshape(&[co, ci * 9])?
        .matmul(&cols)?
        .reshape(&[co, h, w])
}

/// `raw_finer + proj(upsample₂ₓ(transformed_coarse))`, with `proj` a 1×1
/// convolution reconciling channel counts.
pub fn pathway_merge<T: Scalar>(
    transformed_coarse: &Tensor<T>,
    raw_finer: &Tensor<T>,
    proj: &Conv2d<T>,
) -> Result<Tensor<T>> {
    let up = proj.forward(&transformed_coarse.upsample_bilinear_2x()?)?;
    if up.shape() != raw_finer.shape() {
        return Err(Error::dim("pathway_merge", up.shape(), raw_finer.shape()));
    }
    raw_finer.add(&up)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;

    #[test]
    fn pyramid_shapes() {
        let store = ParamStore::<f32>::new(1);
        let net = FeatureNet::new(&store.root(), 3).unwrap();
        let img = Tensor::<f32>::full(&[3, 64, 80], 0.5);
        let p = net.extract_pyramid(&img).unwrap();
        assert_eq!(p.levels[0].shape(), &[32, 16, 20]);
        assert_eq!(p.levels[1].shape(), &[16, 32, 40]);
        assert_eq!(p.levels[2].shape(), &[8, 64, 80]);
        assert!(net
            .extract_pyramid(&Tensor::<f32>::zeros(&[3, 62, 80]))
            .is_err());
    }

    #[test]
    fn zero_offsets_equal_plain_conv() {
        let store = ParamStore::<f64>::new(2);
        let dc = DeformableConv::new(&store.root(), 4, 5).unwrap();
        let x = Tensor::<f64>::from_f64(
            &(0..4 * 6 * 7)
                .map(|v| ((v * 37 % 11) as f64).sin())
                .collect::<Vec<_>>(),
            &[4, 6, 7],
        )
        .unwrap();
        let a = arf_apply(&x, &dc).unwrap();
        let b = dc.kernel.forward(&x).unwrap();
        let diff = a
            .to_vec()
            .iter()
            .zip(b.to_vec())
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max);
        assert!(diff <= 1e-12, "{diff}");
    }

    #[test]
    fn pathway_zero_coarse_is_raw() {
        let store = ParamStore::<f64>::new(3);
        let proj = Conv2d::new(&store.root(), 32, 16, 1, ConvOptions::same(1)).unwrap();
        let raw = Tensor::<f64>::from_f64(&vec![0.25; 16 * 32 * 40], &[16, 32, 40]).unwrap();
        let m = pathway_merge(&Tensor::zeros(&[32, 16, 20]), &raw, &proj).unwrap();
        assert_eq!(m.shape(), &[16, 32, 40]);
        assert_eq!(m.to_vec(), raw.to_vec());
    }
}
