//! Volume regularization, probability volumes and winner-take-all depth.

use crate::error::{Error, Result};
use crate::geometry::DepthHypotheses;
use crate::image::{DepthMap, Map};
use crate::nn::{instance_norm, Conv3d, ParamPath};
use crate::scalar::Scalar;
use crate::tensor::{ConvOptions, Tensor};

/// Depth and confidence at one cascade stage.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthEstimate {
    pub stage: usize,
    pub depth: DepthMap,
    /// Probability mass of the three-hypothesis window around the winner.
    pub confidence: Map,
}

/// Per-stage hypothesis counts and interval decays.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeConfig {
    pub counts: [usize; 3],
    /// Interval multipliers entering stages 2 and 3.
    pub decays: [f64; 2],
    pub d_min: f64,
    pub d_max: f64,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            counts: [16, 8, 4],
            decays: [0.25, 0.5],
            d_min: 1.5,
            d_max: 5.0,
        }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.counts[0] < 2 || self.counts.contains(&0) {
            return Err(Error::Config(format!(
                "invalid hypothesis counts {:?}",
                self.counts
            )));
        }
        if self.counts.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::Config(format!(
                "hypothesis counts must not increase across stages, got {:?}",
                self.counts
            )));
        }
        if self.decays.iter().any(|&d| !(d > 0.0 && d <= 1.0)) {
            return Err(Error::Config(format!(
                "decays must lie in (0, 1], got {:?}",
                self.decays
            )));
        }
        if !(self.d_min > 0.0 && self.d_max > self.d_min) {
            return Err(Error::Config(format!(
                "depth range must satisfy 0 < d_min < d_max (got {}, {})",
                self.d_min, self.d_max
            )));
        }
        Ok(())
    }
}

fn block<T: Scalar>(c: &Conv3d<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(instance_norm(&c.forward(x)?)?.relu())
}

enum RegLayout<T: Scalar> {
    UNet {
        enc0: Conv3d<T>,
        enc1: Conv3d<T>,
        enc2: Conv3d<T>,
        dec1: Conv3d<T>,
        dec0: Conv3d<T>,
    },
    Plain {
        a: Conv3d<T>,
        b: Conv3d<T>,
    },
}

/// 3D U-Net over the `[D, H, W]` correlation volume (8→16→32 channels,
/// stride-2 downsampling, trilinear upsampling with skip additions).
/// Volumes with fewer than four hypotheses use a three-layer stack instead.
pub struct Regularizer<T: Scalar> {
    layout: RegLayout<T>,
    head: Conv3d<T>,
}

impl<T: Scalar> Regularizer<T> {
    pub fn new(p: &ParamPath<T>, depth_count: usize) -> Result<Self> {
        let s = ConvOptions::same(3);
        let d = ConvOptions::strided(3, 2);
        let layout = if depth_count >= 4 {
            RegLayout::UNet {
                enc0: Conv3d::new(&p.pp("enc0"), 1, 8, 3, s)?,
                enc1: Conv3d::new(&p.pp("enc1"), 8, 16, 3, d)?,
                enc2: Conv3d::new(&p.pp("enc2"), 16, 32, 3, d)?,
                dec1: Conv3d::new(&p.pp("dec1"), 32, 16, 3, s)?,
                dec0: Conv3d::new(&p.pp("dec0"), 16, 8, 3, s)?,
            }
        } else {
            RegLayout::Plain {
                a: Conv3d::new(&p.pp("plain0"), 1, 8, 3, s)?,
                b: Conv3d::new(&p.pp("plain1"), 8, 8, 3, s)?,
            }
        };
        Ok(Self {
            layout,
            head: Conv3d::new(&p.pp("head"), 8, 1, 3, s)?,
        })
    }

    /// `[D, H, W]` volume to `[D, H, W]` logits.
    pub fn regularize(&self, volume: &Tensor<T>) -> Result<Tensor<T>> {
        let s = volume.shape().to_vec();
        if s.len() != 3 {
            return Err(Error::dim("regularize", &s, &[]));
        }
        let x = volume.unsqueeze(0)?;
        let feat = match &self.layout {
            RegLayout::UNet {
                enc0,
                enc1,
                enc2,
                dec1,
                dec0,
            } => {
                let e0 = block(enc0, &x)?;
                let e1 = block(enc1, &e0)?;
                let e2 = block(enc2, &e1)?;
                let up1 = e2.resize_trailing(&e1.shape()[1..])?;
                let d1 = block(dec1, &up1)?.add(&e1)?;
                let up0 = d1.resize_trailing(&e0.shape()[1..])?;
                block(dec0, &up0)?.add(&e0)?
            }
            RegLayout::Plain { a, b } => block(b, &block(a, &x)?)?,
        };
        self.head.forward(&feat)?.reshape(&s)
    }
}

/// Softmax over the depth axis of `[D, H, W]` logits.
pub fn probability_volume<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    if logits.rank() != 3 {
        return Err(Error::dim("probability_volume", logits.shape(), &[]));
    }
    logits.softmax(0)
}

/// Depth of the most probable hypothesis (lowest index on ties) and the
/// probability summed over a three-hypothesis window around it. At the
/// ends of the volume the window is shifted inward, so it always spans
/// three hypotheses when `D ≥ 3`.
pub fn winner_take_all<T: Scalar>(
    prob: &Tensor<T>,
    hyps: &DepthHypotheses,
    stage: usize,
) -> Result<DepthEstimate> {
    let s = prob.shape();
    if s.len() != 3 || s[0] != hyps.count() {
        return Err(Error::dim("winner_take_all", s, &[hyps.count()]));
    }
    let (nd, h, w) = (s[0], s[1], s[2]);
    let q = h * w;
    let p = prob.data();
    let mut depth = vec![0.0; q];
    let mut conf = vec![0.0; q];
    for i in 0..q {
        let mut best = 0;
        for d in 1..nd {
            if p[d * q + i] > p[best * q + i] {
                best = d;
            }
        }
        depth[i] = hyps.value(best, i);
        let lo = best.saturating_sub(1).min(nd.saturating_sub(3));
        let hi = (lo + 2).min(nd - 1);
        conf[i] = (lo..=hi)
            .map(|d| p[d * q + i].as_f64())
            .sum::<f64>()
            .min(1.0);
    }
    Ok(DepthEstimate {
        stage,
        depth: Map::new(h, w, depth)?,
        confidence: Map::new(h, w, conf)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::sample_hypotheses_initial;
    use crate::nn::ParamStore;

    #[test]
    fn window_rule_example() {
        let hyps = sample_hypotheses_initial(1.0, 3.0, 3).unwrap();
        let p = Tensor::<f64>::from_f64(&[0.1, 0.5, 0.4], &[3, 1, 1]).unwrap();
        let e = winner_take_all(&p, &hyps, 0).unwrap();
        assert_eq!(e.depth.data, vec![2.0]);
        assert!((e.confidence.data[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_ties_pick_first() {
        let hyps = sample_hypotheses_initial(1.0, 4.0, 4).unwrap();
        let p = probability_volume(&Tensor::<f64>::zeros(&[4, 1, 1])).unwrap();
        let e = winner_take_all(&p, &hyps, 0).unwrap();
        assert_eq!(e.depth.data, vec![1.0]);
        assert!((e.confidence.data[0] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn regularizer_preserves_shape() {
        let store = ParamStore::<f32>::new(0);
        for (i, d) in [16usize, 8, 4, 3].into_iter().enumerate() {
            let r = Regularizer::new(&store.root().pp(format!("r{i}")), d).unwrap();
            let v = Tensor::<f32>::full(&[d, 5, 6], 0.3);
            assert_eq!(r.regularize(&v).unwrap().shape(), &[d, 5, 6]);
        }
    }

    #[test]
    fn cascade_config_validation() {
        assert!(CascadeConfig::default().validate().is_ok());
        let bad = CascadeConfig {
            counts: [4, 8, 4],
            ..CascadeConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
