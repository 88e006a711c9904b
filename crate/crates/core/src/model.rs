//! The full cascade network: pyramid, ARF, transformer at the coarsest
//! level, feature pathway, and three plane-sweep stages.

use crate::cost_volume::build_correlation_volume;
use crate::depth::{
    probability_volume, winner_take_all, CascadeConfig, DepthEstimate, Regularizer,
};
use crate::error::{Error, Result};
use crate::features::{pathway_merge, DeformableConv, FeatureNet, PYRAMID_CHANNELS};
use crate::fmt::{FeatureMatchingTransformer, FmtConfig};
use crate::geometry::{
    refine_hypotheses, sample_hypotheses_initial, Camera, CameraView, DepthHypotheses,
};
use crate::nn::{Conv2d, ParamPath, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{ConvOptions, Tensor};

/// Resolution factor of each stage relative to the input.
pub const STAGE_SCALES: [f64; 3] = [0.25, 0.5, 1.0];

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub cascade: CascadeConfig,
    pub fmt: FmtConfig,
    /// Upsample-and-add route from transformed coarse features to finer stages.
    pub pathway: bool,
    /// Divide correlations by the channel count.
    pub scale_correlation: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            cascade: CascadeConfig::default(),
            fmt: FmtConfig::default(),
            pathway: true,
            scale_correlation: false,
        }
    }
}

/// Everything a stage produces; the probability volume stays on the tape
/// for supervision.
#[derive(Debug, Clone)]
pub struct StageOutput<T: Scalar> {
    pub hypotheses: DepthHypotheses,
    pub probability: Tensor<T>,
    pub estimate: DepthEstimate,
}

pub struct TransMvsNet<T: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub features: FeatureNet<T>,
    pub arf: [DeformableConv<T>; 3],
    pub fmt: FeatureMatchingTransformer<T>,
    /// 1×1 projections for the pathway into stages 2 and 3.
    pub pathway_proj: [Conv2d<T>; 2],
    pub regularizers: [Regularizer<T>; 3],
}

impl<T: Scalar> TransMvsNet<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.cascade.validate()?;
        let store = ParamStore::new(seed);
        let root = store.root();
        let [c1, c2, c3] = PYRAMID_CHANNELS;
        let arf =
            |i: usize, c: usize| DeformableConv::new(&root.pp("arf").pp(format!("level{i}")), c, c);
        let reg = |i: usize| {
            Regularizer::new(
                &root.pp("reg").pp(format!("stage{i}")),
                config.cascade.counts[i],
            )
        };
        let one = ConvOptions::same(1);
        Ok(Self {
            features: FeatureNet::new(&root.pp("fpn"), 3)?,
            arf: [arf(0, c1)?, arf(1, c2)?, arf(2, c3)?],
            fmt: FeatureMatchingTransformer::new(&root.pp("fmt"), c1, &config.fmt)?,
            pathway_proj: [
                Conv2d::new(&root.pp("pathway").pp("to_stage2"), c1, c2, 1, one)?,
                Conv2d::new(&root.pp("pathway").pp("to_stage3"), c2, c3, 1, one)?,
            ],
            regularizers: [reg(0)?, reg(1)?, reg(2)?],
            config,
            store,
        })
    }

    pub fn path(&self) -> ParamPath<T> {
        self.store.root()
    }

    /// Per-stage features for every view (reference first), after ARF,
    /// the transformer and, when enabled, the pathway.
    pub fn stage_features(&self, views: &[CameraView]) -> Result<[Vec<Tensor<T>>; 3]> {
        let mut levels: [Vec<Tensor<T>>; 3] = Default::default();
        for v in views {
            let pyr = self.features.extract_pyramid(&v.image.to_tensor())?;
            for (l, f) in pyr.levels.iter().enumerate() {
                levels[l].push(self.arf[l].forward(f)?);
            }
        }
        let [raw1, raw2, raw3] = levels;
        let t1 = self.fmt.forward(&raw1)?;
        let (f2, f3) = if self.config.pathway {
            let f2 = t1
                .iter()
                .zip(&raw2)
                .map(|(c, r)| pathway_merge(c, r, &self.pathway_proj[0]))
                .collect::<Result<Vec<_>>>()?;
            let f3 = f2
                .iter()
                .zip(&raw3)
                .map(|(c, r)| pathway_merge(c, r, &self.pathway_proj[1]))
                .collect::<Result<Vec<_>>>()?;
            (f2, f3)
        } else {
            (raw2, raw3)
        };
        Ok([t1, f2, f3])
    }

    /// Runs all three stages on `views` (reference first, at least one source).
    pub fn forward(&self, views: &[CameraView]) -> Result<Vec<StageOutput<T>>> {
        if views.len() < 2 {
            return Err(Error::contract(format!(
                "need a reference and at least one source view, got {}",
                views.len()
            )));
        }
        let feats = self.stage_features(views)?;
        cascade_run(self, views, &feats)
    }
}

/// Plane sweep, regularization and winner-take-all at each stage; stages
/// after the first refine around the upsampled previous depth.
pub fn cascade_run<T: Scalar>(
    model: &TransMvsNet<T>,
    views: &[CameraView],
    feats: &[Vec<Tensor<T>>; 3],
) -> Result<Vec<StageOutput<T>>> {
    let cfg = &model.config.cascade;
    let mut out: Vec<StageOutput<T>> = Vec::with_capacity(3);
    for stage in 0..3 {
        let f = &feats[stage];
        if f.len() != views.len() {
            return Err(Error::contract("feature and view counts differ"));
        }
        let (h, w) = (f[0].shape()[1], f[0].shape()[2]);
        let cams: Vec<Camera> = views
            .iter()
            .map(|v| v.camera.scaled(STAGE_SCALES[stage]))
            .collect();
        let hyps = match out.last() {
            None => sample_hypotheses_initial(cfg.d_min, cfg.d_max, cfg.counts[0])?,
            Some(prev) => {
                let up = upsample_depth(
                    &prev.estimate.depth.data,
                    prev.estimate.depth.height,
                    prev.estimate.depth.width,
                    h,
                    w,
                )?;
                refine_hypotheses(
                    &up,
                    h,
                    w,
                    prev.hypotheses.interval,
                    cfg.counts[stage],
                    cfg.decays[stage - 1],
                    cfg.d_min,
                    cfg.d_max,
                    stage,
                )?
            }
        };
        let volume = build_correlation_volume(
            &f[0],
            &f[1..],
            &cams[0],
            &cams[1..],
            &hyps,
            model.config.scale_correlation,
        )?;
        let logits = model.regularizers[stage].regularize(&volume)?;
        let probability = probability_volume(&logits)?;
        let estimate = winner_take_all(&probability, &hyps, stage)?;
        out.push(StageOutput {
            hypotheses: hyps,
            probability,
            estimate,
        });
    }
    Ok(out)
}

/// Bilinear upsampling of a depth map (sample-aligned, as the pyramid).
pub fn upsample_depth(depth: &[f64], h: usize, w: usize, ho: usize, wo: usize) -> Result<Vec<f64>> {
    Ok(Tensor::<f64>::from_f64(depth, &[h, w])?
        .resize_trailing(&[ho, wo])?
        .to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{render_synthetic_scene, SceneSpec};

    #[test]
    fn stage_shapes_and_membership() {
        let scene = render_synthetic_scene(&SceneSpec::default(), 1).unwrap();
        let model = TransMvsNet::<f32>::new(ModelConfig::default(), 0).unwrap();
        let out = model.forward(&scene.views).unwrap();
        let expect = [(16, 20, 16), (32, 40, 8), (64, 80, 4)];
        for (s, (h, w, d)) in out.iter().zip(expect) {
            assert_eq!(s.probability.shape(), &[d, h, w]);
            assert_eq!((s.estimate.depth.height, s.estimate.depth.width), (h, w));
            for i in 0..h * w {
                let z = s.estimate.depth.data[i];
                assert!((0..d).any(|k| s.hypotheses.value(k, i) == z));
            }
        }
        assert!((out[1].hypotheses.interval - out[0].hypotheses.interval * 0.25).abs() < 1e-12);
        assert!((out[2].hypotheses.interval - out[0].hypotheses.interval * 0.125).abs() < 1e-12);
    }
}
