//! Pinhole cameras, depth-dependent warping, plane-sweep hypotheses and the
//! synthetic scene renderer.

pub mod camera;
pub mod hypotheses;
pub mod io;
pub mod synth;
pub mod warp;

pub use camera::{scale_camera, Camera, Extrinsics, Intrinsics};
pub use hypotheses::{
    refine_hypotheses, sample_hypotheses_initial, DepthHypotheses, HypothesisLayout,
};
pub use synth::{render_synthetic_scene, Plane, SceneSpec, Sphere, SyntheticScene};
pub use warp::{build_warp_grid, warp_pixel, WarpedPixel};

use crate::image::{DepthMap, Image};

/// One calibrated image, optionally with ground-truth depth.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraView {
    pub camera: Camera,
    pub image: Image,
    pub depth: Option<DepthMap>,
    /// Pixels where `depth` is meaningful.
    pub valid: Option<Vec<bool>>,
}
