//! Depth-parameterized pixel transfer between two calibrated views.
//!
//! A reference pixel `p` at depth `d` maps to
//! `p̂ = K_src · (R_rel · K_ref⁻¹ · [p, 1]ᵀ · d + t_rel)`,
//! so each image coordinate is a ratio `(a·d + b) / (c·d + e)` of affine
//! functions of `d`, which gives a closed-form derivative for the grid.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Mask, Tensor};

use super::camera::Camera;

/// Points closer than this to the source image plane are invalid.
pub const MIN_SOURCE_DEPTH: f64 = 1e-6;

/// Grid value written for invalid warps; it lies outside every image so
/// bilinear sampling yields zero.
const INVALID_COORD: f64 = -1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarpedPixel {
    pub x: f64,
    pub y: f64,
    /// Depth of the transferred point in the source camera frame.
    pub depth: f64,
    /// `false` when the point lies behind (or on) the source camera.
    pub valid: bool,
}

/// Transfers pixel `(x, y)` of `reference` at depth `d` into `source`.
pub fn warp_pixel(
    x: f64,
    y: f64,
    d: f64,
    reference: &Camera,
    source: &Camera,
) -> Result<WarpedPixel> {
    if !(d > 0.0) {
        return Err(Error::contract(format!(
            "warp depth must be positive, got {d}"
        )));
    }
    let (ray, offset) = transfer_terms(reference, source);
    let r = ray * Vector3::new(x, y, 1.0);
    let q = r * d + offset;
    if q.z <= MIN_SOURCE_DEPTH {
        return Ok(WarpedPixel {
            x: f64::NAN,
            y: f64::NAN,
            depth: q.z,
            valid: false,
        });
    }
    // K_src has last row [0 0 1], so q.z is the source-frame depth
    Ok(WarpedPixel {
        x: q.x / q.z,
        y: q.y / q.z,
        depth: q.z,
        valid: true,
    })
}

/// `(K_src R_rel K_ref⁻¹, K_src t_rel)`
fn transfer_terms(reference: &Camera, source: &Camera) -> (nalgebra::Matrix3<f64>, Vector3<f64>) {
    let (r, t) = reference.relative_to(source);
    let k = source.intrinsics.matrix();
    (k * r * reference.intrinsics.inverse_matrix(), k * t)
}

/// Sampling grid for every depth hypothesis of every reference pixel.
///
/// `depths` is `[D, H, W]` (per-pixel hypotheses in the reference frame);
/// the result is `[D, H, W, 2]` holding `(x, y)` source coordinates for
/// [`Tensor::grid_sample_2d`], together with a mask that is `false` where
/// the point falls behind the source camera. The grid is differentiable
/// with respect to the depths.
pub fn build_warp_grid<T: Scalar>(
    depths: &Tensor<T>,
    reference: &Camera,
    source: &Camera,
) -> Result<(Tensor<T>, Mask)> {
    let s = depths.shape();
    if s.len() != 3 {
        return Err(Error::dim("build_warp_grid", s, &[]));
    }
    let (nd, h, w) = (s[0], s[1], s[2]);
    let (ray, offset) = transfer_terms(reference, source);
    let rays: Vec<Vector3<f64>> = (0..h * w)
        .map(|i| ray * Vector3::new((i % w) as f64, (i / w) as f64, 1.0))
        .collect();
    let dv = depths.data();
    let mut grid = vec![T::zero(); nd * h * w * 2];
    let mut valid = vec![false; nd * h * w];
    // d(x)/dd and d(y)/dd per element, reused in backward
    let mut jac = vec![(0.0f64, 0.0f64); nd * h * w];
    for k in 0..nd {
        for (i, r) in rays.iter().enumerate() {
            let e = k * h * w + i;
            let d = dv[e].as_f64();
            let q = r * d + offset;
            if d > 0.0 && q.z > MIN_SOURCE_DEPTH {
                grid[2 * e] = T::lit(q.x / q.z);
                grid[2 * e + 1] = T::lit(q.y / q.z);
                valid[e] = true;
                let z2 = q.z * q.z;
                jac[e] = (
                    (r.x * offset.z - offset.x * r.z) / z2,
                    (r.y * offset.z - offset.y * r.z) / z2,
                );
            } else {
                grid[2 * e] = T::lit(INVALID_COORD);
                grid[2 * e + 1] = T::lit(INVALID_COORD);
            }
        }
    }
    let mask = Mask::new(valid, &[nd, h, w])?;
    let t = Tensor::from_op(
        grid,
        vec![nd, h, w, 2],
        "warp_grid",
        vec![depths.clone()],
        Box::new(move |g, _, _| {
            let gd = jac
                .iter()
                .enumerate()
                .map(|(e, &(jx, jy))| g[2 * e] * T::lit(jx) + g[2 * e + 1] * T::lit(jy))
                .collect();
            vec![Some(gd)]
        }),
    );
    Ok((t, mask))
}
