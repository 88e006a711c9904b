//! Geometric consistency checks, dynamic filtering and point-cloud fusion.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Camera, CameraView};
use crate::image::{DepthMap, Map};

/// How the source depth is read at the reprojected location `p'`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DepthLookup {
    /// Interpolated depth, back-projected at `p'` itself.
    Bilinear,
    /// The nearest source pixel, back-projected at its own center.
    Nearest,
    /// Of the four pixels around `p'`, the one whose depth best agrees
    /// with the depth the reference implies there; back-projected at its
    /// own center. Avoids blending across occlusion edges.
    #[default]
    Consistent,
}

/// Source sample for `lookup`: the pixel position it back-projects from and
/// its depth. `z` is the source-frame depth implied by the reference.
fn lookup_depth(
    src: &DepthMap,
    u: f64,
    v: f64,
    z: f64,
    lookup: DepthLookup,
) -> Option<(f64, f64, f64)> {
    let ok = |d: f64| d > 0.0 && d.is_finite();
    match lookup {
        DepthLookup::Bilinear => src
            .sample_bilinear(u, v)
            .filter(|d| ok(*d))
            .map(|d| (u, v, d)),
        DepthLookup::Nearest => {
            let d = src.sample_nearest(u, v).filter(|d| ok(*d))?;
            Some((u.round(), v.round(), d))
        }
        DepthLookup::Consistent => {
            if !(u >= 0.0
                && v >= 0.0
                && u <= (src.width - 1) as f64
                && v <= (src.height - 1) as f64)
            {
                return None;
            }
            let (x0, y0) = (u.floor() as usize, v.floor() as usize);
            let mut best: Option<(f64, f64, f64)> = None;
            for (x, y) in [(x0, y0), (x0 + 1, y0), (x0, y0 + 1), (x0 + 1, y0 + 1)] {
                if x >= src.width || y >= src.height {
                    continue;
                }
                let d = src.get(y, x);
                if ok(d) && best.is_none_or(|b| (d - z).abs() < (b.2 - z).abs()) {
                    best = Some((x as f64, y as f64, d));
                }
            }
            best
        }
    }
}

/// Forward-backward reprojection of every reference pixel through one source.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyRecord {
    pub height: usize,
    pub width: usize,
    /// ‖p − p''‖ in reference pixels.
    pub e_pix: Vec<f64>,
    /// |d'' − d| / d.
    pub e_rel: Vec<f64>,
    /// False where p' falls outside the source or reads no depth.
    pub covisible: Vec<bool>,
    /// The source-side 3D point behind each check, for fusion.
    pub points: Vec<Vector3<f64>>,
}

impl ConsistencyRecord {
    pub fn passes(&self, i: usize, pix: f64, rel: f64) -> bool {
        self.covisible[i] && self.e_pix[i] < pix && self.e_rel[i] < rel
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionThresholds {
    /// Minimum confidence τ_c.
    pub confidence: f64,
    /// Base reprojection threshold η_pix (pixels).
    pub eta_pix: f64,
    /// Base relative-depth threshold η_rel.
    pub eta_rel: f64,
    pub lookup: DepthLookup,
}

impl Default for FusionThresholds {
    fn default() -> Self {
        Self {
            confidence: 0.3,
            eta_pix: 1.0,
            eta_rel: 0.01,
            lookup: DepthLookup::Consistent,
        }
    }
}

impl FusionThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta_pix > 0.0 && self.eta_rel > 0.0 && self.confidence.is_finite()) {
            return Err(Error::Config(format!("invalid fusion thresholds {self:?}")));
        }
        Ok(())
    }
}

/// Projects each reference pixel at its depth into the source, reads the
/// source depth there, and reprojects the resulting point back.
pub fn geometric_check(
    ref_depth: &DepthMap,
    src_depth: &DepthMap,
    ref_cam: &Camera,
    src_cam: &Camera,
    lookup: DepthLookup,
) -> ConsistencyRecord {
    let (h, w) = (ref_depth.height, ref_depth.width);
    // (pixel reprojection error, relative depth error, co-visible, world point)
    type Cell = (f64, f64, bool, Vector3<f64>);
    let rows: Vec<Vec<Cell>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    let miss = (f64::INFINITY, f64::INFINITY, false, Vector3::zeros());
                    let d = ref_depth.get(y, x);
                    if !(d > 0.0 && d.is_finite()) {
                        return miss;
                    }
                    let world = ref_cam.back_project(x as f64, y as f64, d);
                    let (u, v, z) = src_cam.project(&world);
                    if !(z > 0.0) {
                        return miss;
                    }
                    // Border pixels reproject a few ulps outside the raster.
                    let snap = |t: f64, hi: usize| {
                        if t > -1e-9 && t < hi as f64 - 1.0 + 1e-9 {
                            t.clamp(0.0, hi as f64 - 1.0)
                        } else {
                            t
                        }
                    };
                    let (u, v) = (snap(u, src_depth.width), snap(v, src_depth.height));
                    let Some((su, sv, ds)) = lookup_depth(src_depth, u, v, z, lookup) else {
                        return miss;
                    };
                    let back = src_cam.back_project(su, sv, ds);
                    let (x2, y2, d2) = ref_cam.project(&back);
                    let e_pix = ((x2 - x as f64).powi(2) + (y2 - y as f64).powi(2)).sqrt();
                    (e_pix, (d2 - d).abs() / d, true, back)
                })
                .collect()
        })
        .collect();
    let mut rec = ConsistencyRecord {
        height: h,
        width: w,
        e_pix: Vec::with_capacity(h * w),
        e_rel: Vec::with_capacity(h * w),
        covisible: Vec::with_capacity(h * w),
        points: Vec::with_capacity(h * w),
    };
    for (p, r, c, x) in rows.into_iter().flatten() {
        rec.e_pix.push(p);
        rec.e_rel.push(r);
        rec.covisible.push(c);
        rec.points.push(x);
    }
    rec
}

/// Smallest support level `n ∈ {2, …, sources}` at which at least `n`
/// sources agree within `n·η`, if any.
pub fn support_level(
    records: &[ConsistencyRecord],
    i: usize,
    th: &FusionThresholds,
) -> Option<usize> {
    (2..=records.len()).find(|&n| {
        let k = n as f64;
        records
            .iter()
            .filter(|r| r.passes(i, k * th.eta_pix, k * th.eta_rel))
            .count()
            >= n
    })
}

/// Valid iff confidence ≥ τ_c and some support level is reached.
pub fn dynamic_filter(
    records: &[ConsistencyRecord],
    confidence: &Map,
    th: &FusionThresholds,
) -> Result<Vec<bool>> {
    let q = confidence.height * confidence.width;
    if records.iter().any(|r| r.e_pix.len() != q) {
        return Err(Error::dim(
            "dynamic_filter",
            &[confidence.height, confidence.width],
            &records.iter().map(|r| r.e_pix.len()).collect::<Vec<_>>(),
        ));
    }
    Ok((0..q)
        .into_par_iter()
        .map(|i| confidence.data[i] >= th.confidence && support_level(records, i, th).is_some())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub position: Vector3<f64>,
    pub color: [u8; 3],
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.points.iter().map(|p| p.position).collect()
    }
}

/// Per-view depth estimate and confidence to be fused.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionInput {
    pub depth: DepthMap,
    pub confidence: Map,
}

/// Result of filtering one view against all others.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewFilter {
    pub mask: Vec<bool>,
    pub records: Vec<ConsistencyRecord>,
}

/// Checks view `r` against every other view and applies the dynamic filter.
pub fn filter_view(
    r: usize,
    inputs: &[FusionInput],
    views: &[CameraView],
    th: &FusionThresholds,
) -> Result<ViewFilter> {
    if inputs.len() != views.len() || r >= views.len() {
        return Err(Error::contract(format!(
            "{} depth maps for {} views (reference {r})",
            inputs.len(),
            views.len()
        )));
    }
    let records: Vec<ConsistencyRecord> = (0..views.len())
        .filter(|&s| s != r)
        .map(|s| {
            geometric_check(
                &inputs[r].depth,
                &inputs[s].depth,
                &views[r].camera,
                &views[s].camera,
                th.lookup,
            )
        })
        .collect();
    let mask = dynamic_filter(&records, &inputs[r].confidence, th)?;
    Ok(ViewFilter { mask, records })
}

/// Every view in turn is the reference: each valid pixel's back-projection
/// is averaged with the points of the sources that support it at its
/// support level, and colored from the reference image.
pub fn fuse_point_cloud(
    inputs: &[FusionInput],
    views: &[CameraView],
    th: &FusionThresholds,
) -> Result<(PointCloud, Vec<Vec<bool>>)> {
    th.validate()?;
    let mut cloud = PointCloud::default();
    let mut masks = Vec::with_capacity(views.len());
    for r in 0..views.len() {
        let f = filter_view(r, inputs, views, th)?;
        let (depth, image) = (&inputs[r].depth, &views[r].image);
        if image.height != depth.height || image.width != depth.width {
            return Err(Error::dim(
                "fuse_point_cloud",
                &[image.height, image.width],
                &[depth.height, depth.width],
            ));
        }
        for i in 0..depth.data.len() {
            if !f.mask[i] {
                continue;
            }
            let n = support_level(&f.records, i, th).expect("valid pixels have support") as f64;
            let (y, x) = (i / depth.width, i % depth.width);
            let mut sum = views[r]
                .camera
                .back_project(x as f64, y as f64, depth.data[i]);
            let mut count = 1.0;
            for rec in &f.records {
                if rec.passes(i, n * th.eta_pix, n * th.eta_rel) {
                    sum += rec.points[i];
                    count += 1.0;
                }
            }
            let color = std::array::from_fn(|c| {
                let v = if image.channels == 1 {
                    image.get(0, y, x)
                } else {
                    image.get(c, y, x)
                };
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            });
            cloud.points.push(Point {
                position: sum / count,
                color,
            });
        }
        masks.push(f.mask);
    }
    Ok((cloud, masks))
}
