//! Point-cloud accuracy/completeness and normalized depth errors.

use std::collections::HashMap;

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::DepthMap;

/// Normalized depth range span: `[d_min, d_max]` maps onto this many units.
pub const DEPTH_NORMALIZATION_SPAN: f64 = 128.0;

/// Uniform-grid spatial index for exact nearest-neighbor queries.
pub struct GridIndex<'a> {
    points: &'a [Vector3<f64>],
    cell: f64,
    cells: HashMap<[i64; 3], Vec<usize>>,
    lo: [i64; 3],
    hi: [i64; 3],
}

impl<'a> GridIndex<'a> {
    /// Cell size is chosen for roughly two points per occupied cell.
    pub fn new(points: &'a [Vector3<f64>]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::UndefinedMetric(
                "nearest neighbor in an empty cloud".into(),
            ));
        }
        let mut min = points[0];
        let mut max = points[0];
        for p in points {
            min = min.inf(p);
            max = max.sup(p);
        }
        let ext = max - min;
        let largest = ext.max();
        let cell = if largest > 0.0 {
            // Thin axes count as a thousandth of the largest so flat clouds
            // still get cells near their point spacing.
            let floor = largest * 1e-3;
            let volume = ext.x.max(floor) * ext.y.max(floor) * ext.z.max(floor);
            (2.0 * volume / points.len() as f64).cbrt().max(floor)
        } else {
            1.0
        };
        let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        let key = |p: &Vector3<f64>| [0, 1, 2].map(|a| (p[a] / cell).floor() as i64);
        let mut lo = [i64::MAX; 3];
        let mut hi = [i64::MIN; 3];
        for (i, p) in points.iter().enumerate() {
            let k = key(p);
            for a in 0..3 {
                lo[a] = lo[a].min(k[a]);
                hi[a] = hi[a].max(k[a]);
            }
            cells.entry(k).or_default().push(i);
        }
        Ok(Self {
            points,
            cell,
            cells,
            lo,
            hi,
        })
    }

    /// Nearest indexed point to `q` and its distance (lowest index on ties).
    pub fn nearest(&self, q: &Vector3<f64>) -> (usize, f64) {
        let c = [0, 1, 2].map(|a| (q[a] / self.cell).floor() as i64);
        let mut best = (usize::MAX, f64::INFINITY);
        // Shells beyond the occupied box add nothing.
        let reach = (0..3)
            .map(|a| (c[a] - self.lo[a]).abs().max((self.hi[a] - c[a]).abs()))
            .max()
            .unwrap_or(0);
        // Shells nearer than the occupied box are empty.
        let start = (0..3)
            .map(|a| (self.lo[a] - c[a]).max(c[a] - self.hi[a]).max(0))
            .max()
            .unwrap_or(0);
        for r in start..=reach {
            for dx in -r..=r {
                for dy in -r..=r {
                    for dz in -r..=r {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                            continue;
                        }
                        let Some(ids) = self.cells.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) else {
                            continue;
                        };
                        for &i in ids {
                            let d = distance(q, &self.points[i]);
                            if d < best.1 || (d == best.1 && i < best.0) {
                                best = (i, d);
                            }
                        }
                    }
                }
            }
            // Every point in shell r + 1 lies at least r cells away.
            if best.1 < r as f64 * self.cell {
                break;
            }
        }
        best
    }
}

fn distance(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    ((a.x - b.x).powi(2) + (a.y - b.y).powi(2) + (a.z - b.z).powi(2)).sqrt()
}

/// Exhaustive nearest neighbor, the reference for [`GridIndex`].
pub fn nearest_brute_force(points: &[Vector3<f64>], q: &Vector3<f64>) -> (usize, f64) {
    let mut best = (usize::MAX, f64::INFINITY);
    for (i, p) in points.iter().enumerate() {
        let d = distance(q, p);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CloudMetrics {
    pub accuracy: f64,
    pub completeness: f64,
    pub overall: f64,
}

fn mean_clamped_distance(from: &[Vector3<f64>], to: &GridIndex<'_>, clamp: f64) -> f64 {
    // Summed in order so the result does not depend on the thread count.
    let d: Vec<f64> = from
        .par_iter()
        .map(|p| to.nearest(p).1.min(clamp))
        .collect();
    d.iter().sum::<f64>() / from.len() as f64
}

/// Accuracy (recon → reference), completeness (reference → recon) and
/// their mean, with distances clamped at `clamp`.
pub fn cloud_metrics(
    recon: &[Vector3<f64>],
    reference: &[Vector3<f64>],
    clamp: f64,
) -> Result<CloudMetrics> {
    if recon.is_empty() || reference.is_empty() {
        return Err(Error::UndefinedMetric(
            "accuracy/completeness of an empty cloud".into(),
        ));
    }
    if !(clamp > 0.0) {
        return Err(Error::Config(format!(
            "clamp must be positive, got {clamp}"
        )));
    }
    let accuracy = mean_clamped_distance(recon, &GridIndex::new(reference)?, clamp);
    let completeness = mean_clamped_distance(reference, &GridIndex::new(recon)?, clamp);
    Ok(CloudMetrics {
        accuracy,
        completeness,
        overall: 0.5 * (accuracy + completeness),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthMetrics {
    /// Mean absolute error in normalized units.
    pub epe: f64,
    /// Percent of pixels with normalized error above 1.
    pub e1: f64,
    /// Percent above 3.
    pub e3: f64,
}

/// Errors after scaling depths by `128 / (d_max − d_min)`, over `mask`.
pub fn depth_metrics(
    pred: &DepthMap,
    gt: &DepthMap,
    mask: &[bool],
    d_min: f64,
    d_max: f64,
) -> Result<DepthMetrics> {
    let q = gt.data.len();
    if pred.height != gt.height || pred.width != gt.width || mask.len() != q {
        return Err(Error::dim(
            "depth_metrics",
            &[pred.height, pred.width],
            &[gt.height, gt.width, mask.len()],
        ));
    }
    if !(d_max > d_min) {
        return Err(Error::Config(format!(
            "need d_max > d_min, got {d_min}, {d_max}"
        )));
    }
    let scale = DEPTH_NORMALIZATION_SPAN / (d_max - d_min);
    let errs: Vec<f64> = (0..q)
        .filter(|&i| mask[i])
        .map(|i| (pred.data[i] - gt.data[i]).abs() * scale)
        .collect();
    if errs.is_empty() {
        return Err(Error::UndefinedMetric(
            "no valid pixels for depth metrics".into(),
        ));
    }
    let n = errs.len() as f64;
    let pct = |t: f64| 100.0 * errs.iter().filter(|&&e| e > t).count() as f64 / n;
    Ok(DepthMetrics {
        epe: errs.iter().sum::<f64>() / n,
        e1: pct(1.0),
        e3: pct(3.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_reference_example() {
        let recon = [Vector3::new(0.0, 0.0, 0.0)];
        let reference = [Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.0, 2.0, 0.0)];
        let m = cloud_metrics(&recon, &reference, 10.0).unwrap();
        assert_eq!((m.accuracy, m.completeness, m.overall), (1.0, 1.5, 1.25));
    }

    #[test]
    fn identical_clouds_score_zero() {
        let c: Vec<_> = (0..50)
            .map(|i| Vector3::new(i as f64, (i * i) as f64 * 0.1, 0.0))
            .collect();
        let m = cloud_metrics(&c, &c, 1.0).unwrap();
        assert_eq!((m.accuracy, m.completeness, m.overall), (0.0, 0.0, 0.0));
    }

    #[test]
    fn empty_cloud_is_undefined() {
        assert!(matches!(
            cloud_metrics(&[], &[Vector3::zeros()], 1.0),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn constant_offset_depth() {
        let gt = DepthMap::filled(2, 3, 2.0);
        let off = 2.0 * (5.0 - 1.0) / 128.0;
        let pred = DepthMap::filled(2, 3, 2.0 + off);
        let m = depth_metrics(&pred, &gt, &[true; 6], 1.0, 5.0).unwrap();
        assert!((m.epe - 2.0).abs() < 1e-12);
        assert_eq!((m.e1, m.e3), (100.0, 0.0));
        let z = depth_metrics(&gt, &gt, &[true; 6], 1.0, 5.0).unwrap();
        assert_eq!((z.epe, z.e1, z.e3), (0.0, 0.0, 0.0));
        assert!(depth_metrics(&gt, &gt, &[false; 6], 1.0, 5.0).is_err());
    }
}
