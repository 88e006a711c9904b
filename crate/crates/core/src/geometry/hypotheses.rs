//! Plane-sweep depth discretization and coarse-to-fine refinement.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum HypothesisLayout {
    /// `count` uniform samples covering `[d_min, d_max]`, shared by all pixels.
    Global {
        d_min: f64,
        d_max: f64,
        count: usize,
    },
    /// Per-pixel candidates, `[count, height, width]` row-major.
    PerPixel {
        height: usize,
        width: usize,
        count: usize,
        values: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthHypotheses {
    pub stage: usize,
    /// Spacing between adjacent candidates (scene units).
    pub interval: f64,
    pub layout: HypothesisLayout,
}

/// `count` uniform samples in `[d_min, d_max]`, endpoints included.
pub fn sample_hypotheses_initial(d_min: f64, d_max: f64, count: usize) -> Result<DepthHypotheses> {
    if !(d_min > 0.0 && d_max > d_min) {
        return Err(Error::Config(format!(
            "depth range must satisfy 0 < d_min < d_max (got {d_min}, {d_max})"
        )));
    }
    if count < 2 {
        return Err(Error::Config(format!(
            "need at least 2 hypotheses, got {count}"
        )));
    }
    Ok(DepthHypotheses {
        stage: 0,
        interval: (d_max - d_min) / (count - 1) as f64,
        layout: HypothesisLayout::Global {
            d_min,
            d_max,
            count,
        },
    })
}

/// Per-pixel window of `count` samples centered at `prev_depth` with
/// spacing `prev_interval · decay`.
///
/// Windows that cross `[d_min, d_max]` are shifted as a whole (not clamped
/// per sample) so every column stays strictly increasing. A window wider
/// than the range starts at `d_min`.
#[allow(clippy::too_many_arguments)]
pub fn refine_hypotheses(
    prev_depth: &[f64],
    height: usize,
    width: usize,
    prev_interval: f64,
    count: usize,
    decay: f64,
    d_min: f64,
    d_max: f64,
    stage: usize,
) -> Result<DepthHypotheses> {
    if prev_depth.len() != height * width {
        return Err(Error::dim(
            "refine_hypotheses",
            &[prev_depth.len()],
            &[height, width],
        ));
    }
    if !(decay > 0.0 && decay <= 1.0) || count == 0 {
        return Err(Error::Config(format!(
            "decay must lie in (0, 1] and count be positive (decay={decay}, count={count})"
        )));
    }
    let interval = prev_interval * decay;
    let half = (count as f64 - 1.0) / 2.0;
    let span = interval * (count as f64 - 1.0);
    let n = height * width;
    let mut values = vec![0.0; count * n];
    for (i, &c) in prev_depth.iter().enumerate() {
        if !(c > 0.0) {
            return Err(Error::contract(format!(
                "previous depth must be positive, got {c} at pixel {i}"
            )));
        }
        let mut lo = c - half * interval;
        if lo + span > d_max {
            lo = d_max - span;
        }
        if lo < d_min {
            lo = d_min;
        }
        for k in 0..count {
            values[k * n + i] = lo + k as f64 * interval;
        }
    }
    Ok(DepthHypotheses {
        stage,
        interval,
        layout: HypothesisLayout::PerPixel {
            height,
            width,
            count,
            values,
        },
    })
}

impl DepthHypotheses {
    pub fn count(&self) -> usize {
        match &self.layout {
            HypothesisLayout::Global { count, .. } | HypothesisLayout::PerPixel { count, .. } => {
                *count
            }
        }
    }

    /// Candidate `k` at pixel index `i` (row-major).
    pub fn value(&self, k: usize, i: usize) -> f64 {
        match &self.layout {
            HypothesisLayout::Global { d_min, .. } => d_min + k as f64 * self.interval,
            HypothesisLayout::PerPixel {
                height,
                width,
                values,
                ..
            } => values[k * height * width + i],
        }
    }

    /// Dense `[D, H, W]` candidate volume.
    pub fn to_volume(&self, height: usize, width: usize) -> Result<Vec<f64>> {
        let d = self.count();
        match &self.layout {
            HypothesisLayout::Global { .. } => {
                let mut v = Vec::with_capacity(d * height * width);
                for k in 0..d {
                    v.extend(std::iter::repeat_n(self.value(k, 0), height * width));
                }
                Ok(v)
            }
            HypothesisLayout::PerPixel {
                height: h,
                width: w,
                values,
                ..
            } => {
                if (*h, *w) != (height, width) {
                    return Err(Error::dim("hypotheses", &[*h, *w], &[height, width]));
                }
                Ok(values.clone())
            }
        }
    }

    pub fn to_tensor<T: Scalar>(&self, height: usize, width: usize) -> Result<Tensor<T>> {
        Tensor::from_f64(
            &self.to_volume(height, width)?,
            &[self.count(), height, width],
        )
    }

    /// Strictly increasing and positive along the depth axis at every pixel.
    pub fn is_monotone(&self, height: usize, width: usize) -> bool {
        let Ok(v) = self.to_volume(height, width) else {
            return false;
        };
        let n = height * width;
        (0..n).all(|i| {
            (0..self.count()).all(|k| v[k * n + i] > 0.0)
                && (1..self.count()).all(|k| v[k * n + i] > v[(k - 1) * n + i])
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn initial_includes_endpoints() {
        let h = sample_hypotheses_initial(1.0, 3.0, 3).unwrap();
        assert_eq!(h.interval, 1.0);
        assert_eq!(
            (0..3).map(|k| h.value(k, 0)).collect::<Vec<_>>(),
            vec![1.0, 2.0, 3.0]
        );
        assert!(sample_hypotheses_initial(3.0, 1.0, 3).is_err());
        assert!(sample_hypotheses_initial(1.0, 3.0, 1).is_err());
    }

    #[test]
    fn refine_centers_on_previous() {
        let h = refine_hypotheses(&[2.0], 1, 1, 1.0, 4, 0.25, 0.1, 10.0, 1).unwrap();
        let v: Vec<f64> = (0..4).map(|k| h.value(k, 0)).collect();
        assert_eq!(v, vec![1.625, 1.875, 2.125, 2.375]);
        assert_eq!(h.interval, 0.25);
    }

    #[test]
    fn refine_shifts_window_into_range() {
        let h = refine_hypotheses(&[1.0, 5.0], 1, 2, 1.0, 4, 0.5, 1.0, 5.0, 1).unwrap();
        assert!(h.is_monotone(1, 2));
        for k in 0..4 {
            assert!(h.value(k, 0) >= 1.0);
            assert!(h.value(k, 1) <= 5.0);
        }
        assert_eq!(h.value(0, 0), 1.0);
        assert_eq!(h.value(3, 1), 5.0);
        assert!(refine_hypotheses(&[0.0], 1, 1, 1.0, 4, 0.5, 1.0, 5.0, 1).is_err());
    }
}
