//! Plane-sweep correlation volumes: source features warped over depth
//! hypotheses, per-pair inner products and saliency-weighted aggregation.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{build_warp_grid, Camera, DepthHypotheses};
use crate::image::Image;
use crate::scalar::Scalar;
use crate::tensor::{Mask, Tensor};

/// Correlation of the reference with one source view, `[D, H, W]`.
#[derive(Debug, Clone)]
pub struct PairCorrelation<T: Scalar> {
    pub volume: Tensor<T>,
    /// `false` where the warp left the source image or fell behind it.
    pub mask: Mask,
}

/// Samples `feat: [F, H, W]` of a source view at every hypothesis of every
/// reference pixel. Returns `[D, F, H, W]` and a `[D, H, W]` validity mask.
pub fn warp_source_features<T: Scalar>(
    feat: &Tensor<T>,
    hyps: &DepthHypotheses,
    reference: &Camera,
    source: &Camera,
) -> Result<(Tensor<T>, Mask)> {
    let s = feat.shape();
    if s.len() != 3 {
        return Err(Error::dim("warp_source_features", s, &[]));
    }
    let depths = hyps.to_tensor::<T>(s[1], s[2])?;
    warp_with_depths(feat, &depths, reference, source)
}

/// As [`warp_source_features`] with an explicit `[D, H, W]` depth tensor,
/// through which gradients flow.
pub fn warp_with_depths<T: Scalar>(
    feat: &Tensor<T>,
    depths: &Tensor<T>,
    reference: &Camera,
    source: &Camera,
) -> Result<(Tensor<T>, Mask)> {
    let (grid, front) = build_warp_grid(depths, reference, source)?;
    let (warped, inside) = feat.grid_sample_2d(&grid)?;
    Ok((warped, front.and(&inside)?))
}

/// `c(d, p) = ⟨F₀(p), F̂(d, p)⟩` over channels, zero where `mask` is false.
///
/// With `scale_by_channels` the inner product is divided by `F`.
pub fn pairwise_correlation<T: Scalar>(
    reference: &Tensor<T>,
    warped: &Tensor<T>,
    mask: &Mask,
    scale_by_channels: bool,
) -> Result<PairCorrelation<T>> {
    let (rs, ws) = (reference.shape(), warped.shape());
    if rs.len() != 3 || ws.len() != 4 || ws[1..] != rs[..] {
        return Err(Error::dim("pairwise_correlation", rs, ws));
    }
    let (nd, f, h, w) = (ws[0], ws[1], ws[2], ws[3]);
    if mask.shape() != [nd, h, w] {
        return Err(Error::dim(
            "pairwise_correlation",
            mask.shape(),
            &[nd, h, w],
        ));
    }
    let q = h * w;
    let scale = if scale_by_channels {
        T::lit(1.0 / f as f64)
    } else {
        T::one()
    };
    let (r, x, m) = (reference.data(), warped.data(), mask.data());
    let mut out = vec![T::zero(); nd * q];
    out.par_chunks_mut(q).enumerate().for_each(|(d, od)| {
        let xd = &x[d * f * q..(d + 1) * f * q];
        for ch in 0..f {
            let (rc, xc) = (&r[ch * q..(ch + 1) * q], &xd[ch * q..(ch + 1) * q]);
            for i in 0..q {
                od[i] += rc[i] * xc[i];
            }
        }
        for (i, o) in od.iter_mut().enumerate() {
            *o = if m[d * q + i] { *o * scale } else { T::zero() };
        }
    });
    let keep: Vec<bool> = m.to_vec();
    let volume = Tensor::from_op(
        out,
        vec![nd, h, w],
        "pairwise_correlation",
        vec![reference.clone(), warped.clone()],
        Box::new(move |g, _, inputs| {
            let (r, x) = (inputs[0].data(), inputs[1].data());
            let gm: Vec<T> = g
                .iter()
                .zip(&keep)
                .map(|(&v, &k)| if k { v * scale } else { T::zero() })
                .collect();
            let gr = inputs[0].requires_grad().then(|| {
                let mut gr = vec![T::zero(); f * q];
                gr.par_chunks_mut(q).enumerate().for_each(|(ch, gc)| {
                    for d in 0..nd {
                        let xc = &x[(d * f + ch) * q..(d * f + ch + 1) * q];
                        let gd = &gm[d * q..(d + 1) * q];
                        for i in 0..q {
                            gc[i] += gd[i] * xc[i];
                        }
                    }
                });
                gr
            });
            let gx = inputs[1].requires_grad().then(|| {
                let mut gx = vec![T::zero(); nd * f * q];
                gx.par_chunks_mut(q).enumerate().for_each(|(e, gc)| {
                    let (d, ch) = (e / f, e % f);
                    let rc = &r[ch * q..(ch + 1) * q];
                    let gd = &gm[d * q..(d + 1) * q];
                    for i in 0..q {
                        gc[i] = gd[i] * rc[i];
                    }
                });
                gx
            });
            vec![gr, gx]
        }),
    );
    Ok(PairCorrelation {
        volume,
        mask: mask.clone(),
    })
}

/// `C(d, p) = Σᵢ wᵢ(p) · cᵢ(d, p)` with `wᵢ(p) = max_d cᵢ(d, p)` taken over
/// valid hypotheses only; a pixel with no valid hypothesis in view `i`
/// gets `wᵢ(p) = 0`. The weight is differentiated through its argmax.
pub fn aggregate_correlation<T: Scalar>(pairs: &[PairCorrelation<T>]) -> Result<Tensor<T>> {
    let first = pairs
        .first()
        .ok_or_else(|| Error::contract("aggregate_correlation needs at least one source view"))?;
    let shape = first.volume.shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::dim("aggregate_correlation", &shape, &[]));
    }
    for p in pairs {
        if p.volume.shape() != shape.as_slice() || p.mask.shape() != shape.as_slice() {
            return Err(Error::dim(
                "aggregate_correlation",
                p.volume.shape(),
                &shape,
            ));
        }
    }
    let (nd, q) = (shape[0], shape[1] * shape[2]);
    // per view: (weight, argmax) for every pixel
    let saliency: Vec<Vec<(T, Option<usize>)>> = pairs
        .iter()
        .map(|p| {
            let (c, m) = (p.volume.data(), p.mask.data());
            (0..q)
                .map(|i| {
                    let mut best: Option<(T, usize)> = None;
                    for d in 0..nd {
                        let e = d * q + i;
                        if m[e] && best.is_none_or(|(b, _)| c[e] > b) {
                            best = Some((c[e], d));
                        }
                    }
                    best.map_or((T::zero(), None), |(b, d)| (b, Some(d)))
                })
                .collect()
        })
        .collect();
    let mut out = vec![T::zero(); nd * q];
    for (p, sal) in pairs.iter().zip(&saliency) {
        let c = p.volume.data();
        out.par_chunks_mut(q).enumerate().for_each(|(d, od)| {
            for i in 0..q {
                od[i] += sal[i].0 * c[d * q + i];
            }
        });
    }
    let inputs: Vec<Tensor<T>> = pairs.iter().map(|p| p.volume.clone()).collect();
    Ok(Tensor::from_op(
        out,
        shape,
        "aggregate_correlation",
        inputs,
        Box::new(move |g, _, inputs| {
            inputs
                .iter()
                .zip(&saliency)
                .map(|(t, sal)| {
                    t.requires_grad().then(|| {
                        let c = t.data();
                        let mut gc = vec![T::zero(); nd * q];
                        for i in 0..q {
                            let (wi, arg) = sal[i];
                            let mut through_max = T::zero();
                            for d in 0..nd {
                                let e = d * q + i;
                                gc[e] = g[e] * wi;
                                through_max += g[e] * c[e];
                            }
                            if let Some(a) = arg {
                                gc[a * q + i] += through_max;
                            }
                        }
                        gc
                    })
                })
                .collect()
        }),
    ))
}

/// Warps every source, correlates it with the reference and aggregates.
pub fn build_correlation_volume<T: Scalar>(
    reference: &Tensor<T>,
    sources: &[Tensor<T>],
    ref_cam: &Camera,
    src_cams: &[Camera],
    hyps: &DepthHypotheses,
    scale_by_channels: bool,
) -> Result<Tensor<T>> {
    if sources.len() != src_cams.len() {
        return Err(Error::contract(format!(
            "{} source features but {} source cameras",
            sources.len(),
            src_cams.len()
        )));
    }
    let pairs = sources
        .iter()
        .zip(src_cams)
        .map(|(f, cam)| {
            let (warped, mask) = warp_source_features(f, hyps, ref_cam, cam)?;
            pairwise_correlation(reference, &warped, &mask, scale_by_channels)
        })
        .collect::<Result<Vec<_>>>()?;
    aggregate_correlation(&pairs)
}

/// Zero-mean, unit-norm `(2r+1)²·C` patch descriptors per pixel, `[F, H, W]`.
///
/// Patches are clamped at the border. With these features the correlation
/// is normalized cross-correlation, a learning-free matching baseline.
pub fn raw_patch_features<T: Scalar>(image: &Image, radius: usize) -> Tensor<T> {
    let (c, h, w) = (image.channels, image.height, image.width);
    let side = 2 * radius + 1;
    let f = c * side * side;
    let q = h * w;
    let mut out = vec![0.0f64; f * q];
    let r = radius as isize;
    for y in 0..h {
        for x in 0..w {
            let mut desc = Vec::with_capacity(f);
            for ch in 0..c {
                for dy in -r..=r {
                    for dx in -r..=r {
                        let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                        let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                        desc.push(image.get(ch, yy, xx));
                    }
                }
            }
            let mean = desc.iter().sum::<f64>() / f as f64;
            let norm = desc
                .iter()
                .map(|v| (v - mean).powi(2))
                .sum::<f64>()
                .sqrt()
                .max(1e-12);
            for (k, v) in desc.iter().enumerate() {
                out[k * q + y * w + x] = (v - mean) / norm;
            }
        }
    }
    Tensor::from_f64(&out, &[f, h, w]).expect("descriptor extents are consistent")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{sample_hypotheses_initial, Extrinsics, Intrinsics};

    fn pair(values: &[f64], d: usize) -> PairCorrelation<f64> {
        PairCorrelation {
            volume: Tensor::from_f64(values, &[d, 1, 1]).unwrap(),
            mask: Mask::full(&[d, 1, 1], true),
        }
    }

    #[test]
    fn two_view_aggregation_example() {
        let c = aggregate_correlation(&[pair(&[0.2, 0.8], 2), pair(&[0.6, 0.4], 2)]).unwrap();
        let v = c.to_vec();
        assert!((v[0] - 0.52).abs() < 1e-12 && (v[1] - 0.88).abs() < 1e-12);
        assert!(aggregate_correlation::<f64>(&[]).is_err());
    }

    #[test]
    fn masked_view_contributes_nothing() {
        let masked = PairCorrelation {
            volume: Tensor::from_f64(&[0.0, 0.0], &[2, 1, 1]).unwrap(),
            mask: Mask::full(&[2, 1, 1], false),
        };
        let c = aggregate_correlation(&[pair(&[0.2, 0.8], 2), masked]).unwrap();
        assert_eq!(c.to_vec(), vec![0.8 * 0.2, 0.8 * 0.8]);
    }

    #[test]
    fn identical_cameras_copy_features() {
        let cam = Camera::new(
            Intrinsics::new(10.0, 10.0, 2.0, 1.5).unwrap(),
            Extrinsics::identity(),
        );
        let feat = Tensor::<f64>::from_f64(&(0..24).map(f64::from).collect::<Vec<_>>(), &[2, 3, 4])
            .unwrap();
        let hyps = sample_hypotheses_initial(1.0, 2.0, 3).unwrap();
        let (w, m) = warp_source_features(&feat, &hyps, &cam, &cam).unwrap();
        assert_eq!(w.shape(), &[3, 2, 3, 4]);
        assert_eq!(m.count(), 36);
        for d in 0..3 {
            assert_eq!(&w.data()[d * 24..(d + 1) * 24], feat.data());
        }
        let c = pairwise_correlation(&feat, &w, &m, false).unwrap();
        let norms: Vec<f64> = (0..12)
            .map(|i| feat.data()[i].powi(2) + feat.data()[12 + i].powi(2))
            .collect();
        for d in 0..3 {
            assert_eq!(&c.volume.data()[d * 12..(d + 1) * 12], norms.as_slice());
        }
    }
}
