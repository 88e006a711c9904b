use nalgebra::Vector3;
use proptest::prelude::*;

use mvs_core::geometry::{sample_hypotheses_initial, DepthHypotheses};
use mvs_core::image::DepthMap;
use mvs_core::metrics::{cloud_metrics, depth_metrics, nearest_brute_force, GridIndex};
use mvs_core::training::focal_loss;
use mvs_core::Tensor;

const D_MIN: f64 = 1.5;
const D_MAX: f64 = 5.0;

/// Softmax probabilities over `d` hypotheses for an `h`×`w` map, with ground
/// truth and a mask.
#[derive(Debug, Clone)]
struct LossCase {
    d: usize,
    h: usize,
    w: usize,
    logits: Vec<f64>,
    gt: Vec<f64>,
    mask: Vec<bool>,
}

fn loss_case() -> impl Strategy<Value = LossCase> {
    (2usize..9, 1usize..6, 1usize..6).prop_flat_map(|(d, h, w)| {
        let q = h * w;
        (
            prop::collection::vec(-4.0f64..4.0, d * q),
            prop::collection::vec(D_MIN..D_MAX, q),
            prop::collection::vec(any::<bool>(), q),
        )
            .prop_map(move |(logits, gt, mask)| LossCase {
                d,
                h,
                w,
                logits,
                gt,
                mask,
            })
    })
}

fn loss_of(c: &LossCase, gamma: f64) -> f64 {
    let hyps = sample_hypotheses_initial(D_MIN, D_MAX, c.d).unwrap();
    let prob = Tensor::<f64>::new(c.logits.clone(), &[c.d, c.h, c.w])
        .unwrap()
        .softmax(0)
        .unwrap();
    let gt = DepthMap::new(c.h, c.w, c.gt.clone()).unwrap();
    focal_loss(&prob, &gt, &hyps, &c.mask, gamma)
        .unwrap()
        .loss
        .item()
        .unwrap()
}

fn point() -> impl Strategy<Value = Vector3<f64>> {
    (-2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0).prop_map(|(x, y, z)| Vector3::new(x, y, z))
}

fn cloud(max: usize) -> impl Strategy<Value = Vec<Vector3<f64>>> {
    prop::collection::vec(point(), 1..max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn focal_loss_is_non_negative(c in loss_case(), gamma in 0.0f64..5.0) {
        prop_assert!(loss_of(&c, gamma) >= 0.0);
    }

    #[test]
    fn focal_loss_does_not_grow_with_gamma(c in loss_case(), g in 0.0f64..4.0, dg in 0.0f64..2.0) {
        prop_assert!(loss_of(&c, g + dg) <= loss_of(&c, g) + 1e-12);
    }

    #[test]
    fn masked_pixels_do_not_affect_loss(c in loss_case(), noise in prop::collection::vec(-4.0f64..4.0, 400), shift in D_MIN..D_MAX) {
        let q = c.h * c.w;
        let mut other = c.clone();
        for i in (0..q).filter(|&i| !c.mask[i]) {
            other.gt[i] = shift;
            for k in 0..c.d {
                other.logits[k * q + i] = noise[(k * q + i) % noise.len()];
            }
        }
        prop_assert_eq!(loss_of(&c, 2.0), loss_of(&other, 2.0));
    }

    #[test]
    fn accuracy_and_completeness_swap(a in cloud(60), b in cloud(60), clamp in 0.01f64..5.0) {
        let ab = cloud_metrics(&a, &b, clamp).unwrap();
        let ba = cloud_metrics(&b, &a, clamp).unwrap();
        prop_assert_eq!(ab.accuracy, ba.completeness);
        prop_assert_eq!(ab.completeness, ba.accuracy);
        prop_assert_eq!(ab.overall, ba.overall);
    }

    #[test]
    fn completeness_never_rises_as_points_are_added(a in cloud(60), extra in cloud(30), b in cloud(60), clamp in 0.01f64..5.0) {
        let before = cloud_metrics(&a, &b, clamp).unwrap().completeness;
        let mut grown = a.clone();
        grown.extend(extra);
        prop_assert!(cloud_metrics(&grown, &b, clamp).unwrap().completeness <= before);
    }

    #[test]
    fn grid_index_matches_brute_force(pts in cloud(200), queries in cloud(40)) {
        let grid = GridIndex::new(&pts).unwrap();
        for q in &queries {
            let (gi, gd) = grid.nearest(q);
            let (_, bd) = nearest_brute_force(&pts, q);
            prop_assert_eq!(gd, bd);
            prop_assert_eq!((pts[gi] - q).norm(), bd);
        }
    }

    #[test]
    fn three_pixel_error_rate_is_below_one_pixel_rate(
        vals in prop::collection::vec((D_MIN..D_MAX, D_MIN..D_MAX, any::<bool>()), 1..100)
    ) {
        let n = vals.len();
        let gt = DepthMap::new(1, n, vals.iter().map(|v| v.0).collect()).unwrap();
        let pred = DepthMap::new(1, n, vals.iter().map(|v| v.1).collect()).unwrap();
        let mut mask: Vec<bool> = vals.iter().map(|v| v.2).collect();
        mask[0] = true;
        let m = depth_metrics(&pred, &gt, &mask, D_MIN, D_MAX).unwrap();
        prop_assert!(m.e3 <= m.e1);
        prop_assert!(m.epe >= 0.0);
    }

    #[test]
    fn initial_hypotheses_are_uniform_and_span_the_range(count in 2usize..64) {
        let h: DepthHypotheses = sample_hypotheses_initial(D_MIN, D_MAX, count).unwrap();
        prop_assert_eq!(h.count(), count);
        prop_assert!((h.value(0, 0) - D_MIN).abs() < 1e-12);
        prop_assert!((h.value(count - 1, 0) - D_MAX).abs() < 1e-12);
        for k in 1..count {
            let gap = h.value(k, 0) - h.value(k - 1, 0);
            prop_assert!((gap - h.interval).abs() < 1e-12);
        }
    }
}
