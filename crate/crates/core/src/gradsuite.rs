//! Finite-difference gradient suite over every differentiable operation
//! and over the full cascade loss.
//!
//! Each operation is checked on random small instances through a weighted
//! sum of its output, so every output element contributes a distinct
//! cotangent.

use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cost_volume::{aggregate_correlation, pairwise_correlation};
use crate::error::{Error, Result};
use crate::features::deform_conv2d;
use crate::fmt::linear_attention;
use crate::geometry::{render_synthetic_scene, sample_hypotheses_initial, SceneSpec};
use crate::image::DepthMap;
use crate::model::{ModelConfig, TransMvsNet};
use crate::nn::instance_norm;
use crate::tensor::gradcheck::{
    check_gradients, relative_error_with_floor, GradCheckReport, DEFAULT_STEP,
};
use crate::tensor::{ConvOptions, Mask, Tensor};
use crate::training::{jitter_offsets, parameter_gradcheck, LossConfig};

/// Largest accepted relative error.
pub const SUITE_TOLERANCE: f64 = 1e-4;

/// Denominator floor for the cascade check. Most parameters of the full
/// model have gradients below 1e-6, where central differences of an O(1)
/// loss carry absolute noise around 1e-11.
pub const CASCADE_REL_ERR_FLOOR: f64 = 1e-5;

/// Offset jitter applied before probing the cascade.
pub const CASCADE_OFFSET_JITTER: f64 = 0.3;

/// Replacement draws allowed per kinked probe.
const KINK_RETRIES: usize = 8;

pub const OP_NAMES: &[&str] = &[
    "matmul",
    "conv2d",
    "conv3d",
    "grid_sample",
    "elu",
    "softmax",
    "reductions",
    "elementwise",
    "instance_norm",
    "resample",
    "deform_conv",
    "linear_attention",
    "correlation",
    "focal_loss",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SuiteScope {
    Ops,
    Cascade,
    All,
}

impl FromStr for SuiteScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ops" => Ok(Self::Ops),
            "cascade" => Ok(Self::Cascade),
            "all" => Ok(Self::All),
            _ => Err(Error::Config(format!(
                "unknown gradcheck scope `{s}` (ops, cascade, all)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteEntry {
    pub name: String,
    pub instances: usize,
    pub checked: usize,
    pub max_rel_err: f64,
    /// Cascade probes redrawn because they straddled a kink.
    pub kinks: usize,
    pub seconds: f64,
}

impl SuiteEntry {
    pub fn passes(&self) -> bool {
        self.checked > 0 && self.max_rel_err < SUITE_TOLERANCE
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Values bounded away from zero, where `elu` and `relu` switch branches.
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.5);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

/// Continuous coordinates inside `[0, extent − 1]` whose fractional part
/// stays clear of the bilinear cell edges.
fn off_lattice(rng: &mut ChaCha8Rng, extent: usize) -> f64 {
    let cell = rng.gen_range(0..extent.saturating_sub(1).max(1));
    cell as f64 + rng.gen_range(0.02..0.98)
}

/// `Σ wᵢ · outᵢ` with fixed pseudo-random weights.
fn project(out: &Tensor<f64>, phase: f64) -> Result<Tensor<f64>> {
    let w: Vec<f64> = (0..out.numel())
        .map(|i| (i as f64 * 0.7311 + phase).sin() + 0.3)
        .collect();
    Ok(out.mul(&Tensor::new(w, out.shape())?)?.sum())
}

type Inputs = Vec<(Vec<f64>, Vec<usize>)>;

fn run<F>(f: F, inputs: &Inputs) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    check_gradients(f, inputs, DEFAULT_STEP, None)
}

/// One random instance of operation `op`.
pub fn op_instance(op: &str, rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let phase = rng.gen_range(0.0..6.0);
    match op {
        "matmul" => {
            let (m, k, n) = (
                rng.gen_range(1..5),
                rng.gen_range(1..5),
                rng.gen_range(1..5),
            );
            let batch = rng.gen_range(0..3);
            let (sa, sb) = if batch == 0 {
                (vec![m, k], vec![k, n])
            } else {
                (vec![batch, m, k], vec![batch, k, n])
            };
            let inputs = vec![
                (uniform(rng, sa.iter().product(), -1.0, 1.0), sa),
                (uniform(rng, sb.iter().product(), -1.0, 1.0), sb),
            ];
            run(|x| project(&x[0].matmul(&x[1])?, phase), &inputs)
        }
        "conv2d" => {
            let (ci, co) = (rng.gen_range(1..3), rng.gen_range(1..3));
            let (h, w) = (rng.gen_range(3..6), rng.gen_range(3..6));
            let k = if rng.gen_bool(0.5) { 3 } else { 1 };
            let opts = ConvOptions {
                stride: rng.gen_range(1..3),
                padding: rng.gen_range(0..=k / 2),
            };
            let inputs = vec![
                (uniform(rng, ci * h * w, -1.0, 1.0), vec![ci, h, w]),
                (uniform(rng, co * ci * k * k, -1.0, 1.0), vec![co, ci, k, k]),
            ];
            run(|x| project(&x[0].conv2d(&x[1], opts)?, phase), &inputs)
        }
        "conv3d" => {
            let (ci, co) = (rng.gen_range(1..3), rng.gen_range(1..3));
            let (d, h, w) = (
                rng.gen_range(2..4),
                rng.gen_range(2..4),
                rng.gen_range(2..4),
            );
            let opts = ConvOptions {
                stride: rng.gen_range(1..3),
                padding: 1,
            };
            let inputs = vec![
                (uniform(rng, ci * d * h * w, -1.0, 1.0), vec![ci, d, h, w]),
                (uniform(rng, co * ci * 27, -1.0, 1.0), vec![co, ci, 3, 3, 3]),
            ];
            run(|x| project(&x[0].conv3d(&x[1], opts)?, phase), &inputs)
        }
        "grid_sample" => {
            let (c, h, w) = (
                rng.gen_range(1..3),
                rng.gen_range(2..5),
                rng.gen_range(2..5),
            );
            let (ho, wo) = (rng.gen_range(1..4), rng.gen_range(1..4));
            let grid: Vec<f64> = (0..ho * wo)
                .flat_map(|_| [off_lattice(rng, w), off_lattice(rng, h)])
                .collect();
            let inputs = vec![
                (uniform(rng, c * h * w, -1.0, 1.0), vec![c, h, w]),
                (grid, vec![ho, wo, 2]),
            ];
            run(|x| project(&x[0].grid_sample_2d(&x[1])?.0, phase), &inputs)
        }
        "elu" => {
            let n = rng.gen_range(2..12);
            let inputs = vec![(away_from_zero(rng, n), vec![n])];
            run(
                |x| project(&x[0].elu().add(&x[0].elu_plus_one().mul(&x[0])?)?, phase),
                &inputs,
            )
        }
        "softmax" => {
            let shape = vec![
                rng.gen_range(1..4),
                rng.gen_range(2..5),
                rng.gen_range(1..4),
            ];
            let axis = rng.gen_range(0..3);
            let inputs = vec![(uniform(rng, shape.iter().product(), -2.0, 2.0), shape)];
            run(|x| project(&x[0].softmax(axis)?, phase), &inputs)
        }
        "reductions" => {
            let shape = vec![
                rng.gen_range(1..4),
                rng.gen_range(1..4),
                rng.gen_range(1..4),
            ];
            let (a, b) = (rng.gen_range(0..3), rng.gen_range(0..2));
            let inputs = vec![(uniform(rng, shape.iter().product(), -1.0, 1.0), shape)];
            run(
                |x| {
                    let s = x[0].sum_axis(a, true)?;
                    let m = x[0].mean_axis(a, false)?.mean_axis(b, true)?;
                    project(&s, phase)?
                        .add(&project(&m, phase + 1.0)?)?
                        .add(&x[0].mean())
                },
                &inputs,
            )
        }
        "elementwise" => {
            let n = rng.gen_range(2..10);
            let inputs = vec![
                (uniform(rng, n, 0.3, 2.0), vec![n]),
                (uniform(rng, n, 0.3, 2.0), vec![n]),
            ];
            run(
                |x| {
                    let (a, b) = (&x[0], &x[1]);
                    let y = a.div(b)?.add(&a.log())?.add(&b.sqrt().powf(1.7))?;
                    let y = y.sub(&a.mul(b)?.neg().exp())?.add(&a.sub(b)?.relu())?;
                    project(&y.mul_scalar(0.5).add_scalar(0.1), phase)
                },
                &inputs,
            )
        }
        "instance_norm" => {
            let shape = vec![
                rng.gen_range(1..3),
                rng.gen_range(2..4),
                rng.gen_range(2..4),
            ];
            let inputs = vec![(uniform(rng, shape.iter().product(), -1.0, 1.0), shape)];
            run(|x| project(&instance_norm(&x[0])?, phase), &inputs)
        }
        "resample" => {
            let (c, h, w) = (
                rng.gen_range(1..3),
                rng.gen_range(2..4),
                rng.gen_range(2..4),
            );
            let (ho, wo) = (rng.gen_range(1..7), rng.gen_range(1..7));
            let inputs = vec![(uniform(rng, c * h * w, -1.0, 1.0), vec![c, h, w])];
            run(
                |x| {
                    let up = project(&x[0].upsample_bilinear_2x()?, phase)?;
                    up.add(&project(&x[0].resize_trailing(&[ho, wo])?, phase + 2.0)?)
                },
                &inputs,
            )
        }
        "deform_conv" => {
            let (ci, co) = (rng.gen_range(1..3), rng.gen_range(1..3));
            let (h, w) = (rng.gen_range(2..5), rng.gen_range(2..5));
            let inputs = vec![
                (uniform(rng, ci * h * w, -1.0, 1.0), vec![ci, h, w]),
                (uniform(rng, 18 * h * w, -1.5, 1.5), vec![18, h, w]),
                (uniform(rng, co * ci * 9, -1.0, 1.0), vec![co, ci, 3, 3]),
            ];
            run(
                |x| project(&deform_conv2d(&x[0], &x[1], &x[2])?, phase),
                &inputs,
            )
        }
        "linear_attention" => {
            let heads = rng.gen_range(1..3);
            let f = heads * rng.gen_range(1..4);
            let (l, s) = (rng.gen_range(1..6), rng.gen_range(1..6));
            let normalize = rng.gen_bool(0.5);
            let inputs = vec![
                (away_from_zero(rng, l * f), vec![l, f]),
                (away_from_zero(rng, s * f), vec![s, f]),
                (uniform(rng, s * f, -1.0, 1.0), vec![s, f]),
            ];
            run(
                |x| {
                    project(
                        &linear_attention(&x[0], &x[1], &x[2], heads, normalize)?,
                        phase,
                    )
                },
                &inputs,
            )
        }
        "correlation" => {
            let (d, f, h, w) = (
                rng.gen_range(2..5),
                rng.gen_range(1..4),
                rng.gen_range(1..4),
                rng.gen_range(1..4),
            );
            let masks: Vec<Mask> = (0..2)
                .map(|_| {
                    Mask::new(
                        (0..d * h * w).map(|_| rng.gen_bool(0.8)).collect(),
                        &[d, h, w],
                    )
                })
                .collect::<Result<_>>()?;
            let inputs = vec![
                (uniform(rng, f * h * w, -1.0, 1.0), vec![f, h, w]),
                (uniform(rng, d * f * h * w, -1.0, 1.0), vec![d, f, h, w]),
                (uniform(rng, d * f * h * w, -1.0, 1.0), vec![d, f, h, w]),
            ];
            run(
                |x| {
                    let pairs = [
                        pairwise_correlation(&x[0], &x[1], &masks[0], false)?,
                        pairwise_correlation(&x[0], &x[2], &masks[1], true)?,
                    ];
                    project(&aggregate_correlation(&pairs)?, phase)
                },
                &inputs,
            )
        }
        "focal_loss" => {
            let (d, h, w) = (
                rng.gen_range(2..6),
                rng.gen_range(1..4),
                rng.gen_range(1..4),
            );
            let hyps = sample_hypotheses_initial(1.0, 3.0, d)?;
            let gt = DepthMap::new(h, w, uniform(rng, h * w, 1.0, 3.0))?;
            let mut mask: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(0.7)).collect();
            mask[0] = true;
            let gamma = [0.0, 0.5, 1.0, 2.0][rng.gen_range(0..4)];
            let inputs = vec![(uniform(rng, d * h * w, -2.0, 2.0), vec![d, h, w])];
            run(
                |x| {
                    Ok(
                        crate::training::focal_loss(&x[0].softmax(0)?, &gt, &hyps, &mask, gamma)?
                            .loss,
                    )
                },
                &inputs,
            )
        }
        _ => Err(Error::Config(format!("unknown operation `{op}`"))),
    }
}

/// `instances` random checks of one operation.
pub fn run_op(op: &str, instances: usize, seed: u64) -> Result<SuiteEntry> {
    let t = Instant::now();
    let mut total = GradCheckReport::default();
    for i in 0..instances {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(i as u64));
        total.merge(&op_instance(op, &mut rng)?);
    }
    Ok(SuiteEntry {
        name: op.to_string(),
        instances,
        checked: total.checked,
        max_rel_err: total.max_rel_err,
        kinks: 0,
        seconds: t.elapsed().as_secs_f64(),
    })
}

/// Scene used for the cascade check: 8×8 pixels, three views.
pub fn cascade_scene_spec() -> SceneSpec {
    SceneSpec {
        height: 8,
        width: 8,
        focal: 16.0,
        supersample: 1,
        ..SceneSpec::default()
    }
}

/// Full cascade loss against central differences on parameter elements.
///
/// Each instance has its own scene, model and offset jitter and probes
/// `picks` random parameter elements. Probes whose one-sided slopes
/// disagree sit on a ReLU or winner-take-all switch and are redrawn.
pub fn run_cascade(instances: usize, picks: usize, seed: u64) -> Result<SuiteEntry> {
    let t = Instant::now();
    let spec = cascade_scene_spec();
    let loss = LossConfig {
        gamma: 2.0,
        ..LossConfig::default()
    };
    let (mut checked, mut worst, mut kinks) = (0, 0.0f64, 0);
    for i in 0..instances {
        let s = seed.wrapping_add(i as u64);
        let scene = render_synthetic_scene(&spec, s)?;
        let model = TransMvsNet::<f64>::new(ModelConfig::default(), s)?;
        jitter_offsets(&model, CASCADE_OFFSET_JITTER, s)?;
        let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0x9e37_79b9);
        let sizes: Vec<usize> = model
            .store
            .params()
            .iter()
            .map(|p| p.get().numel())
            .collect();
        let draw = |rng: &mut ChaCha8Rng| {
            let p = rng.gen_range(0..sizes.len());
            (p, rng.gen_range(0..sizes[p]))
        };
        let mut pending: Vec<(usize, usize)> = (0..picks).map(|_| draw(&mut rng)).collect();
        for attempt in 0..=KINK_RETRIES {
            if pending.is_empty() {
                break;
            }
            let probes = parameter_gradcheck(&model, &scene.views, &loss, &pending, DEFAULT_STEP)?;
            let mut redo = Vec::new();
            for p in probes {
                if p.kink && attempt < KINK_RETRIES {
                    kinks += 1;
                    redo.push(draw(&mut rng));
                    continue;
                }
                checked += 1;
                worst = worst.max(relative_error_with_floor(
                    p.analytic,
                    p.numeric,
                    CASCADE_REL_ERR_FLOOR,
                ));
            }
            pending = redo;
        }
    }
    Ok(SuiteEntry {
        name: "cascade_loss".into(),
        instances,
        checked,
        max_rel_err: worst,
        kinks,
        seconds: t.elapsed().as_secs_f64(),
    })
}

/// Every operation (and/or the cascade) with `instances` random cases each.
pub fn run_suite(scope: SuiteScope, instances: usize, seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    if scope != SuiteScope::Cascade {
        for op in OP_NAMES {
            out.push(run_op(op, instances, seed)?);
        }
    }
    if scope != SuiteScope::Ops {
        out.push(run_cascade(instances, 10, seed)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_operation_passes_a_few_instances() {
        for op in OP_NAMES {
            let e = run_op(op, 3, 11).unwrap();
            assert!(e.passes(), "{e:?}");
        }
    }

    #[test]
    fn scope_parsing() {
        assert_eq!("ops".parse::<SuiteScope>().unwrap(), SuiteScope::Ops);
        assert!("everything".parse::<SuiteScope>().is_err());
    }
}
