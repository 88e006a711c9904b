//! Runtime scaling of factored linear attention against softmax attention.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fmt::{linear_attention, softmax_attention};
use crate::tensor::Tensor;

pub const DEFAULT_LENGTHS: [usize; 4] = [256, 1024, 4096, 16384];

/// Short calls are repeated until at least this much time has passed, so that
/// timer resolution and scheduling jitter do not dominate small lengths.
pub const MIN_TIMING_SECS: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTiming {
    pub length: usize,
    /// Median over the trials of the mean seconds per call.
    pub linear_secs: f64,
    pub softmax_secs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBench {
    pub width: usize,
    pub heads: usize,
    pub trials: usize,
    pub timings: Vec<AttentionTiming>,
    pub linear_slope: f64,
    pub softmax_slope: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Mean seconds per call of `f`, over as many calls as fit in `MIN_TIMING_SECS`.
fn time_per_call<R>(mut f: impl FnMut() -> Result<R>) -> Result<f64> {
    let start = Instant::now();
    let mut calls = 0u32;
    loop {
        std::hint::black_box(f()?);
        calls += 1;
        let secs = start.elapsed().as_secs_f64();
        if secs >= MIN_TIMING_SECS {
            return Ok(secs / f64::from(calls));
        }
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 || xs.iter().chain(ys).any(|&v| !(v > 0.0)) {
        return Err(Error::contract(
            "log-log fit needs at least two positive points",
        ));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::contract("log-log fit needs distinct lengths"));
    }
    Ok(sxy / sxx)
}

/// Self-attention over `L` random tokens of width `width` for every length,
/// timing both variants in 32-bit.
pub fn bench_attention(
    lengths: &[usize],
    width: usize,
    heads: usize,
    trials: usize,
    seed: u64,
) -> Result<AttentionBench> {
    if heads == 0 || !width.is_multiple_of(heads) || trials == 0 {
        return Err(Error::Config(format!(
            "need heads dividing width and trials > 0 (width {width}, heads {heads}, trials {trials})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut timings = Vec::with_capacity(lengths.len());
    for &l in lengths {
        let mut data = || {
            (0..l * width)
                .map(|_| rng.gen_range(-1.0f32..1.0))
                .collect::<Vec<f32>>()
        };
        let (q, k, v) = (data(), data(), data());
        let (tq, tk, tv) = (
            Tensor::new(q.clone(), &[l, width])?,
            Tensor::new(k.clone(), &[l, width])?,
            Tensor::new(v.clone(), &[l, width])?,
        );
        let mut lin = Vec::with_capacity(trials);
        let mut soft = Vec::with_capacity(trials);
        for _ in 0..trials {
            lin.push(time_per_call(|| {
                linear_attention(&tq, &tk, &tv, heads, true)
            })?);
            soft.push(time_per_call(|| {
                Ok(softmax_attention(&q, &k, &v, l, l, width, heads))
            })?);
        }
        timings.push(AttentionTiming {
            length: l,
            linear_secs: median(lin),
            softmax_secs: median(soft),
        });
    }
    let xs: Vec<f64> = timings.iter().map(|t| t.length as f64).collect();
    let linear_slope = loglog_slope(
        &xs,
        &timings.iter().map(|t| t.linear_secs).collect::<Vec<_>>(),
    )?;
    let softmax_slope = loglog_slope(
        &xs,
        &timings.iter().map(|t| t.softmax_secs).collect::<Vec<_>>(),
    )?;
    Ok(AttentionBench {
        width,
        heads,
        trials,
        timings,
        linear_slope,
        softmax_slope,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(1.5)).collect();
        assert!((loglog_slope(&xs, &ys).unwrap() - 1.5).abs() < 1e-12);
        assert!(loglog_slope(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn small_bench_runs() {
        let b = bench_attention(&[8, 16], 8, 2, 1, 0).unwrap();
        assert_eq!(b.timings.len(), 2);
        assert!(b.linear_slope.is_finite() && b.softmax_slope.is_finite());
    }
}
