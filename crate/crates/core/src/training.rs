//! Focal-loss supervision, Adam and the training loop.

use log::{debug, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{CameraView, DepthHypotheses};
use crate::image::DepthMap;
use crate::model::{StageOutput, TransMvsNet, STAGE_SCALES};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::gradcheck::relative_error;
use crate::tensor::Tensor;

/// Floor applied to probabilities inside the logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Focusing parameter; 0 gives plain cross entropy.
    pub gamma: f64,
    pub stage_weights: [f64; 3],
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 0.0,
            stage_weights: [1.0; 3],
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!(
                "gamma must be >= 0, got {}",
                self.gamma
            )));
        }
        if self
            .stage_weights
            .iter()
            .any(|w| !(*w >= 0.0 && w.is_finite()))
        {
            return Err(Error::Config(format!(
                "stage weights must be non-negative, got {:?}",
                self.stage_weights
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FocalLoss<T: Scalar> {
    pub loss: Tensor<T>,
    pub valid_pixels: usize,
}

impl<T: Scalar> FocalLoss<T> {
    /// Set when no pixel was supervised and the loss was defined as zero.
    pub fn is_empty(&self) -> bool {
        self.valid_pixels == 0
    }
}

/// Index of the hypothesis closest to `gt` at pixel `i`; the lower index
/// wins ties.
pub fn target_index(hyps: &DepthHypotheses, i: usize, gt: f64) -> usize {
    let mut best = 0;
    let mut err = f64::INFINITY;
    for k in 0..hyps.count() {
        let e = (hyps.value(k, i) - gt).abs();
        if e < err {
            err = e;
            best = k;
        }
    }
    best
}

fn focal_term(p: f64, gamma: f64) -> f64 {
    let lp = p.max(LOG_CLAMP).ln();
    if gamma == 0.0 {
        -lp
    } else {
        -(1.0 - p).max(0.0).powf(gamma) * lp
    }
}

fn focal_derivative(p: f64, gamma: f64) -> f64 {
    let q = (1.0 - p).max(0.0);
    let (lp, dlog) = if p > LOG_CLAMP {
        (p.ln(), 1.0 / p)
    } else {
        (LOG_CLAMP.ln(), 0.0)
    };
    let focus = if gamma == 0.0 || q == 0.0 {
        0.0
    } else {
        gamma * q.powf(gamma - 1.0) * lp
    };
    let weight = if gamma == 0.0 { 1.0 } else { q.powf(gamma) };
    focus - weight * dlog
}

/// Mean over valid pixels of `−(1 − P_t)^γ · log P_t`, with `t` the
/// hypothesis nearest to ground truth.
///
/// `prob: [D, H, W]`, `gt` and `mask` at the same `H × W`. With no valid
/// pixel the loss is zero and [`FocalLoss::is_empty`] is set.
pub fn focal_loss<T: Scalar>(
    prob: &Tensor<T>,
    gt: &DepthMap,
    hyps: &DepthHypotheses,
    mask: &[bool],
    gamma: f64,
) -> Result<FocalLoss<T>> {
    let s = prob.shape();
    if s.len() != 3 || s[0] != hyps.count() {
        return Err(Error::dim("focal_loss", s, &[hyps.count()]));
    }
    let (nd, h, w) = (s[0], s[1], s[2]);
    let q = h * w;
    if gt.height != h || gt.width != w || mask.len() != q {
        return Err(Error::dim(
            "focal_loss",
            &[gt.height, gt.width, mask.len()],
            &[h, w, q],
        ));
    }
    if !(gamma >= 0.0) {
        return Err(Error::Config(format!("gamma must be >= 0, got {gamma}")));
    }
    let targets: Vec<Option<usize>> = (0..q)
        .map(|i| mask[i].then(|| target_index(hyps, i, gt.data[i])))
        .collect();
    let n = targets.iter().flatten().count();
    if n == 0 {
        warn!("focal_loss: no valid pixels, loss defined as 0");
    }
    let p = prob.data();
    let total: f64 = targets
        .iter()
        .enumerate()
        .filter_map(|(i, t)| t.map(|t| focal_term(p[t * q + i].as_f64(), gamma)))
        .sum();
    let value = if n == 0 { 0.0 } else { total / n as f64 };
    let loss = Tensor::from_op(
        vec![T::lit(value)],
        vec![],
        "focal_loss",
        vec![prob.clone()],
        Box::new(move |g, _, inputs| {
            let mut gp = vec![T::zero(); nd * q];
            if n > 0 {
                let scale = g[0].as_f64() / n as f64;
                let p = inputs[0].data();
                for (i, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        let j = t * q + i;
                        gp[j] = T::lit(scale * focal_derivative(p[j].as_f64(), gamma));
                    }
                }
            }
            vec![Some(gp)]
        }),
    );
    Ok(FocalLoss {
        loss,
        valid_pixels: n,
    })
}

/// `Σ wᵢ · lossᵢ`; stages with zero weight are left off the tape.
pub fn total_loss<T: Scalar>(losses: &[Tensor<T>], weights: &[f64]) -> Result<Tensor<T>> {
    if losses.len() != weights.len() {
        return Err(Error::contract(format!(
            "{} losses but {} weights",
            losses.len(),
            weights.len()
        )));
    }
    let mut acc: Option<Tensor<T>> = None;
    for (l, &w) in losses.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        let term = if w == 1.0 { l.clone() } else { l.mul_scalar(w) };
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(&term)?,
        });
    }
    Ok(acc.unwrap_or_else(|| Tensor::scalar(T::zero())))
}

/// Ground truth at a stage's resolution (nearest-neighbor) and the pixels
/// that can be supervised: covered by the scene and inside `[d_min, d_max]`.
pub fn stage_ground_truth(
    view: &CameraView,
    stage: usize,
    d_min: f64,
    d_max: f64,
) -> Result<(DepthMap, Vec<bool>)> {
    let gt = view
        .depth
        .as_ref()
        .ok_or_else(|| Error::contract("reference view has no ground-truth depth"))?;
    let factor = (1.0 / STAGE_SCALES[stage]).round() as usize;
    let small = gt.downsample_nearest(factor);
    let mask = (0..small.height * small.width)
        .map(|i| {
            let (y, x) = (i / small.width, i % small.width);
            let covered = view
                .valid
                .as_ref()
                .is_none_or(|v| v[y * factor * gt.width + x * factor]);
            let d = small.data[i];
            covered && d.is_finite() && d >= d_min && d <= d_max
        })
        .collect();
    Ok((small, mask))
}

/// Weighted focal loss over the three stages of one forward pass.
pub fn cascade_loss<T: Scalar>(
    outputs: &[StageOutput<T>],
    reference: &CameraView,
    cfg: &LossConfig,
    d_min: f64,
    d_max: f64,
) -> Result<(Tensor<T>, [f64; 3])> {
    if outputs.len() != 3 {
        return Err(Error::contract(format!(
            "expected 3 stage outputs, got {}",
            outputs.len()
        )));
    }
    let mut losses = Vec::with_capacity(3);
    let mut values = [0.0; 3];
    for (s, out) in outputs.iter().enumerate() {
        let (gt, mask) = stage_ground_truth(reference, s, d_min, d_max)?;
        let fl = focal_loss(&out.probability, &gt, &out.hypotheses, &mask, cfg.gamma)?;
        values[s] = fl.loss.item()?.as_f64();
        losses.push(fl.loss);
    }
    Ok((total_loss(&losses, &cfg.stage_weights)?, values))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// The rate is multiplied by `decay_factor` once each listed step is reached.
    pub decay_steps: Vec<usize>,
    pub decay_factor: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_steps: vec![200, 260],
            decay_factor: 0.5,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.decay_factor > 0.0;
        if !ok {
            return Err(Error::Config(format!(
                "invalid optimizer settings {self:?}"
            )));
        }
        Ok(())
    }

    /// Learning rate in effect for the update that completes step `step`
    /// (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        let n = self.decay_steps.iter().filter(|&&s| step >= s).count();
        self.lr * self.decay_factor.powi(n as i32)
    }
}

/// Moments per parameter, in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T: Scalar> {
    pub config: AdamConfig,
    pub step: usize,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let sizes: Vec<usize> = store.params().iter().map(|p| p.get().numel()).collect();
        Ok(Self {
            config,
            step: 0,
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        })
    }

    /// One update from the gradients currently held by the store's leaves.
    /// Parameters that received no gradient keep their value and moments.
    pub fn update(&mut self, store: &ParamStore<T>) -> Result<()> {
        let params = store.params();
        if params.len() != self.m.len() {
            return Err(Error::contract(
                "optimizer state does not match the parameter store",
            ));
        }
        let c = &self.config;
        let t = (self.step + 1) as i32;
        let lr = c.lr_at(self.step);
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2, eps) = (T::lit(c.beta1), T::lit(c.beta2), T::lit(c.eps));
        let (step_size, bc2_sqrt) = (T::lit(lr / bc1), T::lit(bc2.sqrt()));
        for ((p, m), v) in params.iter().zip(&mut self.m).zip(&mut self.v) {
            let leaf = p.get();
            let Some(g) = leaf.grad() else { continue };
            let mut data = leaf.to_vec();
            data.par_iter_mut()
                .zip(m.par_iter_mut())
                .zip(v.par_iter_mut())
                .zip(g.par_iter())
                .for_each(|(((x, m), v), &g)| {
                    *m = b1 * *m + (T::one() - b1) * g;
                    *v = b2 * *v + (T::one() - b2) * g * g;
                    *x -= step_size * *m / (v.sqrt() / bc2_sqrt + eps);
                });
            p.set_data(data)?;
        }
        self.step += 1;
        Ok(())
    }
}

/// L2 norm of every parameter, by name.
pub fn parameter_norms<T: Scalar>(store: &ParamStore<T>) -> Vec<(String, f64)> {
    store
        .params()
        .iter()
        .map(|p| {
            let n = p
                .get()
                .data()
                .iter()
                .map(|v| v.as_f64().powi(2))
                .sum::<f64>()
                .sqrt();
            (p.name().to_string(), n)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub loss: f64,
    /// Unweighted focal loss per stage, averaged over the batch.
    pub stage_losses: [f64; 3],
    pub lr: f64,
}

/// Forward, loss and backward over one batch of scenes, without updating.
/// Returns the batch-mean loss and stage losses; gradients are left on the
/// parameters.
pub fn compute_gradients<T: Scalar>(
    model: &TransMvsNet<T>,
    batch: &[&[CameraView]],
    loss: &LossConfig,
) -> Result<(f64, [f64; 3])> {
    if batch.is_empty() {
        return Err(Error::contract("empty training batch"));
    }
    model.store.zero_grad();
    let (d_min, d_max) = (model.config.cascade.d_min, model.config.cascade.d_max);
    let mut total: Option<Tensor<T>> = None;
    let mut stages = [0.0; 3];
    // Sequential on purpose: tape construction order stays fixed.
    for views in batch {
        let out = model.forward(views)?;
        let (l, s) = cascade_loss(&out, &views[0], loss, d_min, d_max)?;
        for k in 0..3 {
            stages[k] += s[k] / batch.len() as f64;
        }
        total = Some(match total {
            None => l,
            Some(t) => t.add(&l)?,
        });
    }
    let total = total
        .expect("batch is non-empty")
        .mul_scalar(1.0 / batch.len() as f64);
    let value = total.item()?.as_f64();
    if !value.is_finite() {
        let norms = parameter_norms(&model.store)
            .into_iter()
            .map(|(n, v)| format!("{n}={v:.4e}"))
            .collect::<Vec<_>>()
            .join(", ");
        return Err(Error::NonFinite(format!(
            "loss {value}; parameter norms: {norms}"
        )));
    }
    if total.requires_grad() {
        total.backward()?;
    }
    Ok((value, stages))
}

/// Forward, focal loss, backward and one Adam update.
pub fn train_step<T: Scalar>(
    model: &TransMvsNet<T>,
    batch: &[&[CameraView]],
    opt: &mut Adam<T>,
    loss: &LossConfig,
) -> Result<StepReport> {
    let step = opt.step;
    let lr = opt.config.lr_at(step);
    let (value, stage_losses) = compute_gradients(model, batch, loss)?;
    opt.update(&model.store)?;
    debug!("step {step}: loss {value:.5} stages {stage_losses:?} lr {lr:.2e}");
    Ok(StepReport {
        step,
        loss: value,
        stage_losses,
        lr,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 1,
            optimizer: AdamConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "steps and batch_size must be positive".into(),
            ));
        }
        self.optimizer.validate()?;
        self.loss.validate()
    }
}

/// Trains on `scenes` (each reference-first), visiting them in a fixed
/// round-robin order. `on_step` sees every report as it is produced.
pub fn train<T: Scalar>(
    model: &TransMvsNet<T>,
    opt: &mut Adam<T>,
    scenes: &[Vec<CameraView>],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepReport),
) -> Result<Vec<StepReport>> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::contract("no training scenes"));
    }
    let mut reports = Vec::with_capacity(cfg.steps);
    let mut cursor = 0;
    for _ in 0..cfg.steps {
        let batch: Vec<&[CameraView]> = (0..cfg.batch_size)
            .map(|k| scenes[(cursor + k) % scenes.len()].as_slice())
            .collect();
        cursor = (cursor + cfg.batch_size) % scenes.len();
        let r = train_step(model, &batch, opt, &cfg.loss)?;
        on_step(&r);
        reports.push(r);
    }
    Ok(reports)
}

/// One finite-difference probe of a parameter element.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamProbe {
    pub param: usize,
    pub elem: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// The forward and backward one-sided slopes disagree: the step
    /// straddles a ReLU, max or winner-take-all switch, so the central
    /// difference does not measure a derivative.
    pub kink: bool,
}

/// One-sided slopes differing by more than this fraction mark a kink.
pub const KINK_TOLERANCE: f64 = 1e-2;

/// Central differences of the full cascade loss with respect to chosen
/// parameter elements `(parameter index in store order, element)`,
/// alongside the backward pass.
pub fn parameter_gradcheck(
    model: &TransMvsNet<f64>,
    views: &[CameraView],
    loss: &LossConfig,
    picks: &[(usize, usize)],
    h: f64,
) -> Result<Vec<ParamProbe>> {
    let params = model.store.params();
    let (d_min, d_max) = (model.config.cascade.d_min, model.config.cascade.d_max);
    let eval = || -> Result<f64> {
        let out = model.forward(views)?;
        cascade_loss(&out, &views[0], loss, d_min, d_max)?.0.item()
    };
    let (f0, _) = compute_gradients(model, &[views], loss)?;
    let analytic: Vec<f64> = picks
        .iter()
        .map(|&(p, e)| params[p].get().grad().map_or(0.0, |g| g[e]))
        .collect();
    let mut probes = Vec::with_capacity(picks.len());
    for (&(p, e), a) in picks.iter().zip(analytic) {
        let base = params[p].get().to_vec();
        let mut shifted = base.clone();
        shifted[e] = base[e] + h;
        params[p].set_data(shifted.clone())?;
        let up = eval()?;
        shifted[e] = base[e] - h;
        params[p].set_data(shifted)?;
        let down = eval()?;
        params[p].set_data(base)?;
        let (fwd, bwd) = ((up - f0) / h, (f0 - down) / h);
        probes.push(ParamProbe {
            param: p,
            elem: e,
            analytic: a,
            numeric: (up - down) / (2.0 * h),
            kink: relative_error(fwd, bwd) > KINK_TOLERANCE,
        });
    }
    Ok(probes)
}

/// Sets every deformable-offset parameter to small uniform noise so that
/// sampling taps sit off the integer lattice, where bilinear sampling is
/// differentiable.
pub fn jitter_offsets<T: Scalar>(model: &TransMvsNet<T>, amplitude: f64, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in model.store.params() {
        if p.name().contains(".offsets.") {
            let n = p.get().numel();
            p.set_data(
                (0..n)
                    .map(|_| T::lit(rng.gen_range(-amplitude..=amplitude)))
                    .collect(),
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::sample_hypotheses_initial;

    fn volume(p: &[f64], d: usize, h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_f64(p, &[d, h, w]).unwrap()
    }

    #[test]
    fn single_pixel_gamma_two() {
        let hyps = sample_hypotheses_initial(1.0, 2.0, 2).unwrap();
        let p = volume(&[0.5, 0.5], 2, 1, 1);
        let gt = DepthMap::filled(1, 1, 1.0);
        let l = focal_loss(&p, &gt, &hyps, &[true], 2.0).unwrap();
        assert!((l.loss.item().unwrap() - 0.25 * 2f64.ln()).abs() < 1e-12);
        assert!((l.loss.item().unwrap() - 0.17329).abs() < 1e-5);
    }

    #[test]
    fn certain_prediction_is_free() {
        let hyps = sample_hypotheses_initial(1.0, 3.0, 3).unwrap();
        let p = volume(&[0.0, 1.0, 1.0, 0.0, 0.0, 0.0], 3, 1, 2);
        let gt = DepthMap::new(1, 2, vec![2.1, 0.9]).unwrap();
        for g in [0.0, 0.5, 2.0] {
            assert_eq!(
                focal_loss(&p, &gt, &hyps, &[true, true], g)
                    .unwrap()
                    .loss
                    .item()
                    .unwrap(),
                0.0
            );
        }
    }

    #[test]
    fn empty_mask_is_zero_and_flagged() {
        let hyps = sample_hypotheses_initial(1.0, 2.0, 2).unwrap();
        let p = Tensor::parameter(vec![0.3, 0.7], &[2, 1, 1]).unwrap();
        let l = focal_loss(&p, &DepthMap::filled(1, 1, 1.0), &hyps, &[false], 0.0).unwrap();
        assert!(l.is_empty());
        assert_eq!(l.loss.item().unwrap(), 0.0);
        l.loss.backward().unwrap();
        assert_eq!(p.grad(), Some(vec![0.0, 0.0]));
    }

    #[test]
    fn ties_go_to_lower_hypothesis() {
        let hyps = sample_hypotheses_initial(1.0, 2.0, 2).unwrap();
        assert_eq!(target_index(&hyps, 0, 1.5), 0);
        assert_eq!(target_index(&hyps, 0, 1.6), 1);
    }

    #[test]
    fn total_loss_weighting() {
        let l: Vec<Tensor<f64>> = [1.0, 2.0, 3.0].iter().map(|&v| Tensor::scalar(v)).collect();
        assert_eq!(
            total_loss(&l, &[1.0, 1.0, 2.0]).unwrap().item().unwrap(),
            9.0
        );
        assert_eq!(
            total_loss(&l, &[0.0, 0.0, 0.0]).unwrap().item().unwrap(),
            0.0
        );
        assert_eq!(total_loss(&l[..1], &[1.0]).unwrap().item().unwrap(), 1.0);
        assert!(total_loss(&l, &[1.0]).is_err());
    }

    #[test]
    fn lr_schedule_halves_at_steps() {
        let c = AdamConfig {
            lr: 1.0,
            decay_steps: vec![2, 4],
            ..AdamConfig::default()
        };
        let lrs: Vec<f64> = (0..6).map(|s| c.lr_at(s)).collect();
        assert_eq!(lrs, vec![1.0, 1.0, 0.5, 0.5, 0.25, 0.25]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let store = ParamStore::<f64>::new(0);
        let p = store
            .root()
            .param("x", &[2], crate::nn::Init::Const(1.0))
            .unwrap();
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.1,
                ..AdamConfig::default()
            },
            &store,
        )
        .unwrap();
        p.get()
            .mul(&Tensor::from_f64(&[3.0, -2.0], &[2]).unwrap())
            .unwrap()
            .sum()
            .backward()
            .unwrap();
        opt.update(&store).unwrap();
        let x = p.get().to_vec();
        assert!(
            (x[0] - 0.9).abs() < 1e-6 && (x[1] - 1.1).abs() < 1e-6,
            "{x:?}"
        );
        assert_eq!(opt.step, 1);
    }
}
