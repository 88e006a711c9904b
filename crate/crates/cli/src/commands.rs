//! Command implementations. Each writes its artifacts under `cfg.out` and
//! returns what it wrote or measured.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use mvs_core::bench::{bench_attention as run_bench, AttentionBench};
use mvs_core::checkpoint::Checkpoint;
use mvs_core::dataset::{read_dataset, read_scene, write_scene, SceneData};
use mvs_core::fusion::{fuse_point_cloud, FusionInput};
use mvs_core::geometry::{render_synthetic_scene, CameraView};
use mvs_core::gradsuite::{run_suite, SuiteEntry, SuiteScope, SUITE_TOLERANCE};
use mvs_core::image::{DepthMap, Image, Map};
use mvs_core::io::{read_pfm, read_ply, write_pfm, write_ply, write_ppm};
use mvs_core::metrics::{cloud_metrics, depth_metrics, CloudMetrics, DepthMetrics};
use mvs_core::model::TransMvsNet;
use mvs_core::training::{stage_ground_truth, train as run_training, Adam, StepReport};

use crate::config::{BenchConfig, RunConfig};
use crate::CliError;

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const LOSS_LOG: &str = "loss.csv";
pub const FUSED_CLOUD: &str = "fused.ply";
pub const LINEAR_SLOPE_LIMIT: f64 = 1.2;
pub const SOFTMAX_SLOPE_LIMIT: f64 = 1.7;

pub fn depth_file(view: usize, stage: usize) -> String {
    format!("depth_{view:03}_stage{stage}.pfm")
}

pub fn confidence_file(view: usize, stage: usize) -> String {
    format!("confidence_{view:03}_stage{stage}.pfm")
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text)?;
    info!("wrote {}", path.display());
    Ok(())
}

/// `count` scenes with seeds `seed, seed + 1, …`.
pub fn synth(cfg: &RunConfig, count: usize) -> Result<Vec<PathBuf>, CliError> {
    let mut dirs = Vec::with_capacity(count);
    for i in 0..count {
        let scene = render_synthetic_scene(&cfg.scene, cfg.seed + i as u64)?;
        let dir = cfg.out.join(format!("scene_{i:03}"));
        write_scene(&dir, &scene, cfg.model.cascade.counts[0])?;
        info!("scene {i} -> {}", dir.display());
        dirs.push(dir);
    }
    Ok(dirs)
}

fn check_range(cfg: &RunConfig, scene: &SceneData) {
    if (scene.d_min, scene.d_max) != (cfg.scene.d_min, cfg.scene.d_max) {
        warn!(
            "scene {} spans [{}, {}] but the model is configured for [{}, {}]",
            scene.name, scene.d_min, scene.d_max, cfg.scene.d_min, cfg.scene.d_max
        );
    }
}

pub fn train(
    cfg: &RunConfig,
    data: &Path,
    resume: Option<&Path>,
) -> Result<Vec<StepReport>, CliError> {
    let scenes = read_dataset(data)?;
    for s in &scenes {
        check_range(cfg, s);
        if s.views.len() < 2 || s.views[0].depth.is_none() {
            return Err(CliError::Config(format!(
                "scene {} needs two or more views and reference ground truth",
                s.name
            )));
        }
    }
    let views: Vec<Vec<CameraView>> = scenes.into_iter().map(|s| s.views).collect();
    let model = TransMvsNet::<f32>::new(cfg.model_config(), cfg.seed)?;
    let mut opt = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            ck.apply(&model.store)?;
            ck.restore_optimizer(cfg.train.optimizer.clone(), &model.store)?
        }
        None => Adam::new(cfg.train.optimizer.clone(), &model.store)?,
    };
    info!(
        "training {} parameters on {} scenes for {} steps",
        model.store.num_scalars(),
        views.len(),
        cfg.train.steps
    );
    let mut log = String::from("step,loss,stage1,stage2,stage3,lr\n");
    let reports = run_training(&model, &mut opt, &views, &cfg.train, |r| {
        let [a, b, c] = r.stage_losses;
        let _ = writeln!(log, "{},{},{a},{b},{c},{}", r.step, r.loss, r.lr);
        if r.step % 10 == 0 {
            info!("step {} loss {:.4}", r.step, r.loss);
        }
    })?;
    write_text(&cfg.out.join(LOSS_LOG), &log)?;
    let path = cfg.out.join(CHECKPOINT_FILE);
    Checkpoint::capture(&model.store, Some(&opt)).save(&path)?;
    info!("wrote {}", path.display());
    Ok(reports)
}

/// Views of `scene` with `r` moved to the front.
fn reference_first(views: &[CameraView], r: usize) -> Vec<CameraView> {
    let mut v = vec![views[r].clone()];
    v.extend(
        views
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != r)
            .map(|(_, x)| x.clone()),
    );
    v
}

pub fn infer(
    cfg: &RunConfig,
    scene: &Path,
    checkpoint: Option<&Path>,
    refs: &[usize],
) -> Result<Vec<PathBuf>, CliError> {
    let data = read_scene(scene)?;
    check_range(cfg, &data);
    if data.views.len() < 2 {
        return Err(CliError::Config(format!(
            "scene {} has fewer than two views",
            data.name
        )));
    }
    let model = TransMvsNet::<f32>::new(cfg.model_config(), cfg.seed)?;
    match checkpoint {
        Some(p) => Checkpoint::load(p)?.apply(&model.store)?,
        None => warn!("no checkpoint given; using the untrained model"),
    }
    let refs: Vec<usize> = if refs.is_empty() {
        (0..data.views.len()).collect()
    } else {
        refs.to_vec()
    };
    let mut written = Vec::new();
    for &r in &refs {
        if r >= data.views.len() {
            return Err(CliError::Config(format!(
                "view {r} out of range (scene has {})",
                data.views.len()
            )));
        }
        let outputs = model.forward(&reference_first(&data.views, r))?;
        for (s, o) in outputs.iter().enumerate() {
            let dp = cfg.out.join(depth_file(r, s + 1));
            let cp = cfg.out.join(confidence_file(r, s + 1));
            write_pfm(&dp, &o.estimate.depth)?;
            write_pfm(&cp, &o.estimate.confidence)?;
            written.extend([dp, cp]);
        }
        info!("view {r}: wrote {} stage maps", outputs.len());
    }
    Ok(written)
}

pub enum DepthSource {
    Directory(PathBuf),
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FuseSummary {
    pub points: usize,
    /// Fraction of pixels kept per view.
    pub kept: Vec<f64>,
}

fn mask_image(mask: &[bool], h: usize, w: usize) -> Image {
    let mut img = Image::zeros(3, h, w);
    for (i, &m) in mask.iter().enumerate() {
        if m {
            for c in 0..3 {
                img.set(c, i / w, i % w, 1.0);
            }
        }
    }
    img
}

pub fn fuse(cfg: &RunConfig, scene: &Path, source: &DepthSource) -> Result<FuseSummary, CliError> {
    let data = read_scene(scene)?;
    let inputs = data
        .views
        .iter()
        .enumerate()
        .map(|(i, v)| match source {
            DepthSource::GroundTruth => {
                let depth = v.depth.clone().ok_or_else(|| {
                    CliError::Config(format!("view {i} has no ground-truth depth"))
                })?;
                let confidence = Map::filled(depth.height, depth.width, 1.0);
                Ok(FusionInput { depth, confidence })
            }
            DepthSource::Directory(dir) => Ok(FusionInput {
                depth: read_pfm(&dir.join(depth_file(i, 3)))?,
                confidence: read_pfm(&dir.join(confidence_file(i, 3)))?,
            }),
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let (cloud, masks) = fuse_point_cloud(&inputs, &data.views, &cfg.fusion)?;
    let ply = cfg.out.join(FUSED_CLOUD);
    write_ply(&ply, &cloud)?;
    info!("wrote {} ({} points)", ply.display(), cloud.len());
    let mask_dir = cfg.out.join("masks");
    fs::create_dir_all(&mask_dir)?;
    let mut kept = Vec::with_capacity(masks.len());
    for (i, m) in masks.iter().enumerate() {
        let (h, w) = (inputs[i].depth.height, inputs[i].depth.width);
        write_ppm(&mask_dir.join(format!("{i:03}.ppm")), &mask_image(m, h, w))?;
        kept.push(m.iter().filter(|&&b| b).count() as f64 / m.len().max(1) as f64);
    }
    Ok(FuseSummary {
        points: cloud.len(),
        kept,
    })
}

/// Scores every `depth_NNN_stage{stage}.pfm` found for the scene's views.
pub fn eval_depth(
    cfg: &RunConfig,
    predictions: &Path,
    scene: &Path,
    stage: usize,
) -> Result<Vec<(usize, DepthMetrics)>, CliError> {
    if !(1..=3).contains(&stage) {
        return Err(CliError::Config(format!(
            "stage must be 1, 2 or 3, got {stage}"
        )));
    }
    let data = read_scene(scene)?;
    let mut rows = Vec::new();
    for (i, v) in data.views.iter().enumerate() {
        let p = predictions.join(depth_file(i, stage));
        if !p.exists() {
            continue;
        }
        let pred: DepthMap = read_pfm(&p)?;
        let (gt, mask) = stage_ground_truth(v, stage - 1, data.d_min, data.d_max)?;
        rows.push((i, depth_metrics(&pred, &gt, &mask, data.d_min, data.d_max)?));
    }
    if rows.is_empty() {
        return Err(CliError::Config(format!(
            "no stage-{stage} depth maps for this scene in {}",
            predictions.display()
        )));
    }
    let mut csv = String::from("view,epe,e1,e3\n");
    for (i, m) in &rows {
        let _ = writeln!(csv, "{i},{},{},{}", m.epe, m.e1, m.e3);
    }
    let n = rows.len() as f64;
    let mean = |f: fn(&DepthMetrics) -> f64| rows.iter().map(|(_, m)| f(m)).sum::<f64>() / n;
    let _ = writeln!(
        csv,
        "mean,{},{},{}",
        mean(|m| m.epe),
        mean(|m| m.e1),
        mean(|m| m.e3)
    );
    print!("{csv}");
    write_text(&cfg.out.join("eval_depth.csv"), &csv)?;
    Ok(rows)
}

pub fn eval_cloud(
    cfg: &RunConfig,
    reconstruction: &Path,
    reference: &Path,
) -> Result<CloudMetrics, CliError> {
    let recon = read_ply(reconstruction)?.positions();
    let refc = read_ply(reference)?.positions();
    let m = cloud_metrics(&recon, &refc, cfg.eval_clamp)?;
    let csv = format!(
        "accuracy,completeness,overall\n{},{},{}\n",
        m.accuracy, m.completeness, m.overall
    );
    print!("{csv}");
    write_text(&cfg.out.join("eval_cloud.csv"), &csv)?;
    Ok(m)
}

pub fn bench_attention(
    cfg: &RunConfig,
    b: &BenchConfig,
    check: bool,
) -> Result<AttentionBench, CliError> {
    let r = run_bench(&b.lengths, b.width, b.heads, b.trials, cfg.seed)?;
    let mut csv = String::from("length,linear_secs,softmax_secs\n");
    for t in &r.timings {
        let _ = writeln!(csv, "{},{},{}", t.length, t.linear_secs, t.softmax_secs);
    }
    write_text(&cfg.out.join("bench_attention.csv"), &csv)?;
    let slopes = format!(
        "variant,slope\nlinear,{}\nsoftmax,{}\n",
        r.linear_slope, r.softmax_slope
    );
    write_text(&cfg.out.join("bench_slopes.csv"), &slopes)?;
    print!("{csv}{slopes}");
    if check && !(r.linear_slope < LINEAR_SLOPE_LIMIT && r.softmax_slope > SOFTMAX_SLOPE_LIMIT) {
        return Err(CliError::Failed(format!(
            "slope contract violated: linear {:.3} (< {LINEAR_SLOPE_LIMIT}), softmax {:.3} (> {SOFTMAX_SLOPE_LIMIT})",
            r.linear_slope, r.softmax_slope
        )));
    }
    Ok(r)
}

pub fn gradcheck(
    cfg: &RunConfig,
    scope: SuiteScope,
    instances: usize,
) -> Result<Vec<SuiteEntry>, CliError> {
    let entries = run_suite(scope, instances, cfg.seed)?;
    let mut csv =
        String::from("operation,instances,checked,max_rel_err,kinks_redrawn,seconds,pass\n");
    for e in &entries {
        let _ = writeln!(
            csv,
            "{},{},{},{:e},{},{:.2},{}",
            e.name,
            e.instances,
            e.checked,
            e.max_rel_err,
            e.kinks,
            e.seconds,
            e.passes()
        );
    }
    print!("{csv}");
    write_text(&cfg.out.join("gradcheck.csv"), &csv)?;
    let failed: Vec<&str> = entries
        .iter()
        .filter(|e| !e.passes())
        .map(|e| e.name.as_str())
        .collect();
    if !failed.is_empty() {
        return Err(CliError::Failed(format!(
            "gradient check above {SUITE_TOLERANCE:e}: {}",
            failed.join(", ")
        )));
    }
    Ok(entries)
}
