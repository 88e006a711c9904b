//! Sectioned `key = value` run configuration.
//!
//! ```text
//! # comment
//! [scene]
//! height = 64
//! ```
//!
//! Every key has a default; `RunConfig::default().to_text()` lists them all.

use std::path::PathBuf;
use std::str::FromStr;

use mvs_core::depth::CascadeConfig;
use mvs_core::fmt::FmtConfig;
use mvs_core::fusion::{DepthLookup, FusionThresholds};
use mvs_core::geometry::SceneSpec;
use mvs_core::model::ModelConfig;
use mvs_core::training::{AdamConfig, LossConfig, TrainConfig};

use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub width: usize,
    pub heads: usize,
    pub trials: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            lengths: mvs_core::bench::DEFAULT_LENGTHS.to_vec(),
            width: 32,
            heads: 8,
            trials: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub scene: SceneSpec,
    /// Scenes written by `synth`.
    pub scene_count: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub fusion: FusionThresholds,
    /// Distance clamp for accuracy and completeness.
    pub eval_clamp: f64,
    pub bench: BenchConfig,
    pub gradcheck_instances: usize,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scene: SceneSpec {
                randomize_geometry: true,
                ..SceneSpec::default()
            },
            scene_count: 8,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            fusion: FusionThresholds::default(),
            eval_clamp: 1.0,
            bench: BenchConfig::default(),
            gradcheck_instances: 20,
            seed: 0,
            out: PathBuf::from("out"),
        }
    }
}

fn list<T: ToString>(v: &[T]) -> String {
    v.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(", ")
}

fn lookup_name(l: DepthLookup) -> &'static str {
    match l {
        DepthLookup::Bilinear => "bilinear",
        DepthLookup::Nearest => "nearest",
        DepthLookup::Consistent => "consistent",
    }
}

fn bad(key: &str, value: &str, why: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{key} = {value}: {why}"))
}

fn scalar<T: FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| bad(key, value, e))
}

fn flag(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(bad(key, value, "expected true or false")),
    }
}

fn vector<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, CliError>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| scalar(key, s))
        .collect()
}

fn array<T: FromStr + Copy, const N: usize>(key: &str, value: &str) -> Result<[T; N], CliError>
where
    T::Err: std::fmt::Display,
{
    let v: Vec<T> = vector(key, value)?;
    v.try_into()
        .map_err(|v: Vec<T>| bad(key, value, format!("expected {N} values, got {}", v.len())))
}

impl RunConfig {
    /// Every `(section, key, value)` in print order.
    pub fn entries(&self) -> Vec<(&'static str, &'static str, String)> {
        let s = &self.scene;
        let c: &CascadeConfig = &self.model.cascade;
        let f: &FmtConfig = &self.model.fmt;
        let o: &AdamConfig = &self.train.optimizer;
        let l: &LossConfig = &self.train.loss;
        let u = &self.fusion;
        let b = &self.bench;
        vec![
            ("run", "seed", self.seed.to_string()),
            ("run", "out", self.out.display().to_string()),
            ("scene", "count", self.scene_count.to_string()),
            ("scene", "height", s.height.to_string()),
            ("scene", "width", s.width.to_string()),
            ("scene", "focal", s.focal.to_string()),
            ("scene", "views", s.num_views.to_string()),
            ("scene", "baseline", s.baseline.to_string()),
            ("scene", "target_depth", s.target_depth.to_string()),
            ("scene", "sphere", s.sphere.is_some().to_string()),
            ("scene", "ambient", s.ambient.to_string()),
            ("scene", "texture_scale", s.texture_scale.to_string()),
            ("scene", "supersample", s.supersample.to_string()),
            ("scene", "randomize", s.randomize_geometry.to_string()),
            ("scene", "d_min", s.d_min.to_string()),
            ("scene", "d_max", s.d_max.to_string()),
            ("cascade", "counts", list(&c.counts)),
            ("cascade", "decays", list(&c.decays)),
            ("model", "pathway", self.model.pathway.to_string()),
            (
                "model",
                "scale_correlation",
                self.model.scale_correlation.to_string(),
            ),
            ("fmt", "blocks", f.blocks.to_string()),
            ("fmt", "heads", f.heads.to_string()),
            ("fmt", "normalize", f.normalize.to_string()),
            ("fmt", "zero_init_output", f.zero_init_output.to_string()),
            ("loss", "gamma", l.gamma.to_string()),
            ("loss", "stage_weights", list(&l.stage_weights)),
            ("train", "steps", self.train.steps.to_string()),
            ("train", "batch_size", self.train.batch_size.to_string()),
            ("train", "lr", o.lr.to_string()),
            ("train", "beta1", o.beta1.to_string()),
            ("train", "beta2", o.beta2.to_string()),
            ("train", "eps", o.eps.to_string()),
            ("train", "decay_steps", list(&o.decay_steps)),
            ("train", "decay_factor", o.decay_factor.to_string()),
            ("fusion", "confidence", u.confidence.to_string()),
            ("fusion", "eta_pix", u.eta_pix.to_string()),
            ("fusion", "eta_rel", u.eta_rel.to_string()),
            ("fusion", "lookup", lookup_name(u.lookup).to_string()),
            ("eval", "clamp", self.eval_clamp.to_string()),
            ("bench", "lengths", list(&b.lengths)),
            ("bench", "width", b.width.to_string()),
            ("bench", "heads", b.heads.to_string()),
            ("bench", "trials", b.trials.to_string()),
            (
                "gradcheck",
                "instances",
                self.gradcheck_instances.to_string(),
            ),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (sec, key, value) in self.entries() {
            if sec != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{sec}]\n"));
                section = sec;
            }
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }

    /// Overrides the defaults with the entries of `text`.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        let known = cfg.entries();
        let mut section: Option<String> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = Some(name.trim().to_string());
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Config(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    n + 1
                )));
            };
            let (key, value) = (key.trim(), value.trim());
            let sec = section.as_deref().ok_or_else(|| {
                CliError::Config(format!(
                    "line {}: `{key}` appears before any [section]",
                    n + 1
                ))
            })?;
            if !known.iter().any(|(s, k, _)| *s == sec && *k == key) {
                return Err(CliError::UnknownKey {
                    key: format!("{sec}.{key}"),
                    line: n + 1,
                });
            }
            cfg.set(sec, key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, section: &str, key: &str, v: &str) -> Result<(), CliError> {
        let name = format!("{section}.{key}");
        let k = name.as_str();
        match (section, key) {
            ("run", "seed") => self.seed = scalar(k, v)?,
            ("run", "out") => self.out = PathBuf::from(v),
            ("scene", "count") => self.scene_count = scalar(k, v)?,
            ("scene", "height") => self.scene.height = scalar(k, v)?,
            ("scene", "width") => self.scene.width = scalar(k, v)?,
            ("scene", "focal") => self.scene.focal = scalar(k, v)?,
            ("scene", "views") => self.scene.num_views = scalar(k, v)?,
            ("scene", "baseline") => self.scene.baseline = scalar(k, v)?,
            ("scene", "target_depth") => self.scene.target_depth = scalar(k, v)?,
            ("scene", "sphere") => {
                if !flag(k, v)? {
                    self.scene.sphere = None;
                } else if self.scene.sphere.is_none() {
                    self.scene.sphere = SceneSpec::default().sphere;
                }
            }
            ("scene", "ambient") => self.scene.ambient = scalar(k, v)?,
            ("scene", "texture_scale") => self.scene.texture_scale = scalar(k, v)?,
            ("scene", "supersample") => self.scene.supersample = scalar(k, v)?,
            ("scene", "randomize") => self.scene.randomize_geometry = flag(k, v)?,
            ("scene", "d_min") => self.scene.d_min = scalar(k, v)?,
            ("scene", "d_max") => self.scene.d_max = scalar(k, v)?,
            ("cascade", "counts") => self.model.cascade.counts = array(k, v)?,
            ("cascade", "decays") => self.model.cascade.decays = array(k, v)?,
            ("model", "pathway") => self.model.pathway = flag(k, v)?,
            ("model", "scale_correlation") => self.model.scale_correlation = flag(k, v)?,
            ("fmt", "blocks") => self.model.fmt.blocks = scalar(k, v)?,
            ("fmt", "heads") => self.model.fmt.heads = scalar(k, v)?,
            ("fmt", "normalize") => self.model.fmt.normalize = flag(k, v)?,
            ("fmt", "zero_init_output") => self.model.fmt.zero_init_output = flag(k, v)?,
            ("loss", "gamma") => self.train.loss.gamma = scalar(k, v)?,
            ("loss", "stage_weights") => self.train.loss.stage_weights = array(k, v)?,
            ("train", "steps") => self.train.steps = scalar(k, v)?,
            ("train", "batch_size") => self.train.batch_size = scalar(k, v)?,
            ("train", "lr") => self.train.optimizer.lr = scalar(k, v)?,
            ("train", "beta1") => self.train.optimizer.beta1 = scalar(k, v)?,
            ("train", "beta2") => self.train.optimizer.beta2 = scalar(k, v)?,
            ("train", "eps") => self.train.optimizer.eps = scalar(k, v)?,
            ("train", "decay_steps") => self.train.optimizer.decay_steps = vector(k, v)?,
            ("train", "decay_factor") => self.train.optimizer.decay_factor = scalar(k, v)?,
            ("fusion", "confidence") => self.fusion.confidence = scalar(k, v)?,
            ("fusion", "eta_pix") => self.fusion.eta_pix = scalar(k, v)?,
            ("fusion", "eta_rel") => self.fusion.eta_rel = scalar(k, v)?,
            ("fusion", "lookup") => {
                self.fusion.lookup = match v {
                    "bilinear" => DepthLookup::Bilinear,
                    "nearest" => DepthLookup::Nearest,
                    "consistent" => DepthLookup::Consistent,
                    _ => return Err(bad(k, v, "expected bilinear, nearest or consistent")),
                }
            }
            ("eval", "clamp") => self.eval_clamp = scalar(k, v)?,
            ("bench", "lengths") => self.bench.lengths = vector(k, v)?,
            ("bench", "width") => self.bench.width = scalar(k, v)?,
            ("bench", "heads") => self.bench.heads = scalar(k, v)?,
            ("bench", "trials") => self.bench.trials = scalar(k, v)?,
            ("gradcheck", "instances") => self.gradcheck_instances = scalar(k, v)?,
            _ => {
                return Err(CliError::UnknownKey {
                    key: name.clone(),
                    line: 0,
                })
            }
        }
        Ok(())
    }

    /// Model configuration with the depth range taken from the scene.
    pub fn model_config(&self) -> ModelConfig {
        let mut m = self.model.clone();
        m.cascade.d_min = self.scene.d_min;
        m.cascade.d_max = self.scene.d_max;
        m
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.scene.validate()?;
        self.model_config().cascade.validate()?;
        self.train.validate()?;
        self.fusion.validate()?;
        let f = &self.model.fmt;
        if f.heads == 0 || f.blocks == 0 || 32 % f.heads != 0 {
            return Err(CliError::Config(format!(
                "fmt needs at least one block and heads dividing 32, got {} blocks and {} heads",
                f.blocks, f.heads
            )));
        }
        if self.scene_count == 0 {
            return Err(CliError::Config("scene.count must be positive".into()));
        }
        if !(self.eval_clamp > 0.0) {
            return Err(CliError::Config(format!(
                "eval.clamp must be positive, got {}",
                self.eval_clamp
            )));
        }
        let b = &self.bench;
        if b.lengths.len() < 2
            || b.lengths.contains(&0)
            || b.trials == 0
            || b.heads == 0
            || !b.width.is_multiple_of(b.heads)
        {
            return Err(CliError::Config(
                "bench needs two or more positive lengths, trials > 0 and heads dividing width"
                    .into(),
            ));
        }
        if self.gradcheck_instances == 0 {
            return Err(CliError::Config(
                "gradcheck.instances must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn printed_defaults_parse_back() {
        let d = RunConfig::default();
        assert_eq!(RunConfig::parse(&d.to_text()).unwrap(), d);
    }

    #[test]
    fn overrides_and_comments() {
        let c =
            RunConfig::parse("[cascade]\ncounts = 8, 4, 2 # coarse\n[fusion]\nlookup = bilinear\n")
                .unwrap();
        assert_eq!(c.model.cascade.counts, [8, 4, 2]);
        assert_eq!(c.fusion.lookup, DepthLookup::Bilinear);
    }

    #[test]
    fn unknown_key_names_the_key() {
        match RunConfig::parse("[train]\nlearning_rate = 1\n") {
            Err(CliError::UnknownKey { key, line }) => {
                assert_eq!((key.as_str(), line), ("train.learning_rate", 2))
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            RunConfig::parse("steps = 3\n"),
            Err(CliError::Config(_))
        ));
        assert!(matches!(
            RunConfig::parse("[loss]\nstage_weights = 1, 2\n"),
            Err(CliError::Config(_))
        ));
    }
}
