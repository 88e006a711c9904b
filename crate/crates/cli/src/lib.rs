//! `mvs` command-line driver.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use thiserror::Error;

pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unknown configuration key `{key}` (line {line})")]
    UnknownKey { key: String, line: usize },
    #[error(transparent)]
    Core(#[from] mvs_core::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    /// A check command ran to completion and reported failures.
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    /// 2 for configuration problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_)
            | CliError::UnknownKey { .. }
            | CliError::Core(mvs_core::Error::Config(_)) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "mvs",
    version,
    about = "Desk-scale transformer multi-view stereo"
)]
pub struct Cli {
    /// Sectioned key-value configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Overrides `run.out`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Print the effective configuration and exit.
    #[arg(long)]
    pub print_config: bool,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render synthetic scenes into `<out>/scene_NNN`.
    Synth {
        /// Overrides `scene.count`.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train on a dataset; writes `checkpoint.ckpt` and `loss.csv`.
    Train {
        data: PathBuf,
        /// Continue from this checkpoint, optimizer state included.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Per-stage depth and confidence maps for reference views of a scene.
    Infer {
        scene: PathBuf,
        /// Trained weights; without it the model keeps its seeded initialization.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Reference view (repeatable); default every view.
        #[arg(long = "view")]
        views: Vec<usize>,
    },
    /// Filter per-view depth maps and fuse them into a point cloud.
    Fuse {
        scene: PathBuf,
        /// Directory holding `infer` output.
        #[arg(long, conflicts_with = "gt", required_unless_present = "gt")]
        depths: Option<PathBuf>,
        /// Fuse the scene's ground-truth depths at full confidence instead.
        #[arg(long)]
        gt: bool,
    },
    /// Depth-map or point-cloud metrics as CSV.
    Eval {
        #[command(subcommand)]
        target: EvalTarget,
    },
    /// Time linear against softmax attention over sequence lengths.
    BenchAttention {
        /// Comma-separated lengths; overrides `bench.lengths`.
        #[arg(long, value_delimiter = ',')]
        lengths: Option<Vec<usize>>,
        #[arg(long)]
        trials: Option<usize>,
        /// Fail unless the linear slope is below 1.2 and the softmax slope above 1.7.
        #[arg(long)]
        check: bool,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// ops, cascade or all.
        #[arg(long, default_value = "ops")]
        scope: String,
        /// Overrides `gradcheck.instances`.
        #[arg(long)]
        instances: Option<usize>,
    },
}

#[derive(Debug, Subcommand)]
pub enum EvalTarget {
    /// EPE, e1 and e3 of predicted depth maps against scene ground truth.
    Depth {
        predictions: PathBuf,
        scene: PathBuf,
        /// Cascade stage (1 to 3) whose maps are scored.
        #[arg(long, default_value_t = 3)]
        stage: usize,
    },
    /// Accuracy, completeness and overall between two PLY clouds.
    Cloud {
        reconstruction: PathBuf,
        reference: PathBuf,
    },
}

/// Loads the configuration and applies flag overrides.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve_config(&cli)?;
    if cli.print_config {
        print!("{}", cfg.to_text());
        return Ok(());
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        // Fails only if a pool already exists, as in repeated in-process runs.
        if rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .is_err()
        {
            log::warn!("thread pool already initialized; --threads ignored");
        }
    }
    let Some(command) = cli.command else {
        return Err(CliError::Config("no command given (see --help)".into()));
    };
    std::fs::create_dir_all(&cfg.out)?;
    match command {
        Command::Synth { count } => {
            commands::synth(&cfg, count.unwrap_or(cfg.scene_count)).map(|_| ())
        }
        Command::Train { data, resume } => {
            commands::train(&cfg, &data, resume.as_deref()).map(|_| ())
        }
        Command::Infer {
            scene,
            checkpoint,
            views,
        } => commands::infer(&cfg, &scene, checkpoint.as_deref(), &views).map(|_| ()),
        Command::Fuse { scene, depths, gt } => {
            let source = if gt {
                commands::DepthSource::GroundTruth
            } else {
                commands::DepthSource::Directory(depths.expect("clap enforces --depths or --gt"))
            };
            commands::fuse(&cfg, &scene, &source).map(|_| ())
        }
        Command::Eval { target } => match target {
            EvalTarget::Depth {
                predictions,
                scene,
                stage,
            } => commands::eval_depth(&cfg, &predictions, &scene, stage).map(|_| ()),
            EvalTarget::Cloud {
                reconstruction,
                reference,
            } => commands::eval_cloud(&cfg, &reconstruction, &reference).map(|_| ()),
        },
        Command::BenchAttention {
            lengths,
            trials,
            check,
        } => {
            let mut b = cfg.bench.clone();
            if let Some(l) = lengths {
                b.lengths = l;
            }
            if let Some(t) = trials {
                b.trials = t;
            }
            commands::bench_attention(&cfg, &b, check).map(|_| ())
        }
        Command::Gradcheck { scope, instances } => {
            let scope = scope.parse()?;
            commands::gradcheck(&cfg, scope, instances.unwrap_or(cfg.gradcheck_instances))
                .map(|_| ())
        }
    }
}
