use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ghost_stereo::train::Phase;
use ghost_stereo::{ModelConfig, Preset};

#[derive(Debug, Parser)]
#[command(
    name = "ghost-stereo",
    version,
    about = "Train, evaluate, run and analyze the Ghost-Stereo network"
)]
pub struct Cli {
    /// Log filter used when RUST_LOG is unset.
    #[arg(long, global = true, default_value = "info")]
    pub log_level: String,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoints and metric logs.
    Train(TrainArgs),
    /// Score a checkpoint on a labelled dataset.
    Eval(EvalArgs),
    /// Predict a disparity map for one stereo pair.
    Infer(InferArgs),
    /// Parameter and MAC counts of a configuration and its dense twin.
    Analyze(AnalyzeArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    Desk,
    Paper,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PhaseArg {
    Pretrain,
    Finetune,
}

impl From<PhaseArg> for Phase {
    fn from(p: PhaseArg) -> Self {
        match p {
            PhaseArg::Pretrain => Phase::Pretrain,
            PhaseArg::Finetune => Phase::Finetune,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DatasetArg {
    Sceneflow,
    Kitti,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Text,
    Json,
}

/// Model configuration: a JSON file or a preset, then flag overrides.
#[derive(Clone, Debug, Args)]
pub struct ModelArgs {
    /// JSON model configuration; replaces the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = PresetArg::Desk)]
    pub preset: PresetArg,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Skip the context attention and post layers of the cost volume.
    #[arg(long)]
    pub no_cve: bool,
    /// Dense 3D convolutions instead of Ghost bottlenecks in the hourglass.
    #[arg(long)]
    pub no_cva: bool,
    #[arg(long)]
    pub no_se: bool,
    /// Full-resolution disparity range (multiple of 32).
    #[arg(long)]
    pub max_disp: Option<usize>,
    /// Correlation groups; also sets the first hourglass width.
    #[arg(long)]
    pub groups: Option<usize>,
    #[arg(long)]
    pub topk: Option<usize>,
}

impl ModelArgs {
    pub fn resolve(&self) -> Result<ModelConfig> {
        let mut cfg = match &self.config {
            Some(path) => ModelConfig::load(path).with_context(|| format!("cannot load config {}", path.display()))?,
            None => ModelConfig::preset(match self.preset {
                PresetArg::Desk => Preset::Desk,
                PresetArg::Paper => Preset::Paper,
            }),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if self.no_cve {
            cfg.use_cve = false;
        }
        if self.no_cva {
            cfg.use_cva = false;
        }
        if self.no_se {
            cfg.use_se = false;
        }
        if let Some(d) = self.max_disp {
            cfg.max_disparity = d;
        }
        if let Some(g) = self.groups {
            cfg.num_groups = g;
            cfg.aggregation_channels[0] = g;
        }
        if let Some(k) = self.topk {
            cfg.topk = k;
        }
        cfg.validate().context("invalid model configuration")?;
        Ok(cfg)
    }
}

/// Where samples come from.
#[derive(Clone, Debug, Args)]
pub struct DataArgs {
    /// Random-dot pairs generated from the seed instead of files.
    #[arg(long, conflicts_with = "dataset")]
    pub synthetic: bool,
    /// Synthetic image size as HxW.
    #[arg(long, value_parser = parse_size, default_value = "64x96")]
    pub synthetic_size: (usize, usize),
    #[arg(long, default_value_t = 2)]
    pub synthetic_pairs: usize,
    #[arg(long, value_enum)]
    pub dataset: Option<DatasetArg>,
    #[arg(long, env = "GHOSTSTEREO_DATA_ROOT")]
    pub data_root: Option<PathBuf>,
    /// SceneFlow split.
    #[arg(long, value_enum, default_value_t = SplitArg::Train)]
    pub split: SplitArg,
    /// Use at most this many pairs (in sorted order).
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Optimizer steps per round.
    #[arg(long, default_value_t = 500)]
    pub steps: u64,
    /// Repeat the learning-rate schedule this many times.
    #[arg(long, default_value_t = 1)]
    pub rounds: u32,
    #[arg(long, default_value_t = 2)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 25)]
    pub steps_per_epoch: u64,
    #[arg(long, value_enum, default_value_t = PhaseArg::Pretrain)]
    pub phase: PhaseArg,
    /// Random training crop as HxW; defaults to 256x512 for file datasets
    /// and to the full image for synthetic data.
    #[arg(long, value_parser = parse_size)]
    pub crop: Option<(usize, usize)>,
    /// Continue from a checkpoint; its configuration replaces the model flags.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Single-worker execution (the only mode; recorded in the manifest).
    #[arg(long)]
    pub deterministic: bool,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Seed for synthetic data; defaults to the checkpoint's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = OutputFormat::Text)]
    pub format: OutputFormat,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub left: PathBuf,
    #[arg(long)]
    pub right: PathBuf,
    /// Accepted for uniformity; inference is deterministic.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Skip the colour-coded PNG.
    #[arg(long)]
    pub no_viz: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 256)]
    pub height: usize,
    #[arg(long, default_value_t = 512)]
    pub width: usize,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    #[arg(long, value_enum, default_value_t = OutputFormat::Text)]
    pub format: OutputFormat,
    /// Also write text, JSON and a manifest here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn parse_size(s: &str) -> Result<(usize, usize)> {
    let Some((h, w)) = s.split_once(['x', 'X']) else {
        bail!("expected HxW, got {s:?}");
    };
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .with_context(|| format!("bad size component {v:?}"))
    };
    let (h, w) = (parse(h)?, parse(w)?);
    if h == 0 || w == 0 {
        bail!("size must be positive, got {s:?}");
    }
    Ok((h, w))
}
