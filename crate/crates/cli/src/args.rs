//! Command-line grammar.
//!
//! Flags that mirror run-config keys carry the library defaults so `--help`
//! shows them, but they only override the config file when given
//! explicitly (see [`Given`]).

use std::path::PathBuf;
use std::str::FromStr;

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, Parser, Subcommand};
use slicesr::model::Variant;

#[derive(Debug, Parser)]
#[command(
    name = "slicesr",
    version,
    about = "Through-plane super-resolution for thick-slice CT volumes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic thin/thick volume pair.
    GenPhantom(GenPhantomArgs),
    /// Write slab-mean downsampled copies of a thin volume.
    MakePseudoLr(PseudoLrArgs),
    /// Train a model on thin/thick pairs.
    Train(TrainArgs),
    /// Super-resolve a thick volume with a trained checkpoint.
    Infer(InferArgs),
    /// Score super-resolved volumes against their thin references.
    Eval(EvalArgs),
    /// Compare thick slices with thin slices at growing distances.
    SliceSim(SliceSimArgs),
}

#[derive(Debug, Args)]
pub struct GenPhantomArgs {
    /// Run configuration (TOML); the `[phantom]` table is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Thin-volume extents D,H,W.
    #[arg(long, value_parser = parse_triple::<usize>, default_value = "40,64,64")]
    pub dims: [usize; 3],
    /// Thin-volume spacing in mm, depth first.
    #[arg(long, value_parser = parse_triple::<f64>, default_value = "1,0.75,0.75")]
    pub spacing: [f64; 3],
    /// Thin slices averaged into one thick slice.
    #[arg(long, default_value_t = 4)]
    pub thick_factor: usize,
    /// Standard deviation of the additive noise, in HU.
    #[arg(long, default_value_t = 8.0)]
    pub noise_sigma: f64,
    /// Output directory.
    #[arg(short, long, default_value = ".")]
    pub out: PathBuf,
    /// Writes `<stem>.thin.vsrv` and `<stem>.thick.vsrv`.
    #[arg(long, default_value = "phantom")]
    pub stem: String,
}

#[derive(Debug, Args)]
pub struct PseudoLrArgs {
    /// Thin volume to downsample.
    pub input: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Thickest admissible pseudo slice, in mm.
    #[arg(long, default_value_t = 3.0)]
    pub max_thickness: f64,
    /// Fewest admissible pseudo slices.
    #[arg(long, default_value_t = 130)]
    pub min_slices: usize,
    /// Output directory; files are named `<id>.pseudo-k<k>.vsrv`.
    #[arg(short, long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long, default_value = "full", value_parser = Variant::from_str)]
    pub variant: Variant,
    #[arg(long, default_value_t = 32)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 4)]
    pub encoder_depth: usize,
    #[arg(long, default_value_t = 2)]
    pub n_fim: usize,
    /// Attention window side.
    #[arg(long, default_value_t = 8)]
    pub window: usize,
    /// Depth upsampling factor.
    #[arg(short = 'r', long = "scale", default_value_t = 4)]
    pub r: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory of `<id>.thin.vsrv` / `<id>.thick.vsrv` pairs.
    #[arg(long, required_unless_present = "manifest")]
    pub data: Option<PathBuf>,
    /// Pair manifest (TOML `[[pair]]` entries) instead of `--data`.
    #[arg(long, conflicts_with = "data")]
    pub manifest: Option<PathBuf>,
    /// Directory of thin volumes used as pseudo pairs (every `*.vsrv`).
    #[arg(long)]
    pub pseudo: Option<PathBuf>,
    /// Directory of held-out pairs for validation loss.
    #[arg(long)]
    pub validation: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from a checkpoint; model and training settings come from it.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Run directory for checkpoints and loss traces.
    #[arg(short, long, default_value = "run")]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 500)]
    pub steps: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub batch_size: usize,
    /// Low-resolution patch extent D,H,W.
    #[arg(long, value_parser = parse_triple::<usize>, default_value = "4,64,64")]
    pub patch: [usize; 3],
    /// Save `step-<n>.ckpt` every this many steps (0 = never).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_interval: u64,
    /// Compute validation loss every this many steps (0 = never).
    #[arg(long, default_value_t = 0)]
    pub validation_interval: u64,
    /// Steps on real pairs before pseudo pairs join in.
    #[arg(long, default_value_t = 0)]
    pub real_only_steps: u64,
    /// Share of pseudo pairs once mixing starts.
    #[arg(long, default_value_t = 0.5)]
    pub pseudo_fraction: f64,
    /// Disable random horizontal flips.
    #[arg(long)]
    pub no_flip: bool,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Thick volume to super-resolve.
    pub input: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output volume.
    #[arg(short, long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Thick slices per window.
    #[arg(long, default_value_t = 4)]
    pub window_depth: usize,
    /// Slices shared by consecutive windows.
    #[arg(long, default_value_t = 1)]
    pub overlap: usize,
    /// Expected upsampling factor; must match the checkpoint.
    #[arg(short = 'r', long = "scale")]
    pub r: Option<usize>,
    /// Worker threads for window evaluation.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Write HU instead of normalized intensities.
    #[arg(long)]
    pub hu: bool,
}

#[derive(Debug, Args)]
pub struct SsimArgs {
    /// Shrink the SSIM window to fit small slices instead of failing.
    #[arg(long)]
    pub reduce_window: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of `<id>.sr.vsrv` predictions.
    #[arg(long, required_unless_present = "manifest")]
    pub sr: Option<PathBuf>,
    /// Directory of `<id>.thin.vsrv` references (default: the `--sr` directory).
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Pair manifest with `sr` and `thin` (and `thick`) entries.
    #[arg(long, conflicts_with_all = ["sr", "reference"])]
    pub manifest: Option<PathBuf>,
    /// Also score cubic interpolation of `<id>.thick.vsrv`.
    #[arg(long)]
    pub with_baseline: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub ssim: SsimArgs,
    /// JSON-lines report.
    #[arg(short, long, default_value = "eval.jsonl")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SliceSimArgs {
    /// Directory of thin/thick pairs.
    #[arg(long, required_unless_present = "manifest")]
    pub data: Option<PathBuf>,
    #[arg(long, conflicts_with = "data")]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub ssim: SsimArgs,
    /// JSON-lines report.
    #[arg(short, long, default_value = "slice-sim.jsonl")]
    pub out: PathBuf,
}

/// Parses `a,b,c`.
pub fn parse_triple<T: FromStr>(s: &str) -> Result<[T; 3], String>
where
    T::Err: std::fmt::Display,
{
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [a, b, c] = parts.as_slice() else {
        return Err(format!("expected three comma-separated values, got {s:?}"));
    };
    let p = |x: &str| x.parse::<T>().map_err(|e| format!("{x:?}: {e}"));
    Ok([p(a)?, p(b)?, p(c)?])
}

/// Which flags of a subcommand were typed on the command line.
pub struct Given<'a>(pub &'a ArgMatches);

impl Given<'_> {
    pub fn has(&self, id: &str) -> bool {
        self.0.value_source(id) == Some(ValueSource::CommandLine)
    }

    /// Copies `value` into `target` when flag `id` was given.
    pub fn set<T: Clone>(&self, id: &str, target: &mut T, value: &T) {
        if self.has(id) {
            *target = value.clone();
        }
    }
}
