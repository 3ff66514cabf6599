//! `wvae`: data generation, training, whitening, scoring and traversal
//! figures for small VAEs.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime failures.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::UsageError;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser, Debug)]
#[command(name = "wvae", version, about = "Whitened VAE experiments on a procedural shapes corpus")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// `key=value` file; explicit flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

/// Where images come from. Without `--idx-images` the procedural shapes
/// corpus is enumerated.
#[derive(Args, Debug, Clone, Default)]
pub struct DataArgs {
    /// Shapes canvas side in pixels.
    #[arg(long)]
    pub canvas: Option<usize>,
    /// Factor counts: shape,scale,orientation,pos_x,pos_y.
    #[arg(long, value_delimiter = ',')]
    pub counts: Option<Vec<usize>>,
    /// IDX image file (e.g. MNIST) used instead of the shapes corpus.
    #[arg(long)]
    pub idx_images: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the shapes corpus to images.idx and labels.csv.
    GenData(GenDataArgs),
    /// Train a model; writes checkpoint.bin and curves.csv.
    Train(TrainArgs),
    /// Fit the whitening transform; writes transform.bin and spectrum.csv.
    Whiten(WhitenArgs),
    /// Disentanglement score of the raw and (optionally) whitened codes.
    Score(ScoreArgs),
    /// Latent traversal grid as a PGM image.
    Traverse(TraverseArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// vae, beta_vae or factor_vae.
    #[arg(long)]
    pub objective: Option<String>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    /// Hidden widths, comma separated; the decoder mirrors them.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub disc_learning_rate: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub disc_hidden: Option<Vec<usize>>,
}

#[derive(Args, Debug)]
pub struct WhitenArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    /// Posterior mean.
    Mean,
    /// One reparameterised sample per image.
    Sampled,
    /// Ground-truth factors as codes; needs no checkpoint.
    Oracle,
}

impl std::fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EncoderKind::Mean => "mean",
            EncoderKind::Sampled => "sampled",
            EncoderKind::Oracle => "oracle",
        })
    }
}

impl std::str::FromStr for EncoderKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        <Self as ValueEnum>::from_str(s, true)
    }
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Also score whitened codes.
    #[arg(long)]
    pub transform: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub encoder: Option<EncoderKind>,
    #[arg(long)]
    pub samples_per_vote: Option<usize>,
    #[arg(long)]
    pub train_votes: Option<usize>,
    #[arg(long)]
    pub test_votes: Option<usize>,
    #[arg(long)]
    pub collapse_threshold: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TraverseArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Traverse whitened coordinates.
    #[arg(long)]
    pub transform: Option<PathBuf>,
    /// Image whose encoding is the base code and the left column.
    #[arg(long)]
    pub image_index: Option<usize>,
    /// Dimensions to vary, one row each (default: all).
    #[arg(long, value_delimiter = ',')]
    pub dims: Option<Vec<usize>>,
    /// Sweep range `lo,hi`.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub range: Option<Vec<f64>>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Also write a reconstruction panel of this many images.
    #[arg(long)]
    pub panel: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
