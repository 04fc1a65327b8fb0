//! Argument definitions. Commands are also serialized into manifests so a
//! run can be replayed.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "immunofuse", version, about = "Multimodal fusion classifier for vaccine response prediction")]
pub struct Cli {
    /// JSON run configuration. Missing fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Repeat for more logging.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Build feature tables, labels and a split from raw timepoint tables.
    Prepare(PrepareArgs),
    /// Write a synthetic dataset in the ingestion format.
    Synth(SynthArgs),
    /// Train on the train fold with early stopping on val.
    Train(TrainArgs),
    /// Test-set AUROC with bootstrap intervals for a checkpoint.
    Evaluate(CheckpointArgs),
    /// Bootstrap intervals with explicit resample count and seed.
    Bootstrap(BootstrapArgs),
    /// Label-permutation test with full retraining.
    Permute(PermuteArgs),
    /// Retrain the five ablation cells.
    Ablate(AblateArgs),
    /// Leave-one-out and keep-one-out masking on complete-case test subjects.
    LooKoo(CheckpointArgs),
    /// Missingness degradation sweep.
    Degrade(DegradeArgs),
    /// Logistic regression and tabular MLP baselines.
    Baselines(BaselinesArgs),
    /// Re-run a recorded command and compare output digests.
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Prepare(_) => "prepare",
            Command::Synth(_) => "synth",
            Command::Train(_) => "train",
            Command::Evaluate(_) => "evaluate",
            Command::Bootstrap(_) => "bootstrap",
            Command::Permute(_) => "permute",
            Command::Ablate(_) => "ablate",
            Command::LooKoo(_) => "loo-koo",
            Command::Degrade(_) => "degrade",
            Command::Baselines(_) => "baselines",
            Command::Replay(_) => "replay",
        }
    }

    pub fn out_dir(&self) -> Option<&PathBuf> {
        match self {
            Command::Prepare(a) => Some(&a.out),
            Command::Synth(a) => Some(&a.out),
            Command::Train(a) => Some(&a.out),
            Command::Evaluate(a) | Command::LooKoo(a) => Some(&a.out),
            Command::Bootstrap(a) => Some(&a.run.out),
            Command::Permute(a) => Some(&a.out),
            Command::Ablate(a) => Some(&a.out),
            Command::Degrade(a) => Some(&a.run.out),
            Command::Baselines(a) => Some(&a.out),
            Command::Replay(_) => None,
        }
    }

    pub fn set_out_dir(&mut self, out: PathBuf) {
        match self {
            Command::Prepare(a) => a.out = out,
            Command::Synth(a) => a.out = out,
            Command::Train(a) => a.out = out,
            Command::Evaluate(a) | Command::LooKoo(a) => a.out = out,
            Command::Bootstrap(a) => a.run.out = out,
            Command::Permute(a) => a.out = out,
            Command::Ablate(a) => a.out = out,
            Command::Degrade(a) => a.run.out = out,
            Command::Baselines(a) => a.out = out,
            Command::Replay(_) => {}
        }
    }

    /// Input paths made absolute so a manifest can be replayed elsewhere.
    pub fn absolutize(&mut self) -> std::io::Result<()> {
        let abs = |p: &mut PathBuf| -> std::io::Result<()> {
            *p = std::path::absolute(&*p)?;
            Ok(())
        };
        match self {
            Command::Prepare(a) => abs(&mut a.raw),
            Command::Synth(_) => Ok(()),
            Command::Train(a) => abs(&mut a.data),
            Command::Evaluate(a) | Command::LooKoo(a) => {
                abs(&mut a.data)?;
                abs(&mut a.checkpoint)
            }
            Command::Bootstrap(a) => {
                abs(&mut a.run.data)?;
                abs(&mut a.run.checkpoint)
            }
            Command::Permute(a) => abs(&mut a.data),
            Command::Ablate(a) => abs(&mut a.data),
            Command::Degrade(a) => {
                abs(&mut a.run.data)?;
                abs(&mut a.run.checkpoint)
            }
            Command::Baselines(a) => abs(&mut a.data),
            Command::Replay(a) => abs(&mut a.manifest),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct PrepareArgs {
    /// Directory of `<modality>_d<day>.csv` tables plus `subjects.csv`.
    #[arg(long)]
    pub raw: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Write outputs even when the leakage audit fails.
    #[arg(long)]
    pub allow_audit_failure: bool,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// Four comma-separated rates: antibody, cell, cytokine, gene.
    #[arg(long, value_delimiter = ',')]
    pub missing_rates: Option<Vec<f64>>,
    #[arg(long)]
    pub signal: Option<f64>,
    #[arg(long)]
    pub noise_sd: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Dataset directory (embeddings/, subjects.csv, labels.csv, split.csv).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct CheckpointArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct BootstrapArgs {
    #[command(flatten)]
    pub run: CheckpointArgs,
    #[arg(long)]
    pub resamples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct PermuteArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of permutations.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub base_seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct DegradeArgs {
    #[command(flatten)]
    pub run: CheckpointArgs,
    #[arg(long, value_delimiter = ',')]
    pub rhos: Option<Vec<f64>>,
    #[arg(long)]
    pub mask_seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct BaselinesArgs {
    /// Dataset directory. Embeddings and prepared feature tables are each
    /// used when present.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Fresh output directory for the re-run.
    #[arg(long)]
    pub out: PathBuf,
}
