//! `hlfd`: synthetic data, teacher training, distillation, evaluation,
//! the β/λ sweep, gradient checks and Grad-CAM probes.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "hlfd", version, about = "Layer-selective feedback distillation for binary segmentation")]
pub struct Cli {
    /// key=value configuration file; missing keys keep their defaults
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Runs with this single seed; for `synth`, the data seed
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Print per-epoch losses to standard error
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Test,
    All,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Generate the synthetic dataset as <out>/dataset.segv
    Synth,
    /// Pretrain the teacher with deep supervision
    TrainTeacher {
        /// SEGV1 dataset (default <out>/dataset.segv)
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train a student against a frozen teacher
    Distill {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        teacher: PathBuf,
        /// hlfd, no_kd or late_only_ablation
        #[arg(long, default_value = "hlfd")]
        mode: String,
    },
    /// Score a checkpoint with DSC and RVD
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        /// Label for the summary row (default: teacher or student)
        #[arg(long)]
        label: Option<String>,
    },
    /// Distill with each (β, λ) of the sensitivity grid
    Sweep {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Finite-difference check of every op and loss
    Gradcheck,
    /// Early- and late-tap heatmaps with mask overlays
    Gradcam {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        /// Number of samples to render (0 = all)
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
    /// Teacher, every student mode over all seeds, and optionally the sweep
    Experiment {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Reuse this teacher instead of training one
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        sweep: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
