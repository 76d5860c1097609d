use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use camnorm::network::NormKind;
use camnorm::training::{IncrementalMode, Supervision};
use camnorm_cli::commands::{
    cmd_eval, cmd_gen, cmd_incremental, cmd_sweep_nbatches, cmd_train, AdaptMode, EvalOpts,
    GenOpts, IncrementalOpts, SweepOpts, TrainOpts,
};
use camnorm_cli::exit_code;

#[derive(Parser)]
#[command(
    name = "camnorm",
    version,
    about = "Camera-conditioned normalization lab: synthetic data, training, adaptation, retrieval metrics"
)]
struct Cli {
    #[command(subcommand)]
    command: Commands,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum NormArg {
    Bn,
    Cbn,
}

impl From<NormArg> for NormKind {
    fn from(v: NormArg) -> Self {
        match v {
            NormArg::Bn => NormKind::Bn,
            NormArg::Cbn => NormKind::Cbn,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SupervisionArg {
    Full,
    Weak,
}

impl From<SupervisionArg> for Supervision {
    fn from(v: SupervisionArg) -> Self {
        match v {
            SupervisionArg::Full => Supervision::Full,
            SupervisionArg::Weak => Supervision::Weak,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AdaptArg {
    Cbn,
    Adabn,
    None,
}

impl From<AdaptArg> for AdaptMode {
    fn from(v: AdaptArg) -> Self {
        match v {
            AdaptArg::Cbn => AdaptMode::Cbn,
            AdaptArg::Adabn => AdaptMode::Adabn,
            AdaptArg::None => AdaptMode::None,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Datafree,
    Replay,
}

impl From<ModeArg> for IncrementalMode {
    fn from(v: ModeArg) -> Self {
        match v {
            ModeArg::Datafree => IncrementalMode::DataFree,
            ModeArg::Replay => IncrementalMode::Replay,
        }
    }
}

#[derive(Subcommand)]
enum Commands {
    /// Generate and save a synthetic multi-camera dataset
    Gen {
        /// Built-in dataset preset (default, direct-transfer, incremental-a, incremental-b)
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Override the dataset name
        #[arg(long)]
        name: Option<String>,
        /// Overwrite a non-empty output directory
        #[arg(long)]
        force: bool,
    },
    /// Train a model; writes checkpoint, run log, and resolved config
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Use one statistics kind for every normalization layer
        #[arg(long, value_enum)]
        norm: Option<NormArg>,
        /// Per-layer kinds, e.g. 1,0,0 (1 = camera-based, 0 = conventional)
        #[arg(long)]
        norm_mask: Option<String>,
        #[arg(long, value_enum)]
        supervision: Option<SupervisionArg>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Estimate statistics on the target split, inject, extract, evaluate
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = AdaptArg::Cbn)]
        adapt: AdaptArg,
        /// Estimation mini-batches per camera
        #[arg(long)]
        nbatches: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Repeat estimation+eval per batch count; emit a mean/variance table
    SweepNbatches {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        repeats: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train over a dataset sequence and report retention on the first
    Incremental {
        /// Dataset directories in sequence order (comma-separated)
        #[arg(long, value_delimiter = ',', required = true)]
        data: Vec<PathBuf>,
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        norm: Option<NormArg>,
        /// Skip the classifier warm-up before each fine-tuning stage
        #[arg(long)]
        no_warmup: bool,
    },
}

fn run(cli: Cli) -> camnorm::Result<()> {
    match cli.command {
        Commands::Gen {
            preset,
            config,
            out,
            seed,
            name,
            force,
        } => cmd_gen(&GenOpts {
            preset,
            config,
            out,
            seed,
            name,
            force,
        }),
        Commands::Train {
            data,
            out,
            config,
            seed,
            norm,
            norm_mask,
            supervision,
            epochs,
        } => cmd_train(&TrainOpts {
            data,
            out,
            config,
            seed,
            norm: norm.map(Into::into),
            norm_mask,
            supervision: supervision.map(Into::into),
            epochs,
        }),
        Commands::Eval {
            checkpoint,
            data,
            out,
            config,
            adapt,
            nbatches,
            batch_size,
            seed,
        } => cmd_eval(&EvalOpts {
            checkpoint,
            data,
            out,
            config,
            adapt: adapt.into(),
            nbatches,
            batch_size,
            seed,
        })
        .map(|report| {
            println!(
                "rank1={} rank5={} rank10={} mAP={} queries={} excluded={}",
                report.rank1,
                report.rank5,
                report.rank10,
                report.map,
                report.n_queries,
                report.excluded_queries
            );
        }),
        Commands::SweepNbatches {
            checkpoint,
            data,
            out,
            config,
            repeats,
            seed,
        } => cmd_sweep_nbatches(&SweepOpts {
            checkpoint,
            data,
            out,
            config,
            repeats,
            seed,
        })
        .map(|rows| {
            for row in rows {
                println!(
                    "n_batches={} mean_map={} var_map={}",
                    row.n_batches, row.mean_map, row.var_map
                );
            }
        }),
        Commands::Incremental {
            data,
            mode,
            out,
            config,
            seed,
            norm,
            no_warmup,
        } => cmd_incremental(&IncrementalOpts {
            data,
            mode: mode.into(),
            out,
            config,
            seed,
            norm: norm.map(Into::into),
            no_warmup,
        })
        .map(|report| {
            for stage in &report.stages {
                println!(
                    "stage={} rank1={} mAP={} retention_rank1={} retention_map={}",
                    stage.trained_on,
                    stage.rank1,
                    stage.map,
                    stage.retention_rank1,
                    stage.retention_map
                );
            }
        }),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err) as u8)
        }
    }
}
