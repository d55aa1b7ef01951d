mod commands;
mod config;
mod stage;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use randgan::data::Label;
use randgan::gan::Variant;

use crate::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "randgan",
    version,
    about = "Semi-supervised anomaly detection pipeline for chest X-rays"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
pub struct Common {
    /// JSON run configuration; omitted sections use defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed of every stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for latent inversion.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic three-class cohort with ground-truth lung masks.
    Synth,
    /// Grayscale, resize, normalise and optionally mask every manifest image.
    Preprocess {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory of mask PNGs named like the images.
        #[arg(long)]
        masks: Option<PathBuf>,
    },
    /// Train or apply the lung segmentation network.
    #[command(subcommand)]
    Segment(SegmentCommand),
    /// Train one GAN on the train split of a single known class.
    GanTrain {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        label: Label,
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Anomaly-score every test image under one trained model.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Model tag written to the score file; defaults to `<variant>-<label>`.
        #[arg(long)]
        tag: Option<String>,
    },
    /// Fuse two score files and run the resampling evaluation.
    Evaluate {
        /// Scores of the first known-class model.
        #[arg(long)]
        scores_a: PathBuf,
        /// Scores of the second known-class model.
        #[arg(long)]
        scores_b: PathBuf,
    },
    /// Render one or more `fpr,tpr,threshold` files as a PNG chart.
    Plot {
        #[arg(long, required = true, num_args = 1..)]
        roc: Vec<PathBuf>,
        #[arg(long, default_value_t = 480)]
        size: u32,
    },
}

#[derive(Subcommand)]
enum SegmentCommand {
    /// Train on the train split; with `--init`, fine-tune with a frozen prefix.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Predict and clean up a mask for every manifest image.
    Apply {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
}

fn resolve(common: &Common) -> anyhow::Result<(RunConfig, PathBuf)> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    let seed = common.seed.unwrap_or(cfg.seed);
    cfg = cfg.with_seed(seed);
    if let Some(t) = common.threads {
        cfg.threads = t;
    }
    if let Some(o) = &common.out {
        cfg.out = Some(o.clone());
    }
    cfg.validate()?;
    let out = cfg
        .out
        .clone()
        .ok_or_else(|| anyhow::anyhow!("no output directory: pass --out or set `out`"))?;
    Ok((cfg, out))
}

fn run(cli: Cli) -> anyhow::Result<PathBuf> {
    let (cfg, out) = resolve(&cli.common)?;
    match cli.cmd {
        Command::Synth => commands::synth(&cfg, &out),
        Command::Preprocess { manifest, masks } => {
            commands::preprocess(&cfg, &out, &manifest, masks.as_deref())
        }
        Command::Segment(SegmentCommand::Train {
            manifest,
            masks,
            init,
        }) => commands::segment_train(&cfg, &out, &manifest, &masks, init.as_deref()),
        Command::Segment(SegmentCommand::Apply {
            checkpoint,
            manifest,
        }) => commands::segment_apply(&cfg, &out, &checkpoint, &manifest),
        Command::GanTrain {
            manifest,
            label,
            variant,
        } => commands::gan_train(&cfg, &out, &manifest, label, variant),
        Command::Score {
            checkpoint,
            manifest,
            tag,
        } => commands::score(&cfg, &out, &checkpoint, &manifest, tag),
        Command::Evaluate { scores_a, scores_b } => {
            commands::evaluate(&cfg, &out, &scores_a, &scores_b)
        }
        Command::Plot { roc, size } => commands::plot(&cfg, &out, &roc, size),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(out) => {
            eprintln!("wrote {}", out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
