//! `jointwatch`: synthesize, preprocess, train, evaluate and plot timelines.

mod cache;
mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use jointwatch::trainer::TrainMode;
use jointwatch::{Error, ErrorKind, Result};

use commands::EvalInput;
use config::{Overrides, RunConfigFile};

#[derive(Parser)]
#[command(name = "jointwatch", version, about = "Joint-centric seizure detection from video")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory of this command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    runs: Option<usize>,
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    /// Segment stride in seconds (timeline stride for `timeline`).
    #[arg(long = "stride-s", global = true)]
    stride_s: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Frozen,
    Lora,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Segment, label, split and crop a dataset.
    Preprocess {
        #[command(flatten)]
        common: Common,
        /// Dataset directory.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train and test on the preprocessed split.
    Train {
        #[command(flatten)]
        common: Common,
        /// Preprocessed directory.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Metrics for a scored-segment file, or for a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
        scores: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Preprocessed directory, for `--checkpoint`.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Window scores over one video, aligned to clinical onset.
    Timeline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        video: String,
        /// Dataset directory.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn overrides(c: &Common) -> Overrides {
    Overrides {
        seed: c.seed,
        runs: c.runs,
        mode: c.mode.map(|m| match m {
            ModeArg::Frozen => TrainMode::Frozen,
            ModeArg::Lora => TrainMode::Lora,
        }),
        stride_s: c.stride_s,
        ..Overrides::default()
    }
}

fn load(c: &Common, o: Overrides, timeline: bool) -> Result<RunConfigFile> {
    RunConfigFile::load(c.config.as_deref())?.resolve(&o, timeline)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common } => {
            let cfg = load(&common, Overrides { data: common.out.clone(), ..overrides(&common) }, false)?;
            let digest = commands::synth(&cfg)?;
            println!("{digest}");
        }
        Command::Preprocess { common, data } => {
            let o = Overrides {
                data,
                preprocessed: common.out.clone(),
                ..overrides(&common)
            };
            let cfg = load(&common, o, false)?;
            let m = commands::preprocess(&cfg)?;
            println!(
                "{} segments: {} interictal, {} ictal, {} excluded",
                m.segments.len(),
                m.totals.interictal,
                m.totals.ictal,
                m.totals.excluded
            );
        }
        Command::Train { common, input } => {
            let o = Overrides {
                preprocessed: input,
                out: common.out.clone(),
                ..overrides(&common)
            };
            let cfg = load(&common, o, false)?;
            let r = commands::train(&cfg)?;
            let a = &r.experiment.aggregate;
            println!(
                "auroc {:.4} ± {:.4}, auprc {:.4} ± {:.4} over {} run(s)",
                a.auroc.mean, a.auroc.std, a.auprc.mean, a.auprc.std, a.runs
            );
        }
        Command::Eval {
            common,
            scores,
            checkpoint,
            input,
        } => {
            let o = Overrides {
                preprocessed: input,
                ..overrides(&common)
            };
            let cfg = load(&common, o, false)?;
            let out = common.out.clone().unwrap_or_else(|| cfg.paths.out.join("eval"));
            let source = match (scores, checkpoint) {
                (Some(s), _) => EvalInput::Scores(s),
                (None, Some(c)) => EvalInput::Checkpoint(c),
                (None, None) => return Err(Error::Config("eval needs --scores or --checkpoint".into())),
            };
            let r = commands::eval(&cfg, &source, &out)?;
            let m = &r.metrics;
            let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
            println!(
                "{} segments: accuracy {:.4}, auroc {}, auprc {}, f1 {:.4}",
                r.segments,
                m.accuracy,
                opt(m.auroc),
                opt(m.auprc),
                m.f1
            );
        }
        Command::Timeline {
            common,
            checkpoint,
            video,
            data,
        } => {
            let cfg = load(&common, Overrides { data, ..overrides(&common) }, true)?;
            let out = common
                .out
                .clone()
                .unwrap_or_else(|| cfg.paths.out.join("timeline").join(&video));
            let tl = commands::timeline_cmd(&cfg, &checkpoint, &video, &out)?;
            println!("{} windows written to {}", tl.points.len(), out.display());
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Usage => 1,
        ErrorKind::Data => 2,
        ErrorKind::Training => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
