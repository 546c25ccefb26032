//! The `polyview` command-line front end. The binary is a thin wrapper
//! around [`main_with`].
//!
//! Exit codes: 0 success, 1 invalid input or configuration (including a
//! missing prerequisite artifact), 2 failure during computation.

mod config;
mod stages;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use polyview::dataset::Split;
use polyview::fusion::FusionSpec;
use polyview::View;

use crate::config::RunConfig;
use crate::stages::Ctx;

const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (", env!("POLYVIEW_GIT_DESCRIBE"), ")");

#[derive(Debug)]
pub enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<polyview::Error> for Failure {
    fn from(e: polyview::Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

impl From<polyview::autodiff::AutodiffError> for Failure {
    fn from(e: polyview::autodiff::AutodiffError) -> Self {
        Failure::Runtime(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "polyview", version = VERSION, about = "Multi-view audio embeddings with late fusion")]
struct Cli {
    /// JSON run configuration; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for per-view stages.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and its manifest.
    SynthData,
    /// Compute view features for every clip.
    Features {
        /// Comma-separated views (default: all).
        #[arg(long)]
        view: Option<String>,
    },
    /// Train one encoder per view.
    TrainEncoder {
        /// Comma-separated views (default: all).
        #[arg(long)]
        view: Option<String>,
        /// Continue from `last.pfck` when present.
        #[arg(long)]
        resume: bool,
    },
    /// Write frozen 64-dim embeddings per view.
    Embed {
        /// Comma-separated views (default: all).
        #[arg(long)]
        view: Option<String>,
    },
    /// Train a head on concatenated embeddings.
    TrainHead {
        /// Comma-separated views (default: `fusion.views` from the config).
        #[arg(long)]
        views: Option<String>,
    },
    /// Score a trained head and write metrics.
    Eval {
        /// Views of the head to score (default: `fusion.views`).
        #[arg(long)]
        views: Option<String>,
        /// train, val or test.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Finite-difference check of every primitive and the full encoder.
    Gradcheck {
        /// Encoder front ends to check (default: all).
        #[arg(long)]
        view: Option<String>,
        /// Denominator floor of the relative error (default 1e-8).
        #[arg(long)]
        floor: Option<f64>,
    },
    /// All stages in order.
    Pipeline,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::SynthData => "synth-data",
            Command::Features { .. } => "features",
            Command::TrainEncoder { .. } => "train-encoder",
            Command::Embed { .. } => "embed",
            Command::TrainHead { .. } => "train-head",
            Command::Eval { .. } => "eval",
            Command::Gradcheck { .. } => "gradcheck",
            Command::Pipeline => "pipeline",
        }
    }
}

fn views_or(arg: &Option<String>, default: &[View]) -> Result<Vec<View>, Failure> {
    match arg {
        Some(s) => View::parse_list(s).map_err(Failure::from),
        None => Ok(default.to_vec()),
    }
}

/// Writes the resolved config and version to the report directory.
fn echo(cfg: &RunConfig, command: &str) -> Result<(), Failure> {
    let dir = &cfg.paths.report_dir;
    let body = serde_json::json!({
        "version": VERSION,
        "command": command,
        "config": cfg.resolved(),
    });
    let path = dir.join("run_config.json");
    std::fs::create_dir_all(dir)
        .and_then(|_| std::fs::write(&path, serde_json::to_string_pretty(&body).expect("json") + "\n"))
        .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    eprintln!("polyview {VERSION}: {command}, resolved config in {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    if cli.jobs == 0 {
        return Err(Failure::Validation("--jobs must be at least 1".into()));
    }
    let cfg = RunConfig::load(cli.config.as_deref())?;
    let fusion = cfg.fusion.views.clone();
    let spec_of =
        |arg: &Option<String>| -> Result<FusionSpec, Failure> { Ok(FusionSpec::new(&views_or(arg, &fusion)?)?) };
    // Everything is validated before the echo, and the echo precedes compute.
    enum Job {
        Synth,
        Features(Vec<View>),
        Train(Vec<View>, bool),
        Embed(Vec<View>),
        Head(FusionSpec),
        Eval(FusionSpec, Split),
        Grad(Vec<View>, Option<f64>),
        Pipeline,
    }
    let job = match &cli.command {
        Command::SynthData => Job::Synth,
        Command::Features { view } => Job::Features(views_or(view, &View::ALL)?),
        Command::TrainEncoder { view, resume } => Job::Train(views_or(view, &View::ALL)?, *resume),
        Command::Embed { view } => Job::Embed(views_or(view, &View::ALL)?),
        Command::TrainHead { views } => Job::Head(spec_of(views)?),
        Command::Eval { views, split } => {
            let s = Split::parse(split)
                .ok_or_else(|| Failure::Validation(format!("unknown split {split:?} (train, val or test)")))?;
            Job::Eval(spec_of(views)?, s)
        }
        Command::Gradcheck { view, floor } => Job::Grad(views_or(view, &View::ALL)?, *floor),
        Command::Pipeline => Job::Pipeline,
    };
    echo(&cfg, cli.command.name())?;
    let ctx = Ctx { cfg, jobs: cli.jobs };
    match job {
        Job::Synth => stages::synth_data(&ctx),
        Job::Features(v) => stages::features(&ctx, &v),
        Job::Train(v, resume) => stages::train_encoder(&ctx, &v, resume),
        Job::Embed(v) => stages::embed(&ctx, &v),
        Job::Head(spec) => stages::train_head(&ctx, &spec),
        Job::Eval(spec, split) => stages::eval(&ctx, &spec, split),
        Job::Grad(v, floor) => stages::gradcheck_all(&ctx, &v, floor),
        Job::Pipeline => stages::pipeline(&ctx),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Messages go to stderr.
pub fn main_with<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            2
        }
    }
}
