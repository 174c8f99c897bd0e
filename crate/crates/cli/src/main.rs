//! `hdre`: synthesize training pairs, train, enhance, evaluate, fuse.
//!
//! Exit codes: 0 success, 1 training diverged, 2 usage or input error,
//! 3 data or model integrity error.

mod commands;
mod config;
mod jsonlog;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hdre_core::Error;

#[derive(Parser, Debug)]
#[command(name = "hdre", version, about = "Low-light enhancement trained from HDR radiance maps")]
struct Cli {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Log as JSON lines on stderr.
    #[arg(long, global = true)]
    json_log: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write (dark input, fused target) pairs synthesized from .hdr files.
    Synth(SynthArgs),
    /// Train the enhancement network on a directory of .hdr files.
    Train(TrainArgs),
    /// Enhance a PNG, or every PNG in a directory.
    Enhance(EnhanceArgs),
    /// Score input, histogram equalization and the network on synthesized test inputs.
    Eval(EvalArgs),
    /// Exposure-fuse PNGs of the same size.
    Fuse(FuseArgs),
    /// Write procedural HDR scenes.
    Scenes(ScenesArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub hdr_dir: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = hdre_core::synthpipe::TRAIN_PATCH_SIZE)]
    pub size: usize,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub hdr_dir: Option<PathBuf>,
    /// Directory for checkpoints, the loss log and the config echo.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub width_scale: Option<f64>,
    #[arg(long)]
    pub no_global_encoder: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub ckpt_every: Option<usize>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub precompute: bool,
}

#[derive(Args, Debug)]
pub struct EnhanceArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// PNG file or directory of PNGs.
    #[arg(long)]
    pub input: PathBuf,
    /// Output PNG, or a directory in batch mode.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub hdr_dir: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Comma-separated subset of input,he,proposed.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    /// Directory receiving report.csv and summary.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = hdre_core::synthpipe::EVAL_PATCH_SIZE)]
    pub size: usize,
}

#[derive(Args, Debug)]
pub struct FuseArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ScenesArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 24)]
    pub count: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 512)]
    pub width: usize,
    #[arg(long, default_value_t = 384)]
    pub height: usize,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Integrity(_) => 3,
        Error::Diverged(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    jsonlog::init(cli.json_log);
    if let Ok(n) = std::env::var("HDRE_THREADS") {
        match n.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    log::warn!("could not size the worker pool: {e}");
                }
            }
            _ => {
                log::error!("HDRE_THREADS must be a positive integer, got {n:?}");
                return ExitCode::from(2);
            }
        }
    }
    let config = match cli.config.as_deref().map(config::CliConfig::load).transpose() {
        Ok(c) => c.unwrap_or_default(),
        Err(e) => {
            log::error!("{e}");
            return ExitCode::from(exit_code(&e));
        }
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a, &config),
        Command::Train(a) => commands::train(a, &config),
        Command::Enhance(a) => commands::enhance(a, &config),
        Command::Eval(a) => commands::eval(a, &config),
        Command::Fuse(a) => commands::fuse(a),
        Command::Scenes(a) => commands::scenes(a, &config),
    };
    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
