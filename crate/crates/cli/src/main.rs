use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use controlvideo_cli::{run, Command, RunConfig};

/// Control-conditioned video editing at desk scale.
#[derive(Debug, Parser)]
#[command(name = "controlvideo", version)]
struct Cli {
    /// TOML run configuration; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `out` from the config.
    #[arg(long, global = true, env = "CONTROLVIDEO_OUT")]
    out: Option<PathBuf>,
    /// Worker threads for window evaluation; overrides `threads`.
    #[arg(long, global = true, env = "CONTROLVIDEO_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Sub,
}

#[derive(Debug, Subcommand)]
enum Sub {
    /// Write a synthetic clip, its unedited-area mask and preview frames.
    SynthesizeData,
    /// Derive control maps from the source video.
    ExtractControls,
    /// One-shot fine-tune on the source video; writes a checkpoint and loss trace.
    Train,
    /// Edit a short video.
    Edit,
    /// Edit a long video with overlapping windows and key-frame fusion.
    LongEdit,
    /// Compare the edited video against the source.
    Metrics,
}

impl From<Sub> for Command {
    fn from(s: Sub) -> Self {
        match s {
            Sub::SynthesizeData => Command::SynthesizeData,
            Sub::ExtractControls => Command::ExtractControls,
            Sub::Train => Command::Train,
            Sub::Edit => Command::Edit,
            Sub::LongEdit => Command::LongEdit,
            Sub::Metrics => Command::Metrics,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(p) => match RunConfig::load(p) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
        },
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out {
        cfg.out = o;
    }
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    env_logger::Builder::new().filter_level(cfg.log_level.filter()).parse_default_env().init();
    let cmd = Command::from(cli.command);
    match run(cmd, &cfg) {
        Ok(outcome) => {
            print!("{}", outcome.stdout);
            log::info!("{}: wrote {} artifacts under {}", cmd.name(), outcome.artifacts.len(), cfg.out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
