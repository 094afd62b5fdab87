mod commands;
mod config;
mod error;

use std::io::Write as _;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};

use commands::Experiment;
use config::{Overrides, Project};
use error::{CliError, CliResult};

/// Solve blendshape rig weights from facial marker tracks.
#[derive(Parser)]
#[command(name = "facesolve", version)]
struct Cli {
    /// Project config (JSON); paths in it are relative to its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; every random stage derives its seed from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the rig document.
    GenRig,
    /// Generate FACS and ROM clips, bake and augment them, and write a demo shot.
    GenData,
    /// Report the salient subset of the training set.
    Select {
        #[arg(long)]
        sigma: Option<f64>,
    },
    /// Train region solvers.
    Train {
        /// Train only this region (repeatable); all regions when absent.
        #[arg(long)]
        region: Vec<String>,
        /// Train on the subset written by `select`.
        #[arg(long)]
        salient: bool,
    },
    /// Raw solve of the shot, with optional anchors and jaw override.
    Solve {
        /// Anchor as FRAME:WEIGHTS_PATH (repeatable; order = application order).
        #[arg(long, value_parser = parse_anchor)]
        anchor: Vec<(usize, PathBuf)>,
        /// Weight track replacing the solved jaw pass.
        #[arg(long)]
        jaw_override: Option<PathBuf>,
    },
    /// Fine-tune the raw solve against the shot.
    Finetune,
    /// Write RMSE curves and a summary of the latest solve.
    Eval,
    /// Run an ablation experiment.
    Ablate {
        #[arg(long, value_enum)]
        experiment: Experiment,
        /// Comma-separated selection thresholds for the salient sweep.
        #[arg(long, value_delimiter = ',')]
        sigmas: Option<Vec<f64>>,
    },
    /// Start the session server.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
}

fn parse_anchor(s: &str) -> Result<(usize, PathBuf), String> {
    let (frame, path) = s
        .split_once(':')
        .ok_or_else(|| format!("expected FRAME:WEIGHTS_PATH, got `{s}`"))?;
    let frame = frame.parse().map_err(|e| format!("anchor frame `{frame}`: {e}"))?;
    if path.is_empty() {
        return Err("anchor weights path is empty".into());
    }
    Ok((frame, PathBuf::from(path)))
}

fn configure_threads() -> CliResult<()> {
    let Ok(value) = std::env::var("FACESOLVE_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("FACESOLVE_THREADS must be a positive integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))
}

/// Append a timestamped line to the log; the only place time is recorded.
fn log(project: &Project, command: &str, ok: bool) {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let path = project.out.join("facesolve.log");
    let _ = std::fs::create_dir_all(&project.out);
    if let Ok(mut f) = std::fs::OpenOptions::new().create(true).append(true).open(path) {
        let _ = writeln!(f, "{secs} {command} {}", if ok { "ok" } else { "failed" });
    }
}

fn run(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    let (anchors, jaw_override) = match &cli.command {
        Command::Solve { anchor, jaw_override } => (anchor.clone(), jaw_override.clone()),
        _ => (Vec::new(), None),
    };
    let overrides = Overrides {
        seed: cli.seed,
        out: cli.out,
        anchors,
        jaw_override,
    };
    let project = Project::load(cli.config.as_deref(), overrides)?;
    let (name, result) = match &cli.command {
        Command::GenRig => ("gen-rig", commands::gen_rig(&project)),
        Command::GenData => ("gen-data", commands::gen_data(&project)),
        Command::Select { sigma } => ("select", commands::select(&project, *sigma)),
        Command::Train { region, salient } => ("train", commands::train(&project, region, *salient)),
        Command::Solve { .. } => ("solve", commands::solve(&project)),
        Command::Finetune => ("finetune", commands::finetune(&project)),
        Command::Eval => ("eval", commands::eval(&project)),
        Command::Ablate { experiment, sigmas } => ("ablate", commands::ablate(&project, *experiment, sigmas.as_deref())),
        Command::Serve { addr } => return commands::serve(*addr),
    };
    log(&project, name, result.is_ok());
    result
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
