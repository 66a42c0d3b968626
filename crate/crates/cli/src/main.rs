use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thiserror::Error;
use tnr_core::orchestrator::{
    compute_metrics, load_poses, run_follow, run_repeat, serve_bridge, BridgeError, ConfigError, MissionConfig,
    MissionError, PoseFileError, ShutdownFlag,
};
use tnr_core::simulator::{format_log, parse_log};
use tnr_core::teach::{load_session, save_session, teach_from_poses, SessionFileError};

#[derive(Parser)]
#[command(
    name = "tnr",
    version,
    about = "Teach-and-repeat mission engine for simulated aerial inspection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a teach session from a recorded pose stream.
    Teach {
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Repeat a taught session in simulation.
    Repeat {
        #[arg(long)]
        session: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Follow a recorded teacher stream live over the simulated link.
    Follow {
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        log: PathBuf,
    },
    /// Recompute the mission report of a log against its session.
    Metrics {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        session: PathBuf,
        /// Config whose safety spheres are reported on.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Serve the operator console bridge on localhost.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 8765)]
        port: u16,
    },
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("mission aborted: {0}")]
    Mission(#[from] MissionError),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Mission(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<PoseFileError> for CliError {
    fn from(e: PoseFileError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<SessionFileError> for CliError {
    fn from(e: SessionFileError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<BridgeError> for CliError {
    fn from(e: BridgeError) -> Self {
        match e {
            BridgeError::Io(e) => CliError::Io(format!("bridge: {e}")),
            BridgeError::Mission(MissionError::Config(m)) => CliError::Config(m),
            BridgeError::Mission(m) => CliError::Mission(m),
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<MissionConfig, CliError> {
    match path {
        Some(p) => Ok(MissionConfig::load(p)?),
        None => Ok(MissionConfig::default()),
    }
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Teach { poses, config, out } => {
            let config = load_config(config.as_deref())?;
            let poses = load_poses(&poses)?;
            let (session, _) = teach_from_poses(&poses, config.teach, &config.frame_id)
                .map_err(|e| CliError::Io(format!("pose stream rejected: {e}")))?;
            save_session(&session, &out)?;
            println!(
                "{} keyframes, {} inspection points, {:.2} m, digest {}",
                session.keyframes().len(),
                session.inspection_ids().len(),
                session.total_length(),
                session.digest()
            );
        }
        Command::Repeat {
            session,
            config,
            log,
            report,
        } => {
            let config = load_config(config.as_deref())?;
            let session = load_session(&session)?;
            let run = run_repeat(&session, &config)?;
            write(&log, &format_log(&run.log))?;
            write(&report, &run.report.to_json())?;
            println!(
                "completed {}, {} inspections, max cross-track {:.3} m, {:.1} s",
                run.report.completed,
                run.report.inspections.len(),
                run.report.max_cross_track,
                run.report.duration
            );
            run.outcome?;
        }
        Command::Follow { poses, config, log } => {
            let config = load_config(config.as_deref())?;
            let poses = load_poses(&poses)?;
            let run = run_follow(&poses, &config)?;
            write(&log, &format_log(&run.log))?;
            println!(
                "{} ticks, {} teacher poses accepted, {} stale, {} corrupt",
                run.log.len(),
                run.link.accepted,
                run.link.stale,
                run.link.corrupt
            );
            run.outcome?;
        }
        Command::Metrics { log, session, config } => {
            let config = load_config(config.as_deref())?;
            let text = std::fs::read_to_string(&log).map_err(|e| CliError::Io(format!("{}: {e}", log.display())))?;
            let records = parse_log(&text).map_err(|e| CliError::Io(format!("{}: {e}", log.display())))?;
            let session = load_session(&session)?;
            println!("{}", compute_metrics(&records, &session, &config.spheres).to_json());
        }
        Command::Serve { config, port } => {
            let config = load_config(config.as_deref())?;
            serve_bridge(config, port, &ShutdownFlag::new())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tnr: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
