//! xpstore: run the experience store server, the seeded experiments, or a
//! store report. Exit code 0 on success, 1 when the inputs are invalid, 2
//! when infrastructure fails underneath a valid request.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};

use xpstore_core::config::{Config, ConfigError};
use xpstore_core::domain::TopicLabel;
use xpstore_core::gateway::mock::MockGateway;
use xpstore_core::gateway::remote::RemoteGateway;
use xpstore_core::gateway::{Condenser, GatewayError, GatewayMode};
use xpstore_core::harness::{
    load_dataset, report_emit, run_generalization, run_refinement_sweep, run_repetitive,
    similarity_report, GeneralizationParams, HarnessError, RepetitiveParams, Report,
    ReportFormat, SweepParams,
};
use xpstore_core::net::{HttpServer, NetError};
use xpstore_core::server::{ExperienceService, StoreError, TopicStore};

#[derive(Parser)]
#[command(name = "xpstore", version, about = "Experience store server and experiment harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Serve the wire protocol for every topic under the configured root.
    Serve {
        #[arg(long, default_value = "xpstore.toml")]
        config: PathBuf,
    },
    /// Run a seeded experiment against a fresh in-process deployment.
    Experiment {
        #[command(subcommand)]
        experiment: Experiment,
    },
    /// Report on an existing store.
    Report {
        #[command(subcommand)]
        report: ReportCommand,
    },
}

#[derive(Subcommand)]
enum Experiment {
    /// Clients repeatedly answer sampled questions across epochs, teaching
    /// the store after each exchange.
    Repetitive {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        epochs: usize,
        #[arg(long, default_value_t = 3)]
        clients: usize,
        /// Responses generated per question exchange.
        #[arg(long, default_value_t = 10)]
        responses: usize,
        #[arg(long, default_value = "./xpstore-reports")]
        out: PathBuf,
    },
    /// Train/test split comparing plain, raw-memory, and distilled-experience
    /// answering.
    Generalize {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Train fraction of the split.
        #[arg(long, default_value_t = 0.8)]
        ratio: f64,
        #[arg(long, default_value = "./xpstore-reports")]
        out: PathBuf,
    },
    /// Oversaturate stores, refine copies at each tau, and measure the
    /// accumulated accuracy lead.
    Sweep {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Duplicate notes planted per question.
        #[arg(long, default_value_t = 100)]
        iterations: usize,
        #[arg(long, value_delimiter = ',', default_value = "2.0,99.0")]
        taus: Vec<f64>,
        #[arg(long, default_value = "./xpstore-reports")]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum ReportCommand {
    /// Similarity score distribution over one topic's live experiences.
    /// The output format follows the file extension (.json, .csv, .md).
    Similarity {
        #[arg(long)]
        topic: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "xpstore.toml")]
        config: PathBuf,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Harness(#[from] HarnessError),
    #[error("{0}")]
    Net(#[from] NetError),
    #[error("{0}")]
    Gateway(#[from] GatewayError),
    #[error("{0}")]
    Store(#[from] StoreError),
    #[error("{0}")]
    Invalid(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Invalid(_) => 1,
            CliError::Harness(e) => e.exit_code() as u8,
            CliError::Gateway(GatewayError::Misconfigured(_)) => 1,
            CliError::Net(_) | CliError::Gateway(_) | CliError::Store(_) | CliError::Io { .. } => 2,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Serve { config } => serve(&config),
        Command::Experiment { experiment } => run_experiment(experiment),
        Command::Report { report } => run_report(report),
    }
}

fn serve(config_path: &Path) -> Result<(), CliError> {
    let config = Config::from_path(config_path)?;
    let condenser: Arc<dyn Condenser> = match config.gateway.mode {
        GatewayMode::Mock => Arc::new(MockGateway::new(
            config.topics.keywords.clone(),
            config.topics.default.clone(),
            config.gateway.seed,
        )),
        GatewayMode::Remote => Arc::new(RemoteGateway::new(
            &config.gateway,
            config.registry(),
            config.topics.default.clone(),
        )?),
    };
    let service = Arc::new(ExperienceService::from_config(&config, condenser)?);
    let server = HttpServer::serve(&config.server.listen, service)?;
    log::info!("serving {} topics on {}", config.registry().len(), server.local_addr());
    loop {
        std::thread::park();
    }
}

/// Scratch space for an experiment's stores and queues. The reports do not
/// depend on its location; it is removed when the run finishes.
fn scratch_dir() -> Result<tempfile::TempDir, CliError> {
    tempfile::Builder::new()
        .prefix("xpstore-run-")
        .tempdir()
        .map_err(|source| CliError::Io { context: "cannot create scratch directory".into(), source })
}

fn emit_all(report: Report, out: &Path) -> Result<(), CliError> {
    for format in ReportFormat::ALL {
        for path in report_emit(std::slice::from_ref(&report), format, out)? {
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn run_experiment(experiment: Experiment) -> Result<(), CliError> {
    match experiment {
        Experiment::Repetitive { dataset, seed, epochs, clients, responses, out } => {
            let items = load_dataset(&dataset)?;
            let params = RepetitiveParams {
                epochs,
                clients,
                responses_per_question: responses,
                seed,
                ..RepetitiveParams::default()
            };
            let work = scratch_dir()?;
            let epochs = run_repetitive(&items, &params, work.path())?;
            emit_all(Report::Repetitive(epochs), &out)
        }
        Experiment::Generalize { dataset, seed, ratio, out } => {
            let items = load_dataset(&dataset)?;
            let params =
                GeneralizationParams { split_ratio: ratio, seed, ..GeneralizationParams::default() };
            let work = scratch_dir()?;
            let report = run_generalization(&items, &params, work.path())?;
            emit_all(Report::Generalization(report), &out)
        }
        Experiment::Sweep { dataset, seed, iterations, taus, out } => {
            let items = load_dataset(&dataset)?;
            let params = SweepParams {
                iterations_per_question: iterations,
                taus,
                seed,
                ..SweepParams::default()
            };
            let work = scratch_dir()?;
            let report = run_refinement_sweep(&items, &params, work.path())?;
            emit_all(Report::Sweep(report), &out)
        }
    }
}

fn run_report(report: ReportCommand) -> Result<(), CliError> {
    match report {
        ReportCommand::Similarity { topic, out, config } => {
            let config = Config::from_path(&config)?;
            let topic = TopicLabel::new(&topic).map_err(|e| CliError::Invalid(e.to_string()))?;
            let store = TopicStore::open(
                &config.storage.root,
                topic,
                config.bm25,
                config.refine.trigger_count,
                config.refine.tau_default,
            )?;
            let similarity = similarity_report(&store)?;
            let format = out
                .extension()
                .and_then(|e| e.to_str())
                .and_then(|e| e.parse::<ReportFormat>().ok())
                .unwrap_or(ReportFormat::Json);
            let rendered = Report::Similarity(similarity).render(format);
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).map_err(|source| CliError::Io {
                    context: format!("cannot create {}", parent.display()),
                    source,
                })?;
            }
            std::fs::write(&out, rendered).map_err(|source| CliError::Io {
                context: format!("cannot write {}", out.display()),
                source,
            })?;
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}
