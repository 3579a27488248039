//! `fabricctl`: operator commands over an opened fabric. Each subcommand
//! parses its arguments, calls one library operation and prints the result
//! as JSON on stdout. Diagnostics go to stderr.
//!
//! Exit codes: 0 success, 1 domain failure, 2 usage error, 3 I/O or transport error.

mod commands;
mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use fabric_core::access::{Aggregate, GroupBy};
use fabric_core::sim::ReplayMode;
use fabric_core::store::Lifecycle;
use fabric_core::time::Timestamp;

pub use config::{Overrides, Settings, CONFIG_ENV};

/// Failure of one invocation, carrying the stable error code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    kind: ErrorKind,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ErrorKind {
    Domain,
    Usage,
    Io,
}

const IO_CODES: &[&str] = &["STORAGE_IO", "TRANSPORT_ERROR", "LEDGER_IO", "STORE_LOCKED"];

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            kind: ErrorKind::Usage,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        CliError {
            kind: ErrorKind::Io,
            message: message.into(),
        }
    }

    pub fn domain(message: impl Into<String>) -> Self {
        CliError {
            kind: ErrorKind::Domain,
            message: message.into(),
        }
    }

    /// Classifies a library error by its code.
    pub fn coded(code: &str, message: impl std::fmt::Display) -> Self {
        let message = message.to_string();
        let message = if message.starts_with(code) {
            message
        } else {
            format!("{code}: {message}")
        };
        if IO_CODES.contains(&code) {
            CliError::io(message)
        } else {
            CliError::domain(message)
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Domain => 1,
            ErrorKind::Usage => 2,
            ErrorKind::Io => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "fabricctl", version, about = "Operate a clinical data fabric")]
pub struct Cli {
    /// Config file (JSON). Defaults to $FABRIC_CONFIG.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Fabric root directory.
    #[arg(long, global = true)]
    store: Option<PathBuf>,
    /// Environment name used for publishing and serving.
    #[arg(long, global = true)]
    environment: Option<String>,
    /// File holding the token signing key.
    #[arg(long, global = true)]
    key_file: Option<PathBuf>,
    /// Actor recorded on governance decisions.
    #[arg(long, global = true, default_value = "operator")]
    actor: String,
    /// Include wall-clock timestamps in output.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Install the bundled study vocabulary and schemas.
    #[command(subcommand)]
    Study(StudyCmd),
    /// Publish and inspect CIDE and CODE schemas.
    #[command(subcommand)]
    Schema(SchemaCmd),
    /// Propose and govern vocabulary terms.
    #[command(subcommand)]
    Vocab(VocabCmd),
    /// Submit records or a batch through the gateway.
    #[command(subcommand)]
    Ingest(IngestCmd),
    /// Promote, audit and query stored entries.
    #[command(subcommand)]
    Store(StoreCmd),
    /// Validate, plan, run and export pipelines.
    #[command(subcommand)]
    Pipeline(PipelineCmd),
    /// Publish a validated run output to an outbound environment.
    Publish(PublishArgs),
    /// Query a published dataset as a time series.
    Query(QueryArgs),
    /// Generate and replay simulated study streams.
    #[command(subcommand)]
    Sim(SimCmd),
    /// Serve the ingest and access HTTP API.
    Serve(ServeArgs),
    /// Issue signed access tokens.
    #[command(subcommand)]
    Token(TokenCmd),
}

#[derive(Debug, Subcommand)]
enum StudyCmd {
    Install,
}

#[derive(Debug, Subcommand)]
enum SchemaCmd {
    Publish {
        file: PathBuf,
    },
    Show {
        schema_id: String,
        #[arg(long)]
        version: Option<u32>,
    },
    List,
}

#[derive(Debug, Subcommand)]
enum VocabCmd {
    /// Propose terms from a JSON file (one object or a list).
    Propose {
        file: PathBuf,
    },
    Accept {
        name: String,
    },
    Reject {
        name: String,
    },
    List,
}

#[derive(Debug, Subcommand)]
enum IngestCmd {
    Record {
        file: PathBuf,
        #[arg(long)]
        blob: Option<PathBuf>,
        #[arg(long, default_value = "application/octet-stream", requires = "blob")]
        content_type: String,
    },
    /// Ingest a batch directory or tar archive holding `batch.json`.
    Batch { path: PathBuf },
}

#[derive(Debug, Subcommand)]
enum StoreCmd {
    Promote {
        #[arg(long, conflicts_with = "entry_ids")]
        all_valid: bool,
        entry_ids: Vec<String>,
    },
    Audit,
    Query(StoreQueryArgs),
}

#[derive(Debug, Args)]
struct StoreQueryArgs {
    #[arg(long)]
    study: Option<String>,
    #[arg(long)]
    participant: Option<String>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    lifecycle: Option<Lifecycle>,
    #[arg(long)]
    from: Option<Timestamp>,
    #[arg(long)]
    to: Option<Timestamp>,
}

#[derive(Debug, Subcommand)]
enum PipelineCmd {
    Validate {
        file: PathBuf,
    },
    Plan {
        file: PathBuf,
    },
    Run {
        file: PathBuf,
        #[arg(long)]
        study: String,
        /// Parameter override `instance.param=json`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        dataset_id: Option<String>,
    },
    /// Print the orchestrator export document.
    Export {
        file: PathBuf,
    },
}

#[derive(Debug, Args)]
struct PublishArgs {
    #[arg(long)]
    run: String,
    #[arg(long)]
    csv: PathBuf,
    #[arg(long)]
    dataset_id: String,
    /// CODE schema `id@vN`; defaults to the run's validated schema.
    #[arg(long)]
    schema: Option<String>,
}

#[derive(Debug, Args)]
struct QueryArgs {
    #[arg(long, env = "FABRIC_TOKEN", hide_env_values = true)]
    token: String,
    #[arg(long)]
    dataset: String,
    #[arg(long)]
    field: String,
    #[arg(long)]
    from: Timestamp,
    #[arg(long)]
    to: Timestamp,
    #[arg(long, value_parser = parse_lowercase::<GroupBy>, default_value = "none")]
    group_by: GroupBy,
    #[arg(long, value_parser = parse_lowercase::<Aggregate>, default_value = "count")]
    aggregate: Aggregate,
    /// Only consider this environment (otherwise any the token covers).
    #[arg(long = "in")]
    in_environment: Option<String>,
}

#[derive(Debug, Subcommand)]
enum SimCmd {
    Generate {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        participants: u32,
        #[arg(long)]
        days: u32,
        #[arg(long, default_value_t = 0.0)]
        corruption_rate: f64,
        #[arg(long)]
        out: PathBuf,
    },
    Replay {
        dir: PathBuf,
        #[arg(long, default_value = "batch")]
        mode: ReplayMode,
        /// Replay against a running server instead of the local store.
        #[arg(long, requires = "token")]
        url: Option<String>,
        #[arg(long, env = "FABRIC_TOKEN", hide_env_values = true)]
        token: Option<String>,
        /// Compare totals with the stream's ground-truth ledger.
        #[arg(long)]
        check: bool,
    },
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long)]
    addr: Option<String>,
}

#[derive(Debug, Subcommand)]
enum TokenCmd {
    Issue {
        #[arg(long)]
        subject: String,
        /// `environment:study`, repeatable.
        #[arg(long = "scope", required = true)]
        scopes: Vec<String>,
        #[arg(long, conflicts_with = "ttl_seconds")]
        expires: Option<Timestamp>,
        #[arg(long, default_value_t = 3600)]
        ttl_seconds: i64,
    },
}

fn parse_lowercase<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

/// Runs one invocation and returns the exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let rendered = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(stderr, "{rendered}");
                2
            } else {
                let _ = write!(stdout, "{rendered}");
                0
            };
        }
    };
    match dispatch(cli, stdout, stderr) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {}", e.message);
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<i32, CliError> {
    let overrides = Overrides {
        config: cli.config.clone(),
        store: cli.store.clone(),
        environment: cli.environment.clone(),
        addr: match &cli.command {
            Command::Serve(a) => a.addr.clone(),
            _ => None,
        },
        key_file: cli.key_file.clone(),
    };
    let settings = Settings::resolve(&overrides, std::env::var_os(CONFIG_ENV).map(PathBuf::from))?;
    let mut out = commands::Output::new(stdout, stderr, cli.verbose);
    let ctx = commands::Ctx {
        settings: &settings,
        actor: &cli.actor,
    };
    commands::dispatch(cli.command, &ctx, &mut out)
}
