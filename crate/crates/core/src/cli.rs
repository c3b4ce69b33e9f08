//! Command-line entry point. Every path flag also accepts `bundled:<name>`.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};

use crate::assets::{self, BUNDLED_PREFIX};
use crate::code::Code;
use crate::criteria::World;
use crate::graph::{Severity, ValidationIssue};
use crate::history::{timeline_export, HistoryConfig};
use crate::necessity::{determine, load_registry, Status};
use crate::orchestrator::{load_scenario, run_scenario, Engine, ScenarioError};
use crate::patient::{default_as_of, load_record, snapshot_at};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_DENIED: i32 = 3;
pub const EXIT_INSUFFICIENT: i32 = 4;

const DEFAULT_GRAPH: &str = "bundled:ovarian-diagnosis.graph.json";
const DEFAULT_REGISTRY: &str = "bundled:guidelines.json";
const DEFAULT_CODE_MAP: &str = "bundled:code-map.json";
const DEFAULT_SCENARIO: &str = "bundled:ovarian-diagnosis.scenario.json";

#[derive(Debug, Parser)]
#[command(name = "careflow", version, about = "Oncology care-path engine: guideline checks, timelines, next steps")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a care graph, guideline registry, code map and scenario.
    Validate(ValidateArgs),
    /// Run a scenario script and write result.json and audit.log.
    Run(RunArgs),
    /// Determine medical necessity of one code for a patient.
    Necessity(NecessityArgs),
    /// Print a patient's timeline with gap findings.
    Timeline(TimelineArgs),
    /// Start the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub graph: Option<String>,
    #[arg(long)]
    pub registry: Option<String>,
    #[arg(long = "code-map")]
    pub code_map: Option<String>,
    #[arg(long)]
    pub scenario: Option<String>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long, default_value = DEFAULT_SCENARIO)]
    pub scenario: String,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct NecessityArgs {
    #[arg(long)]
    pub patient: String,
    #[arg(long)]
    pub code: Code,
    /// Defaults to the patient's payer.
    #[arg(long)]
    pub payer: Option<String>,
    #[arg(long, default_value = "open")]
    pub world: World,
    #[arg(long, default_value = DEFAULT_REGISTRY)]
    pub registry: String,
    #[arg(long = "as-of")]
    pub as_of: Option<NaiveDate>,
    /// Print the determination as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct TimelineArgs {
    #[arg(long)]
    pub patient: String,
    #[arg(long, default_value = DEFAULT_GRAPH)]
    pub graph: String,
    #[arg(long = "as-of")]
    pub as_of: Option<NaiveDate>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "PORT", default_value_t = 8080)]
    pub port: u16,
    #[arg(long, env = "CAREFLOW_STORE", default_value = "careflow-store")]
    pub store: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
}

fn read(path: &str) -> Result<String, String> {
    if let Some(name) = path.strip_prefix(BUNDLED_PREFIX) {
        return assets::bundled(name).map(str::to_owned).ok_or_else(|| format!("no bundled asset named `{name}`"));
    }
    std::fs::read_to_string(path).map_err(|e| format!("{path}: {e}"))
}

/// Parses arguments and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_IO } else { EXIT_OK };
        }
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::Validate(a) => validate(&a, &mut out),
        Command::Run(a) => run_cmd(&a, &mut out),
        Command::Necessity(a) => necessity(&a, &mut out),
        Command::Timeline(a) => timeline(&a, &mut out),
        Command::Serve(a) => serve(&a),
    }
}

fn report(out: &mut dyn Write, issues: &[ValidationIssue]) -> i32 {
    for issue in issues {
        let _ = writeln!(out, "{issue}");
    }
    let errors = issues.iter().filter(|i| i.severity == Severity::Error).count();
    let _ = writeln!(out, "{errors} error(s), {} warning(s)", issues.len() - errors);
    if errors == 0 {
        EXIT_OK
    } else {
        EXIT_FAILURE
    }
}

fn validate(a: &ValidateArgs, out: &mut dyn Write) -> i32 {
    let mut docs = Vec::new();
    for path in [&a.graph, &a.registry, &a.code_map] {
        let given = path.as_deref();
        match given.map(read) {
            Some(Err(e)) => {
                eprintln!("error: {e}");
                return EXIT_IO;
            }
            Some(Ok(text)) => docs.push(Some(text)),
            None => docs.push(None),
        }
    }
    let pick = |i: usize, default: &str| docs[i].clone().unwrap_or_else(|| read(default).expect("bundled"));
    let mut issues = Vec::new();
    match Engine::from_documents(&pick(0, DEFAULT_GRAPH), &pick(1, DEFAULT_REGISTRY), &pick(2, DEFAULT_CODE_MAP)) {
        Ok(engine) => issues.extend(engine.validate()),
        Err(e) => issues.push(ValidationIssue::error("assets", e.to_string())),
    }
    let scenario = match (&a.scenario, &a.graph, &a.registry, &a.code_map) {
        (Some(s), ..) => Some(s.as_str()),
        (None, None, None, None) => Some(DEFAULT_SCENARIO),
        _ => None,
    };
    if let Some(path) = scenario {
        match load_scenario(path) {
            Err(ScenarioError::Io { path, source }) => {
                eprintln!("error: {}: {source}", path.display());
                return EXIT_IO;
            }
            Err(e) => issues.push(ValidationIssue::error("scenario", e.to_string())),
            Ok((s, base)) => match s.prepare(base.as_deref()) {
                Ok(_) => {}
                Err(ScenarioError::Io { path, source }) => {
                    eprintln!("error: {}: {source}", path.display());
                    return EXIT_IO;
                }
                Err(e) => issues.extend(e.issues().into_iter().map(|mut i| {
                    i.location = format!("scenario: {}", i.location);
                    i
                })),
            },
        }
    }
    issues.dedup();
    report(out, &issues)
}

fn write_outputs(dir: &Path, result: &str, audit: &str) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("result.json"), result)?;
    std::fs::write(dir.join("audit.log"), audit)
}

fn run_cmd(a: &RunArgs, out: &mut dyn Write) -> i32 {
    let result = load_scenario(&a.scenario).and_then(|(s, base)| run_scenario(&s, base.as_deref()));
    let result = match result {
        Ok(r) => r,
        Err(e) => {
            for issue in e.issues() {
                eprintln!("{issue}");
            }
            return EXIT_FAILURE;
        }
    };
    if let Err(e) = write_outputs(&a.out, &result.to_json(), &result.audit_export()) {
        eprintln!("error: cannot write to {}: {e}", a.out.display());
        return EXIT_IO;
    }
    let failed = result.steps.iter().filter(|s| s.error.is_some()).count();
    let _ = writeln!(
        out,
        "{} steps ({failed} failed), {} audit entries -> {}",
        result.steps.len(),
        result.audit.len(),
        a.out.display()
    );
    EXIT_OK
}

fn necessity(a: &NecessityArgs, out: &mut dyn Write) -> i32 {
    let (patient, registry) = match (read(&a.patient), read(&a.registry)) {
        (Ok(p), Ok(r)) => (p, r),
        (Err(e), _) | (_, Err(e)) => {
            eprintln!("error: {e}");
            return EXIT_IO;
        }
    };
    let record = match load_record(&patient) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: patient: {e}");
            return EXIT_FAILURE;
        }
    };
    let registry = match load_registry(&registry) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: registry: {e}");
            return EXIT_FAILURE;
        }
    };
    let as_of = a.as_of.unwrap_or_else(|| default_as_of(&record));
    let payer = a.payer.clone().unwrap_or_else(|| record.payer_id.clone());
    let d = match determine(&registry, &payer, &a.code, &snapshot_at(&record, as_of), a.world) {
        Ok(d) => d,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_FAILURE;
        }
    };
    if a.json {
        let _ = writeln!(out, "{}", serde_json::to_string_pretty(&d).expect("determinations serialize"));
    } else {
        for line in &d.reasoning {
            let _ = writeln!(out, "{line}");
        }
    }
    match d.status {
        Status::Approved => EXIT_OK,
        Status::Denied => EXIT_DENIED,
        Status::InsufficientInformation => EXIT_INSUFFICIENT,
    }
}

fn timeline(a: &TimelineArgs, out: &mut dyn Write) -> i32 {
    let (patient, graph) = match (read(&a.patient), read(&a.graph)) {
        (Ok(p), Ok(g)) => (p, g),
        (Err(e), _) | (_, Err(e)) => {
            eprintln!("error: {e}");
            return EXIT_IO;
        }
    };
    let record = match load_record(&patient) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: patient: {e}");
            return EXIT_FAILURE;
        }
    };
    let graph = match crate::graph::load_graph(&graph) {
        Ok(g) => g,
        Err(e) => {
            eprintln!("error: graph: {e}");
            return EXIT_FAILURE;
        }
    };
    let as_of = a.as_of.unwrap_or_else(|| default_as_of(&record));
    let export = timeline_export(&record, &graph, as_of, &HistoryConfig::default());
    let _ = writeln!(out, "{}", serde_json::to_string_pretty(&export).expect("exports serialize"));
    EXIT_OK
}

fn serve(a: &ServeArgs) -> i32 {
    let _ = tracing_subscriber::fmt().with_writer(std::io::stderr).try_init();
    let store = match crate::service::SessionStore::open(&a.store) {
        Ok(s) => Arc::new(s),
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_FAILURE;
        }
    };
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_FAILURE;
        }
    };
    runtime.block_on(async {
        let listener = match tokio::net::TcpListener::bind((a.host.as_str(), a.port)).await {
            Ok(l) => l,
            Err(e) => {
                eprintln!("error: cannot listen on {}:{}: {e}", a.host, a.port);
                return EXIT_FAILURE;
            }
        };
        let addr = listener.local_addr().map(|a| a.to_string()).unwrap_or_default();
        tracing::info!(%addr, store = %a.store.display(), "listening");
        println!("listening on http://{addr}");
        match crate::service::serve(listener, store).await {
            Ok(()) => EXIT_OK,
            Err(e) => {
                eprintln!("error: {e}");
                EXIT_FAILURE
            }
        }
    })
}
