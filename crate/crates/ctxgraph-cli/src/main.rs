//! ctxgraph command line: validate graphs, inspect contexts, run workers,
//! gateways, and full graph executions, and drive deterministic
//! simulations.
//!
//! Exit codes are stable: 0 success, 1 I/O or parse error, 2 validation or
//! semantic error, 3 connectivity error, 4 execution failure. Diagnostics
//! go to stderr; with `--json`, everything on stdout is canonical JSON.

use clap::{Args, Parser, Subcommand};
use ctxgraph::canon::canonical_json;
use ctxgraph::gateway::{serve_gateway, GatewayOptions, QueueMode, ServerEntry};
use ctxgraph::graph::{validate_graph, GraphSpec, ValidatedGraph};
use ctxgraph::heartbeat::{serve_heartbeat, Snapshotter, SystemSampler, DEFAULT_PROBE_TIMEOUT_MS};
use ctxgraph::orchestrator::{
    read_journal, replay, run_graph, Executor, FileJournal, GatewayExecutor, LocalExecutor,
    OrchestratorError, RetryPolicy, RunResult,
};
use ctxgraph::sim::Scenario;
use ctxgraph::tasks::{builtin_registry, full_builtin_registry};
use ctxgraph::worker::{serve_worker, DEFAULT_WORKER_CAPACITY};
use serde_json::json;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "ctxgraph",
    about = "Context-aware distributed computational-graph execution",
    version
)]
struct Cli {
    /// Emit machine-parseable canonical JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// Seed for all seeded randomness (RANDOM policy, simulations).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a graph file: condensation, acyclicity, wave layering.
    Validate { file: PathBuf },
    /// Print computed contexts as canonical JSON.
    Context {
        file: PathBuf,
        /// Print only this node's context.
        #[arg(long)]
        node: Option<String>,
    },
    /// Run a worker: application service plus heartbeat service.
    Worker(WorkerArgs),
    /// Run the gateway over a server-list file.
    Gateway(GatewayArgs),
    /// Execute a graph, locally or through a gateway.
    Run(RunArgs),
    /// Run a scenario on the deterministic simulator.
    Simulate {
        scenario: PathBuf,
        /// Trace output path (NDJSON); defaults next to the scenario.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
}

#[derive(Args)]
struct WorkerArgs {
    /// Application port.
    #[arg(long, env = "CTXGRAPH_WORKER_PORT")]
    port: u16,
    /// Heartbeat port (a separate service unit).
    #[arg(long, env = "CTXGRAPH_HB_PORT")]
    hb_port: u16,
    /// Task manifest: JSON array of built-in task names to expose.
    #[arg(long)]
    tasks: PathBuf,
    #[arg(long, env = "CTXGRAPH_WORKER_CAPACITY", default_value_t = DEFAULT_WORKER_CAPACITY)]
    capacity: usize,
    #[arg(long, default_value = "0.0.0.0")]
    bind: String,
    /// Server id reported in heartbeats; defaults to worker-<port>.
    #[arg(long)]
    server_id: Option<String>,
}

#[derive(Args)]
struct GatewayArgs {
    #[arg(long, env = "CTXGRAPH_GW_PORT")]
    port: u16,
    /// Server-list file: [{"server_id","app_address","hb_address"}, ...].
    #[arg(long)]
    servers: PathBuf,
    /// Comma-separated policy chain.
    #[arg(long, env = "CTXGRAPH_GW_POLICY", default_value = "LEAST_CPU,ROUND_ROBIN")]
    policy: String,
    #[arg(long, env = "CTXGRAPH_GW_REFRESH_MS", default_value_t = ctxgraph::gateway::DEFAULT_REFRESH_INTERVAL_MS)]
    refresh_ms: i64,
    #[arg(long, default_value_t = ctxgraph::gateway::DEFAULT_STALENESS_BOUND_MS)]
    staleness_ms: i64,
    #[arg(long, env = "CTXGRAPH_HB_TIMEOUT_MS", default_value_t = DEFAULT_PROBE_TIMEOUT_MS)]
    probe_timeout_ms: u64,
    /// Use a keyed queue silo instead of one single-level queue.
    #[arg(long)]
    silo: bool,
    /// Bind the gateway to one task template.
    #[arg(long)]
    task: Option<String>,
    /// Accept any task name (weaker durability guarantee).
    #[arg(long)]
    multi_task: bool,
    #[arg(long, default_value = "0.0.0.0")]
    bind: String,
}

#[derive(Args)]
struct RunArgs {
    file: PathBuf,
    /// Execute through a gateway at this base URL.
    #[arg(long, conflicts_with = "local")]
    gateway: Option<String>,
    /// Execute in-process with the built-in task library.
    #[arg(long)]
    local: bool,
    /// Resume from an existing journal instead of starting fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Result output path.
    #[arg(long, default_value = "result.json")]
    out: PathBuf,
    /// Journal path; defaults to <graph-stem>.journal.ndjson.
    #[arg(long)]
    journal: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    max_attempts: u32,
}

/// Failure classes mapped onto the stable exit codes.
enum CliError {
    Io(String),           // 1
    Semantic(String),     // 2
    Connectivity(String), // 3
    Execution(String),    // 4
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Io(_) => 1,
            CliError::Semantic(_) => 2,
            CliError::Connectivity(_) => 3,
            CliError::Execution(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Io(m) | CliError::Semantic(m) | CliError::Connectivity(m)
            | CliError::Execution(m) => m,
        }
    }
}

fn read_file(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))
}

fn load_graph(path: &Path) -> Result<ValidatedGraph, CliError> {
    let text = read_file(path)?;
    let spec = GraphSpec::from_json(&text)
        .map_err(|e| CliError::Io(format!("cannot parse {}: {e}", path.display())))?;
    validate_graph(&spec).map_err(|e| CliError::Semantic(e.to_string()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Validate { file } => cmd_validate(cli, file),
        Command::Context { file, node } => cmd_context(file, node.as_deref()),
        Command::Worker(args) => cmd_worker(cli, args),
        Command::Gateway(args) => cmd_gateway(cli, args),
        Command::Run(args) => cmd_run(cli, args),
        Command::Simulate { scenario, trace } => cmd_simulate(cli, scenario, trace.as_deref()),
    }
}

fn cmd_validate(cli: &Cli, file: &Path) -> Result<(), CliError> {
    let v = load_graph(file)?;
    let nodes = v.spec.nodes.len();
    let waves = v.condensed.topo_waves.len();
    if cli.json {
        println!(
            "{}",
            canonical_json(&json!({
                "nodes": nodes,
                "supernodes": v.condensed.supernodes.len(),
                "waves": waves,
                "topo_waves": v.condensed.topo_waves,
            }))
        );
    } else {
        println!("{nodes} nodes, {waves} waves");
    }
    Ok(())
}

fn cmd_context(file: &Path, node: Option<&str>) -> Result<(), CliError> {
    let v = load_graph(file)?;
    match node {
        Some(id) => {
            let ctx = v
                .context_of(id)
                .ok_or_else(|| CliError::Semantic(format!("unknown node {id}")))?;
            println!("{}", canonical_json(ctx));
        }
        None => println!("{}", canonical_json(&v.contexts)),
    }
    Ok(())
}

fn parse_addr(bind: &str, port: u16) -> Result<SocketAddr, CliError> {
    format!("{bind}:{port}")
        .parse()
        .map_err(|e| CliError::Semantic(format!("bad bind address: {e}")))
}

fn cmd_worker(cli: &Cli, args: &WorkerArgs) -> Result<(), CliError> {
    let manifest = read_file(&args.tasks)?;
    let names: Vec<String> = serde_json::from_str(&manifest)
        .map_err(|e| CliError::Io(format!("task manifest: {e}")))?;
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let registry =
        builtin_registry(&name_refs).map_err(|e| CliError::Semantic(e.to_string()))?;

    let server_id = args
        .server_id
        .clone()
        .unwrap_or_else(|| format!("worker-{}", args.port));
    let hb = serve_heartbeat(
        parse_addr(&args.bind, args.hb_port)?,
        Snapshotter::new(&server_id, Box::new(SystemSampler::new())),
    )
    .map_err(|e| CliError::Connectivity(e.to_string()))?;
    let app = serve_worker(parse_addr(&args.bind, args.port)?, registry, args.capacity)
        .map_err(|e| CliError::Connectivity(e.to_string()))?;

    if cli.json {
        println!(
            "{}",
            canonical_json(&json!({
                "server_id": server_id,
                "application": app.addr().to_string(),
                "heartbeat": hb.addr().to_string(),
                "tasks": names,
            }))
        );
    } else {
        println!("worker {server_id} listening on {}", app.addr());
        println!("heartbeat listening on {}", hb.addr());
    }
    use_stdout_now();
    park_forever();
}

fn cmd_gateway(cli: &Cli, args: &GatewayArgs) -> Result<(), CliError> {
    let text = read_file(&args.servers)?;
    let servers: Vec<ServerEntry> =
        serde_json::from_str(&text).map_err(|e| CliError::Io(format!("server list: {e}")))?;
    if servers.is_empty() {
        return Err(CliError::Semantic("server list is empty".to_string()));
    }
    let options = GatewayOptions {
        refresh_interval_ms: args.refresh_ms,
        staleness_bound_ms: args.staleness_ms,
        probe_timeout_ms: args.probe_timeout_ms,
        policy_chain: args.policy.clone(),
        seed: cli.seed.unwrap_or(0),
        queue_mode: if args.silo {
            QueueMode::Silo
        } else {
            QueueMode::SingleLevel
        },
        task: args.task.clone(),
        multi_task: args.multi_task,
        ..Default::default()
    };
    let gateway = serve_gateway(parse_addr(&args.bind, args.port)?, servers, options)
        .map_err(|e| CliError::Connectivity(e.to_string()))?;

    if cli.json {
        println!(
            "{}",
            canonical_json(&json!({"gateway": gateway.addr().to_string()}))
        );
    } else {
        println!("gateway listening on {}", gateway.addr());
    }
    use_stdout_now();
    park_forever();
}

fn use_stdout_now() {
    use std::io::Write;
    let _ = std::io::stdout().flush();
}

fn park_forever() -> ! {
    loop {
        std::thread::park();
    }
}

fn orchestrator_exit(e: OrchestratorError) -> CliError {
    match e {
        OrchestratorError::JournalMismatch { .. } | OrchestratorError::JournalLocked(_) => {
            CliError::Semantic(e.to_string())
        }
        OrchestratorError::JournalRead(_) | OrchestratorError::JournalWrite(_) => {
            CliError::Io(e.to_string())
        }
        other => CliError::Execution(other.to_string()),
    }
}

fn cmd_run(cli: &Cli, args: &RunArgs) -> Result<(), CliError> {
    let graph = load_graph(&args.file)?;
    let retry = RetryPolicy {
        max_attempts: args.max_attempts,
        ..Default::default()
    };

    let executor: Box<dyn Executor> = match (&args.gateway, args.local) {
        (Some(url), _) => {
            // fail fast with a connectivity error before any execution
            let probe = ctxgraph::heartbeat::probe(
                url.trim_start_matches("http://").trim_end_matches('/'),
                "/servers",
                2000,
            );
            if !probe.is_ok() {
                return Err(CliError::Connectivity("gateway unreachable".to_string()));
            }
            Box::new(
                GatewayExecutor::new(url.clone(), 60_000)
                    .map_err(CliError::Connectivity)?,
            )
        }
        (None, true) => Box::new(LocalExecutor::new(full_builtin_registry())),
        (None, false) => {
            return Err(CliError::Semantic(
                "choose an executor: --local or --gateway URL".to_string(),
            ))
        }
    };

    let journal_path = args.journal.clone().unwrap_or_else(|| {
        let stem = args
            .file
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("run");
        PathBuf::from(format!("{stem}.journal.ndjson"))
    });

    let result = match &args.resume {
        Some(resume_path) => {
            let prior = read_journal(resume_path).map_err(orchestrator_exit)?;
            let mut sink = FileJournal::open(resume_path, false).map_err(orchestrator_exit)?;
            replay(&prior, &graph, executor.as_ref(), &retry, &mut sink)
                .map_err(orchestrator_exit)?
        }
        None => {
            let mut sink = FileJournal::open(&journal_path, true).map_err(orchestrator_exit)?;
            run_graph(&graph, executor.as_ref(), &retry, &mut sink)
                .map_err(orchestrator_exit)?
        }
    };

    write_result(&result, &args.out)?;
    if cli.json {
        println!("{}", canonical_json(&result));
    } else {
        let done = result
            .statuses
            .values()
            .filter(|s| matches!(s, ctxgraph::orchestrator::NodeStatus::Completed))
            .count();
        println!(
            "completed {done}/{} nodes in {:.0} ms; result in {}",
            result.statuses.len(),
            result.wall_ms,
            args.out.display()
        );
    }
    if result.fully_completed() {
        Ok(())
    } else {
        Err(CliError::Execution("some nodes did not complete".to_string()))
    }
}

fn write_result(result: &RunResult, out: &Path) -> Result<(), CliError> {
    std::fs::write(out, canonical_json(result))
        .map_err(|e| CliError::Io(format!("cannot write {}: {e}", out.display())))
}

fn cmd_simulate(cli: &Cli, scenario_path: &Path, trace_out: Option<&Path>) -> Result<(), CliError> {
    let text = read_file(scenario_path)?;
    let mut scenario = Scenario::from_json(&text)
        .map_err(|e| CliError::Io(format!("cannot parse {}: {e}", scenario_path.display())))?;
    if let Some(seed) = cli.seed {
        scenario.seed = seed;
    }
    let (result, trace) = ctxgraph::sim::simulate(&scenario).map_err(|e| match e {
        ctxgraph::sim::ScenarioError::InvariantViolation(_)
        | ctxgraph::sim::ScenarioError::Orchestrator(_) => CliError::Execution(e.to_string()),
        other => CliError::Semantic(other.to_string()),
    })?;

    let trace_path = trace_out.map(Path::to_path_buf).unwrap_or_else(|| {
        let stem = scenario_path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("scenario");
        PathBuf::from(format!("{stem}.trace.ndjson"))
    });
    std::fs::write(&trace_path, trace.to_ndjson())
        .map_err(|e| CliError::Io(format!("cannot write {}: {e}", trace_path.display())))?;

    if cli.json {
        println!("{}", canonical_json(&result));
    } else {
        println!(
            "{} trace events; {} nodes; trace in {}",
            trace.events.len(),
            result.statuses.len(),
            trace_path.display()
        );
    }
    if result.fully_completed() {
        Ok(())
    } else {
        Err(CliError::Execution("some nodes did not complete".to_string()))
    }
}
