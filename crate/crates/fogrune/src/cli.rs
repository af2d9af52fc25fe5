//! Thin command-line front end over the library.
//!
//! Machine-readable JSON goes to stdout; diagnostics and errors go to
//! stderr. Exit codes: 0 success, 1 validation findings or malformed
//! specs, 2 runtime failures (I/O and the like). Set `FOGRUNE_LOG` for
//! component logging.

use std::fs;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use crate::error::{Diagnostic, FogError};
use crate::function::{validate as validate_function, FogFunction};
use crate::operator::OperatorRegistry;
use crate::sim::bench;
use crate::sim::cluster::Cluster;
use crate::sim::scenario::{Mode, SimConfig};

#[derive(Parser)]
#[command(
    name = "fogrune",
    version,
    about = "Context-driven serverless fog orchestration, simulated at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a scenario or function spec. Silent and exit 0 when clean.
    Validate {
        /// Scenario JSON (has "nodes") or function JSON (has "operator").
        path: PathBuf,
    },
    /// Run a scenario and print its metrics report as JSON.
    RunScenario {
        path: PathBuf,
        /// Override the scenario's mode: cloud, edge or fog.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        seed: Option<u64>,
        /// Override the virtual duration, seconds.
        #[arg(long)]
        duration: Option<u64>,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Append every transported message to this NDJSON file.
        #[arg(long)]
        log_messages: Option<PathBuf>,
        /// Measure wall-clock orchestration decision latency.
        #[arg(long)]
        timings: bool,
    },
    /// Startup, migration, throughput and decision-latency measurements.
    Bench {
        #[arg(value_enum)]
        kind: BenchKind,
        /// Worker pool sizes for the throughput bench.
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        workers: Vec<u32>,
        /// Tasks to launch per throughput run.
        #[arg(long, default_value_t = 40)]
        tasks: u32,
        /// Container launch delay for the throughput bench, ms.
        #[arg(long, default_value_t = 500)]
        launch_ms: u64,
        /// Entity count for the decision bench.
        #[arg(long, default_value_t = 1000)]
        entities: usize,
        /// Function count for the decision bench.
        #[arg(long, default_value_t = 10)]
        functions: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a scenario, then print one slice of the final cluster state.
    Inspect {
        #[arg(value_enum)]
        what: InspectWhat,
        /// Scenario to run; defaults to the built-in car fleet.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        duration: Option<u64>,
    },
    /// Validate a function spec; optionally add it to a scenario file.
    RegisterFunc {
        path: PathBuf,
        /// Scenario JSON to register the function into.
        #[arg(long)]
        target: Option<PathBuf>,
        /// Where to write the updated scenario (defaults to the target).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Cloud,
    Edge,
    Fog,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Cloud => Mode::Cloud,
            ModeArg::Edge => Mode::Edge,
            ModeArg::Fog => Mode::Fog,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BenchKind {
    Startup,
    Migration,
    Throughput,
    Decision,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum InspectWhat {
    Tasks,
    Entities,
    Workers,
}

const OK: u8 = 0;
const INVALID: u8 = 1;
const FAILED: u8 = 2;

pub fn run() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("FOGRUNE_LOG")).init();
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Validate { path } => cmd_validate(&path),
        Command::RunScenario {
            path,
            mode,
            seed,
            duration,
            out,
            log_messages,
            timings,
        } => cmd_run_scenario(&path, mode, seed, duration, out, log_messages, timings),
        Command::Bench {
            kind,
            workers,
            tasks,
            launch_ms,
            entities,
            functions,
            out,
        } => cmd_bench(kind, &workers, tasks, launch_ms, entities, functions, out),
        Command::Inspect {
            what,
            scenario,
            mode,
            seed,
            duration,
        } => cmd_inspect(what, scenario, mode, seed, duration),
        Command::RegisterFunc { path, target, out } => cmd_register_func(&path, target, out),
    };
    ExitCode::from(code)
}

fn fail(e: &FogError) -> u8 {
    eprintln!("error: {e}");
    match e {
        FogError::Io(_) => FAILED,
        _ => INVALID,
    }
}

fn report_diagnostics(diags: &[Diagnostic]) -> u8 {
    for d in diags {
        eprintln!("{d}");
    }
    if diags.is_empty() {
        OK
    } else {
        INVALID
    }
}

fn emit(value: &impl serde::Serialize, out: Option<PathBuf>) -> u8 {
    let json = match serde_json::to_string_pretty(value) {
        Ok(j) => j,
        Err(e) => {
            eprintln!("error: {e}");
            return FAILED;
        }
    };
    println!("{json}");
    if let Some(path) = out {
        if let Err(e) = fs::write(&path, format!("{json}\n")) {
            eprintln!("error: cannot write {}: {e}", path.display());
            return FAILED;
        }
    }
    OK
}

fn cmd_validate(path: &Path) -> u8 {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", path.display());
            return FAILED;
        }
    };
    let value: serde_json::Value = match serde_json::from_str(&text) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("{}: not valid JSON: {e}", path.display());
            return INVALID;
        }
    };
    if value.get("nodes").is_some() {
        match serde_json::from_value::<SimConfig>(value) {
            Ok(cfg) => report_diagnostics(&cfg.validate()),
            Err(e) => {
                eprintln!("{}: not a scenario: {e}", path.display());
                INVALID
            }
        }
    } else if value.get("operator").is_some() {
        match serde_json::from_value::<FogFunction>(value) {
            Ok(f) => report_diagnostics(&validate_function(&f, &OperatorRegistry::with_builtins())),
            Err(e) => {
                eprintln!("{}: not a function spec: {e}", path.display());
                INVALID
            }
        }
    } else {
        eprintln!(
            "{}: unrecognized spec (expected a scenario with \"nodes\" or a function with \"operator\")",
            path.display()
        );
        INVALID
    }
}

fn load_scenario(
    path: Option<&Path>,
    mode: Option<ModeArg>,
    seed: Option<u64>,
    duration: Option<u64>,
) -> Result<SimConfig, u8> {
    let mut cfg = match path {
        Some(p) => SimConfig::from_path(p).map_err(|e| fail(&e))?,
        None => SimConfig::fleet(
            mode.map(Mode::from).unwrap_or(Mode::Fog),
            126,
            false,
            seed.unwrap_or(7),
        ),
    };
    if let Some(m) = mode {
        cfg.mode = m.into();
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(d) = duration {
        cfg.duration_s = d;
    }
    Ok(cfg)
}

fn build_cluster(cfg: SimConfig) -> Result<Cluster, u8> {
    Cluster::new(cfg).map_err(|e| fail(&e))
}

fn cmd_run_scenario(
    path: &Path,
    mode: Option<ModeArg>,
    seed: Option<u64>,
    duration: Option<u64>,
    out: Option<PathBuf>,
    log_messages: Option<PathBuf>,
    timings: bool,
) -> u8 {
    let cfg = match load_scenario(Some(path), mode, seed, duration) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let mut cluster = match build_cluster(cfg) {
        Ok(c) => c,
        Err(code) => return code,
    };
    if let Some(log_path) = log_messages {
        match fs::File::create(&log_path) {
            Ok(f) => cluster.log_messages_to(Box::new(BufWriter::new(f))),
            Err(e) => {
                eprintln!("error: cannot create {}: {e}", log_path.display());
                return FAILED;
            }
        }
    }
    cluster.measure_decisions(timings);
    cluster.run();
    emit(&cluster.report(), out)
}

fn cmd_bench(
    kind: BenchKind,
    workers: &[u32],
    tasks: u32,
    launch_ms: u64,
    entities: usize,
    functions: usize,
    out: Option<PathBuf>,
) -> u8 {
    match kind {
        BenchKind::Startup => emit(&bench::startup_bench(), out),
        BenchKind::Migration => emit(&bench::migration_bench(), out),
        BenchKind::Throughput => {
            let rows: Vec<_> = workers
                .iter()
                .map(|&w| bench::scaling_row(w, tasks, launch_ms))
                .collect();
            emit(&rows, out)
        }
        BenchKind::Decision => match bench::decision_bench(entities, functions) {
            Some(stats) => emit(&stats, out),
            None => {
                eprintln!("error: decision bench produced no samples");
                FAILED
            }
        },
        BenchKind::All => emit(&bench::run_benches(true), out),
    }
}

fn cmd_inspect(
    what: InspectWhat,
    scenario: Option<PathBuf>,
    mode: Option<ModeArg>,
    seed: Option<u64>,
    duration: Option<u64>,
) -> u8 {
    let cfg = match load_scenario(scenario.as_deref(), mode, seed, duration) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let mut cluster = match build_cluster(cfg) {
        Ok(c) => c,
        Err(code) => return code,
    };
    cluster.run();
    let state = cluster.orchestrator().deployment_state();
    match what {
        InspectWhat::Tasks => emit(&serde_json::json!({ "functions": state.functions }), None),
        InspectWhat::Workers => emit(&serde_json::json!({ "workers": state.workers }), None),
        InspectWhat::Entities => {
            let mut per_node = serde_json::Map::new();
            for node_id in cluster.node_ids() {
                let broker = cluster.broker(&node_id).expect("listed node");
                let entities: Vec<_> = broker.entities().collect();
                per_node.insert(
                    node_id,
                    serde_json::to_value(entities).unwrap_or_default(),
                );
            }
            emit(&serde_json::json!({ "entities": per_node }), None)
        }
    }
}

fn cmd_register_func(path: &Path, target: Option<PathBuf>, out: Option<PathBuf>) -> u8 {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", path.display());
            return FAILED;
        }
    };
    let function: FogFunction = match serde_json::from_str(&text) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("{}: not a function spec: {e}", path.display());
            return INVALID;
        }
    };
    let diags = validate_function(&function, &OperatorRegistry::with_builtins());
    if !diags.is_empty() {
        return report_diagnostics(&diags);
    }
    let Some(target) = target else {
        // No target: registration is just the normalized spec on stdout.
        return emit(&function, None);
    };
    let mut cfg = match SimConfig::from_path(&target) {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    if cfg.functions.iter().any(|f| f.name == function.name) {
        eprintln!("functions: {} is already registered", function.name);
        return INVALID;
    }
    cfg.functions.push(function.clone());
    let diags = cfg.validate();
    if !diags.is_empty() {
        return report_diagnostics(&diags);
    }
    let dest = out.unwrap_or(target);
    let json = match serde_json::to_string_pretty(&cfg) {
        Ok(j) => j,
        Err(e) => {
            eprintln!("error: {e}");
            return FAILED;
        }
    };
    if let Err(e) = fs::write(&dest, format!("{json}\n")) {
        eprintln!("error: cannot write {}: {e}", dest.display());
        return FAILED;
    }
    let _ = writeln!(std::io::stdout(), "{}", serde_json::json!({
        "registered": function.name,
        "scenario": dest.display().to_string(),
    }));
    OK
}
