//! `fedmesh`: one binary for the whole testbed. Subcommands run in-process
//! simulations, start a physical-mode node or controller, re-render stored
//! run records, and inspect or materialize datasets.
//!
//! Exit codes are a stable contract for harnesses: 0 success, 1 usage or
//! configuration error, 2 run failure, 3 timeout. Logs are key=value lines
//! on standard error, controlled by `FEDMESH_LOG` (error|info|debug);
//! machine-readable output goes only to `--out` files or standard output.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use clap::{Parser, Subcommand};

use fedmesh_core::controller::{
    self, distribute_config, finalize_incomplete, IngestServer, ReportFormat, RunRecord, RunStatus,
};
use fedmesh_core::dataset;
use fedmesh_core::node::{run_node, NodeServices};
use fedmesh_core::protocol::serve_config_once;
use fedmesh_core::scenario::{parse_scenario, ScenarioConfig, TopologyKind};
use fedmesh_core::simulation::{run_simulation, sweep, SimPlan, SimTransport, SweepResult};

const EXIT_OK: u8 = 0;
const EXIT_USAGE: u8 = 1;
const EXIT_RUN_FAILURE: u8 = 2;
const EXIT_TIMEOUT: u8 = 3;

#[derive(Parser)]
#[command(name = "fedmesh", version, about = "Decentralized federated learning testbed")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario (or a seed/topology sweep) in one process.
    Sim {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated master seeds; more than one run becomes a sweep.
        #[arg(long)]
        seeds: Option<String>,
        /// Comma-separated topology kinds (fully,star,ring,random).
        #[arg(long)]
        topologies: Option<String>,
        /// loopback (real sockets) or memory (in-process channels).
        #[arg(long, default_value = "loopback")]
        transport: String,
        /// Telemetry clock speed-up; >= 1. Computation is never skipped.
        #[arg(long = "time-compression", default_value_t = 1.0)]
        time_compression: f64,
        /// Stretch each round to this many simulated milliseconds.
        #[arg(long = "round-ms")]
        round_ms: Option<u64>,
    },
    /// Start a participant daemon: wait for a config, train, report, exit.
    Node {
        /// host:port for the one-shot config server.
        #[arg(long)]
        bind: String,
        #[arg(long = "config-timeout-s", default_value_t = 300)]
        config_timeout_s: u64,
    },
    /// Distribute a scenario to live nodes and collect the run.
    Controller {
        #[arg(long)]
        scenario: PathBuf,
        /// host:port for the metric/summary ingest endpoints.
        #[arg(long)]
        bind: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "deadline-s", default_value_t = 1800)]
        deadline_s: u64,
    },
    /// Re-render a stored run_record.json to standard output.
    Report {
        #[arg(long)]
        record: PathBuf,
        #[arg(long, default_value = "md")]
        format: String,
    },
    /// Dataset utilities.
    Dataset {
        #[command(subcommand)]
        command: DatasetCommand,
    },
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Print sample counts, dimensions, and the label histogram of an
    /// IDX-format dataset directory.
    Inspect {
        #[arg(long = "data-dir")]
        data_dir: PathBuf,
    },
    /// Materialize a synthetic dataset file from a generator spec.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    init_logger();
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Sim {
            scenario,
            out,
            seeds,
            topologies,
            transport,
            time_compression,
            round_ms,
        } => cmd_sim(&scenario, &out, seeds, topologies, &transport, time_compression, round_ms),
        Command::Node { bind, config_timeout_s } => cmd_node(&bind, config_timeout_s),
        Command::Controller { scenario, bind, out, deadline_s } => {
            cmd_controller(&scenario, &bind, &out, deadline_s)
        }
        Command::Report { record, format } => cmd_report(&record, &format),
        Command::Dataset { command } => match command {
            DatasetCommand::Inspect { data_dir } => cmd_dataset_inspect(&data_dir),
            DatasetCommand::Synth { spec, out } => cmd_dataset_synth(&spec, &out),
        },
    };
    ExitCode::from(code)
}

/// key=value logger on stderr, level from FEDMESH_LOG (error|info|debug).
struct KvLogger {
    level: log::LevelFilter,
}

impl log::Log for KvLogger {
    fn enabled(&self, metadata: &log::Metadata) -> bool {
        metadata.level() <= self.level
    }

    fn log(&self, record: &log::Record) {
        if self.enabled(record.metadata()) {
            eprintln!(
                "level={} target={} {}",
                record.level().as_str().to_ascii_lowercase(),
                record.target(),
                record.args()
            );
        }
    }

    fn flush(&self) {}
}

fn init_logger() {
    let level = match std::env::var("FEDMESH_LOG").as_deref() {
        Ok("debug") => log::LevelFilter::Debug,
        Ok("error") => log::LevelFilter::Error,
        _ => log::LevelFilter::Info,
    };
    let _ = log::set_boxed_logger(Box::new(KvLogger { level }));
    log::set_max_level(level);
}

fn load_scenario(path: &Path) -> Result<ScenarioConfig, u8> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("scenario file not found: {}: {e}", path.display());
            return Err(EXIT_USAGE);
        }
    };
    parse_scenario(&text).map_err(|e| {
        eprintln!("{e}");
        EXIT_USAGE
    })
}

fn parse_list<T: std::str::FromStr>(raw: &str, what: &str) -> Result<Vec<T>, u8>
where
    T::Err: std::fmt::Display,
{
    raw.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim().parse::<T>().map_err(|e| {
                eprintln!("bad {what} entry '{s}': {e}");
                EXIT_USAGE
            })
        })
        .collect()
}

fn parse_topology_kind(raw: &str) -> Result<TopologyKind, u8> {
    match raw {
        "fully" => Ok(TopologyKind::Fully),
        "star" => Ok(TopologyKind::Star),
        "ring" => Ok(TopologyKind::Ring),
        "random" => Ok(TopologyKind::Random),
        other => {
            eprintln!("unknown topology '{other}' (fully|star|ring|random)");
            Err(EXIT_USAGE)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_sim(
    scenario_path: &Path,
    out: &Path,
    seeds: Option<String>,
    topologies: Option<String>,
    transport: &str,
    time_compression: f64,
    round_ms: Option<u64>,
) -> u8 {
    let base = match load_scenario(scenario_path) {
        Ok(s) => s,
        Err(code) => return code,
    };
    let transport = match transport {
        "loopback" => SimTransport::Loopback,
        "memory" => SimTransport::InMemory,
        other => {
            eprintln!("unknown transport '{other}' (loopback|memory)");
            return EXIT_USAGE;
        }
    };
    let seeds: Vec<u64> = match seeds {
        Some(raw) => match parse_list(&raw, "seed") {
            Ok(v) => v,
            Err(code) => return code,
        },
        None => vec![base.master_seed],
    };
    let kinds: Vec<TopologyKind> = match topologies {
        Some(raw) => {
            let names: Vec<String> = match parse_list(&raw, "topology") {
                Ok(v) => v,
                Err(code) => return code,
            };
            let mut kinds = Vec::with_capacity(names.len());
            for name in &names {
                match parse_topology_kind(name) {
                    Ok(k) => kinds.push(k),
                    Err(code) => return code,
                }
            }
            kinds
        }
        None => vec![base.topology.kind],
    };

    let mut plans = Vec::new();
    for &kind in &kinds {
        for &seed in &seeds {
            let mut scenario = base.clone();
            scenario.topology.kind = kind;
            scenario.master_seed = seed;
            plans.push(SimPlan {
                scenario,
                time_compression,
                transport,
                round_duration_ms: round_ms,
            });
        }
    }

    if plans.len() == 1 {
        match run_simulation(&plans[0]) {
            Ok((record, _report)) => {
                if let Err(e) = controller::write_run_artifacts(&record, out) {
                    eprintln!("failed writing artifacts: {e}");
                    return EXIT_RUN_FAILURE;
                }
                log::info!("run status={:?} out={}", record.status, out.display());
                status_code(record.status)
            }
            Err(e) => {
                eprintln!("{e}");
                EXIT_USAGE
            }
        }
    } else {
        match sweep(&plans) {
            Ok(result) => {
                if let Err(code) = write_sweep_artifacts(&result, out) {
                    return code;
                }
                let all_ok = result.runs.iter().all(|r| r.status == RunStatus::Complete);
                if all_ok {
                    EXIT_OK
                } else {
                    EXIT_RUN_FAILURE
                }
            }
            Err(e) => {
                eprintln!("{e}");
                EXIT_USAGE
            }
        }
    }
}

fn write_sweep_artifacts(result: &SweepResult, out: &Path) -> Result<(), u8> {
    let write_failure = |e: &dyn std::fmt::Display| {
        eprintln!("failed writing artifacts: {e}");
        EXIT_RUN_FAILURE
    };
    std::fs::create_dir_all(out).map_err(|e| write_failure(&e))?;
    for run in &result.runs {
        let dir = out.join(format!("run_{}_seed{}", run.topology, run.master_seed));
        controller::write_run_artifacts(&run.record, &dir).map_err(|e| write_failure(&e))?;
    }
    std::fs::write(out.join("comparison.csv"), result.comparison_csv())
        .map_err(|e| write_failure(&e))?;
    std::fs::write(out.join("comparison.md"), result.comparison_markdown())
        .map_err(|e| write_failure(&e))?;
    log::info!("sweep complete runs={} out={}", result.runs.len(), out.display());
    Ok(())
}

fn status_code(status: RunStatus) -> u8 {
    match status {
        RunStatus::Complete => EXIT_OK,
        _ => EXIT_RUN_FAILURE,
    }
}

fn cmd_node(bind: &str, config_timeout_s: u64) -> u8 {
    log::info!("node waiting for config on {bind}");
    let assignment = match serve_config_once(bind, Duration::from_secs(config_timeout_s)) {
        Ok(a) => a,
        Err(fedmesh_core::protocol::ProtocolError::ConfigTimeout) => {
            eprintln!("no configuration arrived within {config_timeout_s} s");
            return EXIT_TIMEOUT;
        }
        Err(e) => {
            eprintln!("config server failed: {e}");
            return EXIT_USAGE;
        }
    };
    log::info!(
        "node={} scenario={} starting",
        assignment.node_id,
        assignment.scenario.scenario_name
    );
    let endpoint = assignment
        .scenario
        .participant(assignment.node_id)
        .map(|p| p.metrics_endpoint.clone())
        .unwrap_or_default();
    match run_node(&assignment, NodeServices::physical(endpoint)) {
        Ok(summary) if summary.completed => EXIT_OK,
        Ok(summary) => {
            eprintln!(
                "run failed: {}",
                summary.diagnostic.as_deref().unwrap_or("unknown phase failure")
            );
            EXIT_RUN_FAILURE
        }
        Err(e) => {
            eprintln!("node setup failed: {e}");
            EXIT_USAGE
        }
    }
}

fn cmd_controller(scenario_path: &Path, bind: &str, out: &Path, deadline_s: u64) -> u8 {
    let scenario = match load_scenario(scenario_path) {
        Ok(s) => s,
        Err(code) => return code,
    };
    let record = Arc::new(Mutex::new(RunRecord::new(scenario)));
    let server = match IngestServer::start(bind, Arc::clone(&record)) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("cannot bind ingest endpoints on {bind}: {e}");
            return EXIT_USAGE;
        }
    };
    log::info!("controller ingest endpoints at {}", server.endpoint());

    {
        let mut run = record.lock().expect("record lock");
        if let Err(e) = distribute_config(&mut run, Duration::from_secs(10)) {
            eprintln!("distribution failed: {e}");
            return EXIT_RUN_FAILURE;
        }
        log::info!("configs distributed to {} nodes", run.scenario.participants.len());
    }

    let deadline = Instant::now() + Duration::from_secs(deadline_s);
    loop {
        {
            let run = record.lock().expect("record lock");
            if matches!(run.status, RunStatus::Complete | RunStatus::PartialFailure) {
                break;
            }
        }
        if Instant::now() >= deadline {
            let mut run = record.lock().expect("record lock");
            finalize_incomplete(&mut run);
            break;
        }
        std::thread::sleep(Duration::from_millis(100));
    }

    let run = record.lock().expect("record lock").clone();
    server.stop();
    if let Err(e) = controller::write_run_artifacts(&run, out) {
        eprintln!("failed writing artifacts: {e}");
        return EXIT_RUN_FAILURE;
    }
    log::info!(
        "run status={:?} summaries={} out={}",
        run.status,
        run.summaries.len(),
        out.display()
    );
    status_code(run.status)
}

fn cmd_report(record_path: &Path, format: &str) -> u8 {
    let format: ReportFormat = match format.parse() {
        Ok(f) => f,
        Err(e) => {
            eprintln!("{e}");
            return EXIT_USAGE;
        }
    };
    let text = match std::fs::read_to_string(record_path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("cannot read record {}: {e}", record_path.display());
            return EXIT_USAGE;
        }
    };
    let record: RunRecord = match serde_json::from_str(&text) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("corrupt run record: {e}");
            return EXIT_USAGE;
        }
    };
    match controller::render_report(&record, format) {
        Ok(rendered) => {
            print!("{rendered}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("{e}");
            EXIT_USAGE
        }
    }
}

fn cmd_dataset_inspect(data_dir: &Path) -> u8 {
    match dataset::load_idx_dir(data_dir) {
        Ok((train, test)) => {
            let side = (train.n_features as f64).sqrt() as usize;
            println!(
                "{} train / {} test, {}x{}",
                train.n_samples(),
                test.n_samples(),
                side,
                side
            );
            println!("train label histogram: {:?}", train.label_histogram());
            println!("test label histogram: {:?}", test.label_histogram());
            EXIT_OK
        }
        Err(e) => {
            // Per-file diagnostics: report presence of each expected file.
            eprintln!("cannot load dataset from {}: {e}", data_dir.display());
            for name in dataset::MNIST_FILES {
                let path = data_dir.join(name);
                let status = if path.exists() { "present" } else { "missing" };
                eprintln!("  {name}: {status}");
            }
            EXIT_USAGE
        }
    }
}

#[derive(serde::Deserialize)]
struct SynthFileSpec {
    #[serde(flatten)]
    synthetic: fedmesh_core::scenario::SyntheticSpec,
    #[serde(default)]
    seed: u64,
}

fn cmd_dataset_synth(spec_path: &Path, out: &Path) -> u8 {
    let text = match std::fs::read_to_string(spec_path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("cannot read spec {}: {e}", spec_path.display());
            return EXIT_USAGE;
        }
    };
    let spec: SynthFileSpec = match serde_json::from_str(&text) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("bad synthetic spec: {e}");
            return EXIT_USAGE;
        }
    };
    if spec.synthetic.n_classes < 2 || spec.synthetic.n_features == 0 || spec.synthetic.n_samples == 0 {
        eprintln!("bad synthetic spec: need n_samples >= 1, n_features >= 1, n_classes >= 2");
        return EXIT_USAGE;
    }
    let ds = dataset::gen_synthetic(&spec.synthetic, spec.seed);
    match serde_json::to_vec_pretty(&ds).map_err(std::io::Error::other).and_then(|bytes| {
        if let Some(parent) = out.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        std::fs::write(out, bytes)
    }) {
        Ok(()) => {
            log::info!("wrote {} samples to {}", ds.n_samples(), out.display());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("cannot write {}: {e}", out.display());
            EXIT_RUN_FAILURE
        }
    }
}
