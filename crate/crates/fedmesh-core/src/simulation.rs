//! Single-process scenario execution: one controller and N node runtimes
//! under one roof, producing the same artifacts as a physical run,
//! deterministically in the scenario seeds.

use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{
    self, build_report, finalize_incomplete, ControllerError, IngestMessage, RunRecord, RunReport,
    RunStatus,
};
use crate::dataset::DatasetError;
use crate::node::{
    prepare_data, run_node, MetricSink, NodeError, NodeServices, ResourceMode, RoundSchedule,
    DEFAULT_EXCHANGE_TIMEOUT,
};
use crate::protocol::{MetricReport, NodeAssignment, NodeSummary, ProtocolError};
use crate::scenario::{validate_scenario, ScenarioConfig, TopologyKind, Violation};
use crate::telemetry::ScaledClock;
use crate::topology::{build_topology, TopologyError};
use crate::transport::{build_mem_mesh, PeerTransport, TcpTransport};

/// How simulated nodes talk to each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SimTransport {
    /// Real TCP sockets over 127.0.0.1 with ephemeral ports; exercises the
    /// full protocol stack. The default.
    Loopback,
    /// In-process channels carrying the same encoded frames; fast path for
    /// property tests.
    InMemory,
}

/// A runnable simulation: scenario plus the knobs that stand in for the
/// physical deployment.
#[derive(Debug, Clone)]
pub struct SimPlan {
    pub scenario: ScenarioConfig,
    /// Divides telemetry intervals and simulated phase durations; >= 1.
    /// Computation always runs at full speed.
    pub time_compression: f64,
    pub transport: SimTransport,
    /// When set, each round is stretched to this many simulated
    /// milliseconds, emulating device-scale round times in the telemetry.
    pub round_duration_ms: Option<u64>,
}

impl SimPlan {
    pub fn new(scenario: ScenarioConfig) -> Self {
        SimPlan {
            scenario,
            time_compression: 1.0,
            transport: SimTransport::Loopback,
            round_duration_ms: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidScenario(Vec<Violation>),
    #[error("bad plan: {0}")]
    BadPlan(String),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    NodeSetup(#[from] NodeError),
    #[error("node runtime failed: {0}")]
    Node(String),
    #[error("sweep plans must share dataset and model")]
    MixedDatasets,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Feeds reports straight into the shared record; the in-memory counterpart
/// of the HTTP ingest endpoints.
struct DirectSink {
    record: Arc<Mutex<RunRecord>>,
}

impl MetricSink for DirectSink {
    fn post_metrics(&self, report: &MetricReport) -> Result<(), ProtocolError> {
        let mut run = self.record.lock().expect("record lock");
        controller::ingest(&mut run, IngestMessage::Metric(report.clone()))
            .map_err(|e| ProtocolError::Remote { status: 400, body: e.to_string() })
    }

    fn post_summary(&self, summary: &NodeSummary) -> Result<(), ProtocolError> {
        let mut run = self.record.lock().expect("record lock");
        controller::ingest(&mut run, IngestMessage::Summary(summary.clone()))
            .map_err(|e| ProtocolError::Remote { status: 400, body: e.to_string() })
    }
}

/// Runs the whole scenario in-process and returns the collected record and
/// its rendered table.
pub fn run_simulation(plan: &SimPlan) -> Result<(RunRecord, RunReport), SimError> {
    let scenario = &plan.scenario;
    let violations = validate_scenario(scenario);
    if !violations.is_empty() {
        return Err(SimError::InvalidScenario(violations));
    }
    if !(plan.time_compression >= 1.0) {
        return Err(SimError::BadPlan(format!(
            "time_compression must be >= 1, got {}",
            plan.time_compression
        )));
    }
    let n = scenario.n_nodes();
    let graph = build_topology(&scenario.topology, n)?;
    let data = Arc::new(prepare_data(scenario)?);
    let clock = Arc::new(ScaledClock::new(plan.time_compression));
    let schedule = plan.round_duration_ms.map(RoundSchedule::new);

    let mut record = RunRecord::new(scenario.clone());
    record.status = RunStatus::Running;
    record.started_at_ms = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0);
    let record = Arc::new(Mutex::new(record));

    // Loopback mode stands up the real ingest server and real sockets;
    // in-memory mode wires channels and a direct sink. The learning
    // computation is identical either way.
    let mut handles = Vec::with_capacity(n as usize);
    let _ingest_server; // keep the server alive for the whole run
    match plan.transport {
        SimTransport::InMemory => {
            _ingest_server = None::<controller::IngestServer>;
            let mut mesh = build_mem_mesh(&graph)?;
            for id in (0..n).rev() {
                let transport = mesh.remove(id as usize);
                let assignment = NodeAssignment::for_node(scenario, id);
                let services = NodeServices {
                    transport: Box::new(move |_, _| {
                        Ok(Box::new(transport) as Box<dyn PeerTransport>)
                    }),
                    sink: Arc::new(DirectSink { record: Arc::clone(&record) }),
                    clock: clock.clone(),
                    data: Some(Arc::clone(&data)),
                    schedule,
                    resources: ResourceMode::Simulated { noise_scale: 1.0 },
                    exchange_timeout: DEFAULT_EXCHANGE_TIMEOUT,
                };
                handles.push(spawn_node(assignment, services));
            }
        }
        SimTransport::Loopback => {
            let server = controller::IngestServer::start("127.0.0.1:0", Arc::clone(&record))?;
            let endpoint = server.endpoint();
            // Reserve ephemeral peer ports up front, then rewrite the
            // scenario's participant table to loopback addresses.
            let mut listeners = Vec::with_capacity(n as usize);
            let mut runtime_scenario = scenario.clone();
            for (i, p) in runtime_scenario.participants.iter_mut().enumerate() {
                let listener = std::net::TcpListener::bind("127.0.0.1:0")?;
                p.host = "127.0.0.1".into();
                p.peer_port = listener.local_addr()?.port();
                // Dummy distinct config ports in the privileged range; the
                // simulation never opens them.
                p.config_port = 1 + i as u16;
                p.metrics_endpoint = endpoint.clone();
                listeners.push(listener);
            }
            for id in (0..n).rev() {
                let listener = listeners.remove(id as usize);
                let assignment = NodeAssignment {
                    node_id: id,
                    seed: runtime_scenario.node_seed(id),
                    scenario: runtime_scenario.clone(),
                };
                let services = NodeServices {
                    transport: Box::new(move |a, g| {
                        TcpTransport::connect_with_listener(listener, a, g, Duration::from_secs(60))
                            .map(|t| Box::new(t) as Box<dyn PeerTransport>)
                    }),
                    sink: Arc::new(crate::node::HttpSink { endpoint: endpoint.clone() }),
                    clock: clock.clone(),
                    data: Some(Arc::clone(&data)),
                    schedule,
                    resources: ResourceMode::Simulated { noise_scale: 1.0 },
                    exchange_timeout: DEFAULT_EXCHANGE_TIMEOUT,
                };
                handles.push(spawn_node(assignment, services));
            }
            _ingest_server = Some(server);
        }
    }

    let mut node_errors = Vec::new();
    for handle in handles {
        match handle.join() {
            Ok(Ok(_summary)) => {}
            Ok(Err(e)) => node_errors.push(e.to_string()),
            Err(_) => node_errors.push("node thread panicked".into()),
        }
    }

    let mut run = record.lock().expect("record lock").clone();
    drop(record);
    for err in &node_errors {
        run.warnings.push(format!("node runtime error: {err}"));
    }
    finalize_incomplete(&mut run);
    let report = build_report(&run)?;
    Ok((run, report))
}

fn spawn_node(
    assignment: NodeAssignment,
    services: NodeServices,
) -> std::thread::JoinHandle<Result<NodeSummary, NodeError>> {
    std::thread::Builder::new()
        .name(format!("node-{}", assignment.node_id))
        .spawn(move || run_node(&assignment, services))
        .expect("spawn node thread")
}

/// One sweep entry: the plan's identifying knobs plus its results.
#[derive(Debug, Clone)]
pub struct SweepRun {
    pub scenario_name: String,
    pub topology: TopologyKind,
    pub master_seed: u64,
    pub status: RunStatus,
    pub mean_f1: f64,
    pub record: RunRecord,
    pub report: RunReport,
}

/// All runs of a sweep, in input order.
#[derive(Debug, Clone)]
pub struct SweepResult {
    pub runs: Vec<SweepRun>,
}

impl SweepResult {
    /// Indices of `runs` ordered by mean F1, best first.
    pub fn ranking(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.runs.len()).collect();
        order.sort_by(|&a, &b| {
            self.runs[b]
                .mean_f1
                .partial_cmp(&self.runs[a].mean_f1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        order
    }

    /// Cross-plan comparison table, best mean F1 first.
    pub fn comparison_csv(&self) -> String {
        let mut out = String::from("scenario,topology,master_seed,status,mean_f1,mean_traffic_mb,mean_energy_j\n");
        for &i in &self.ranking() {
            let run = &self.runs[i];
            out.push_str(&format!(
                "{},{},{},{:?},{},{},{}\n",
                run.scenario_name,
                run.topology,
                run.master_seed,
                run.status,
                run.mean_f1,
                run.report.average.net_traffic_mb,
                run.report.average.energy_j,
            ));
        }
        out
    }

    pub fn comparison_markdown(&self) -> String {
        let mut out = String::from(
            "| scenario | topology | seed | status | mean F1 | traffic (MB) | energy (J) |\n\
             |----------|----------|------|--------|---------|--------------|------------|\n",
        );
        for &i in &self.ranking() {
            let run = &self.runs[i];
            out.push_str(&format!(
                "| {} | {} | {} | {:?} | {} | {} | {} |\n",
                run.scenario_name,
                run.topology,
                run.master_seed,
                run.status,
                run.mean_f1,
                run.report.average.net_traffic_mb,
                run.report.average.energy_j,
            ));
        }
        out
    }
}

/// Runs every plan and collects a comparison. Plans must share the dataset
/// and model (they differ in topology and seed).
pub fn sweep(plans: &[SimPlan]) -> Result<SweepResult, SimError> {
    let first = plans.first().ok_or_else(|| SimError::BadPlan("no plans".into()))?;
    for plan in plans {
        if plan.scenario.dataset != first.scenario.dataset || plan.scenario.model != first.scenario.model {
            return Err(SimError::MixedDatasets);
        }
    }
    let mut runs = Vec::with_capacity(plans.len());
    for plan in plans {
        let (record, report) = run_simulation(plan)?;
        runs.push(SweepRun {
            scenario_name: plan.scenario.scenario_name.clone(),
            topology: plan.scenario.topology.kind,
            master_seed: plan.scenario.master_seed,
            status: record.status,
            mean_f1: report.average.avg_f1,
            record,
            report,
        });
    }
    Ok(SweepResult { runs })
}
