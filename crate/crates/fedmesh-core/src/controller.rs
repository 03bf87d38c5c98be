//! Run orchestration: distribute configurations, ingest telemetry, detect
//! completion, and render the per-node/average results table.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::node::NodeSummary;
use crate::protocol::{self, http, ConfigAck, MetricReport, NodeAssignment, ProtocolError};
use crate::scenario::ScenarioConfig;
use crate::telemetry::integrate_energy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunStatus {
    Pending,
    Running,
    Complete,
    PartialFailure,
    Aborted,
}

/// Controller-side accumulation of everything a run produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub scenario: ScenarioConfig,
    /// Per node, ordered by seq, deduplicated on (node_id, seq).
    pub reports: BTreeMap<u16, Vec<MetricReport>>,
    pub summaries: BTreeMap<u16, NodeSummary>,
    pub status: RunStatus,
    pub started_at_ms: u64,
    pub finished_at_ms: Option<u64>,
    pub warnings: Vec<String>,
    pub rejected_messages: u64,
}

impl RunRecord {
    pub fn new(scenario: ScenarioConfig) -> Self {
        RunRecord {
            scenario,
            reports: BTreeMap::new(),
            summaries: BTreeMap::new(),
            status: RunStatus::Pending,
            started_at_ms: 0,
            finished_at_ms: None,
            warnings: Vec::new(),
            rejected_messages: 0,
        }
    }

    fn is_participant(&self, node_id: u16) -> bool {
        self.scenario.participant(node_id).is_some()
    }
}

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("run is {0:?}, not ready for this operation")]
    NotReady(RunStatus),
    #[error("scenario already distributed (status {0:?})")]
    AlreadyDistributed(RunStatus),
    #[error("distribution to node {node} failed: {message}")]
    DistributionFailed { node: u16, message: String },
    #[error("unknown node id {0}")]
    UnknownNode(u16),
    #[error("run is {0:?}; message rejected")]
    NotRunning(RunStatus),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// A message arriving at the ingest endpoints.
#[derive(Debug, Clone)]
pub enum IngestMessage {
    Metric(MetricReport),
    Summary(NodeSummary),
}

/// Applies one message to the record: deduplicated insertion, summary
/// integrity checking, and completion detection. Commutative over distinct
/// messages; duplicates are no-ops.
pub fn ingest(run: &mut RunRecord, msg: IngestMessage) -> Result<(), ControllerError> {
    // Pending and aborted runs take nothing; late stragglers after
    // completion still merge (set semantics keep ingest commutative).
    if matches!(run.status, RunStatus::Pending | RunStatus::Aborted) {
        return Err(ControllerError::NotRunning(run.status));
    }
    match msg {
        IngestMessage::Metric(report) => {
            if !run.is_participant(report.node_id) {
                run.rejected_messages += 1;
                return Err(ControllerError::UnknownNode(report.node_id));
            }
            let reports = run.reports.entry(report.node_id).or_default();
            match reports.binary_search_by_key(&report.seq, |r| r.seq) {
                Ok(_) => {} // duplicate (node_id, seq): keep the first
                Err(pos) => reports.insert(pos, report),
            }
        }
        IngestMessage::Summary(summary) => {
            if !run.is_participant(summary.node_id) {
                run.rejected_messages += 1;
                return Err(ControllerError::UnknownNode(summary.node_id));
            }
            if run.summaries.contains_key(&summary.node_id) {
                return Ok(()); // duplicate summary: keep the first
            }
            match integrate_energy(&summary.power_log) {
                Ok(expected) => {
                    let denom = expected.abs().max(1e-12);
                    if (summary.energy_j - expected).abs() / denom > 1e-9 {
                        run.warnings.push(format!(
                            "node {} summary energy {} J disagrees with its power log ({} J)",
                            summary.node_id, summary.energy_j, expected
                        ));
                    }
                }
                Err(e) => run.warnings.push(format!(
                    "node {} power log fails integrity check: {e}",
                    summary.node_id
                )),
            }
            run.summaries.insert(summary.node_id, summary);
            if run.summaries.len() == run.scenario.participants.len() {
                let all_completed = run.summaries.values().all(|s| s.completed);
                run.status = if all_completed {
                    RunStatus::Complete
                } else {
                    RunStatus::PartialFailure
                };
                run.finished_at_ms = Some(now_ms());
            }
        }
    }
    Ok(())
}

/// Marks a run that missed its deadline or lost nodes.
pub fn finalize_incomplete(run: &mut RunRecord) {
    if run.status == RunStatus::Running {
        run.status = RunStatus::PartialFailure;
        run.finished_at_ms = Some(now_ms());
        run.warnings.push(format!(
            "finalized with {}/{} summaries",
            run.summaries.len(),
            run.scenario.participants.len()
        ));
    }
}

fn now_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// POSTs each participant's assignment to its config server, three attempts
/// per node. All acks move the run to RUNNING; any failure aborts the run
/// with no partial distribution.
pub fn distribute_config(
    run: &mut RunRecord,
    timeout: Duration,
) -> Result<BTreeMap<u16, ConfigAck>, ControllerError> {
    if run.status != RunStatus::Pending {
        return Err(ControllerError::AlreadyDistributed(run.status));
    }
    let mut acks = BTreeMap::new();
    for participant in run.scenario.participants.clone() {
        let assignment = NodeAssignment::for_node(&run.scenario, participant.node_id);
        let mut last_err = String::new();
        let mut delivered = None;
        for attempt in 0..3 {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(200));
            }
            match protocol::post_config(&participant.host, participant.config_port, &assignment, timeout) {
                Ok(ack) => {
                    delivered = Some(ack);
                    break;
                }
                Err(e) => last_err = e.to_string(),
            }
        }
        match delivered {
            Some(ack) => {
                acks.insert(participant.node_id, ack);
            }
            None => {
                run.status = RunStatus::Aborted;
                return Err(ControllerError::DistributionFailed {
                    node: participant.node_id,
                    message: last_err,
                });
            }
        }
    }
    run.status = RunStatus::Running;
    run.started_at_ms = now_ms();
    Ok(acks)
}

/// One row of the results table; `node_id` is `None` on the average row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub node_id: Option<u16>,
    pub avg_f1: f64,
    pub avg_cpu_pct: f64,
    pub avg_ram_pct: f64,
    pub net_traffic_mb: f64,
    pub avg_power_w: f64,
    pub energy_j: f64,
}

/// Per-node rows plus their arithmetic mean, in the column set of the
/// result summaries this testbed reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario_name: String,
    pub rows: Vec<ReportRow>,
    pub average: ReportRow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "md" | "markdown" => Ok(ReportFormat::Markdown),
            "json" => Ok(ReportFormat::Json),
            other => Err(format!("unknown format '{other}' (csv|md|json)")),
        }
    }
}

fn round_to(x: f64, decimals: i32) -> f64 {
    let factor = 10f64.powi(decimals);
    (x * factor).round() / factor
}

/// Builds the table from a finished run. Node values are quantized per
/// column (F1 to 4 decimals, traffic to 1, power to 3, energy to 1, CPU and
/// RAM to 1); the average row is the exact arithmetic mean of the node rows
/// so the mean relation holds bit-for-bit in every rendering.
pub fn build_report(run: &RunRecord) -> Result<RunReport, ControllerError> {
    if !matches!(run.status, RunStatus::Complete | RunStatus::PartialFailure) {
        return Err(ControllerError::NotReady(run.status));
    }
    let mut rows = Vec::new();
    for (node_id, summary) in &run.summaries {
        let node_reports = run.reports.get(node_id);
        let (avg_cpu, avg_ram) = match node_reports {
            Some(list) if !list.is_empty() => {
                let n = list.len() as f64;
                (
                    list.iter().map(|r| r.cpu_pct).sum::<f64>() / n,
                    list.iter().map(|r| r.ram_pct).sum::<f64>() / n,
                )
            }
            _ => (0.0, 0.0),
        };
        rows.push(ReportRow {
            node_id: Some(*node_id),
            avg_f1: round_to(summary.f1_final, 4),
            avg_cpu_pct: round_to(avg_cpu, 1),
            avg_ram_pct: round_to(avg_ram, 1),
            net_traffic_mb: round_to(
                (summary.total_bytes_sent + summary.total_bytes_recv) as f64 / (1 << 20) as f64,
                1,
            ),
            avg_power_w: round_to(summary.avg_power_w, 3),
            energy_j: round_to(summary.energy_j, 1),
        });
    }
    let n = rows.len().max(1) as f64;
    let average = ReportRow {
        node_id: None,
        avg_f1: rows.iter().map(|r| r.avg_f1).sum::<f64>() / n,
        avg_cpu_pct: rows.iter().map(|r| r.avg_cpu_pct).sum::<f64>() / n,
        avg_ram_pct: rows.iter().map(|r| r.avg_ram_pct).sum::<f64>() / n,
        net_traffic_mb: rows.iter().map(|r| r.net_traffic_mb).sum::<f64>() / n,
        avg_power_w: rows.iter().map(|r| r.avg_power_w).sum::<f64>() / n,
        energy_j: rows.iter().map(|r| r.energy_j).sum::<f64>() / n,
    };
    Ok(RunReport {
        scenario_name: run.scenario.scenario_name.clone(),
        rows,
        average,
    })
}

/// Renders a finished run in the requested format. All formats print the
/// same stored numbers.
pub fn render_report(run: &RunRecord, format: ReportFormat) -> Result<String, ControllerError> {
    let report = build_report(run)?;
    Ok(render(&report, format))
}

pub fn render(report: &RunReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => {
            let mut out = String::from("node_id,avg_f1,avg_cpu_pct,avg_ram_pct,net_traffic_mb,avg_power_w,energy_j\n");
            for row in report.rows.iter().chain(std::iter::once(&report.average)) {
                let id = row
                    .node_id
                    .map(|i| i.to_string())
                    .unwrap_or_else(|| "average".into());
                out.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    id, row.avg_f1, row.avg_cpu_pct, row.avg_ram_pct, row.net_traffic_mb, row.avg_power_w, row.energy_j
                ));
            }
            out
        }
        ReportFormat::Markdown => {
            let mut out = format!("# Run report: {}\n\n", report.scenario_name);
            out.push_str("| node | avg F1 | CPU % | RAM % | net traffic (MB) | power (W) | energy (J) |\n");
            out.push_str("|------|--------|-------|-------|------------------|-----------|------------|\n");
            for row in report.rows.iter().chain(std::iter::once(&report.average)) {
                let id = row
                    .node_id
                    .map(|i| i.to_string())
                    .unwrap_or_else(|| "average".into());
                out.push_str(&format!(
                    "| {} | {} | {} | {} | {} | {} | {} |\n",
                    id, row.avg_f1, row.avg_cpu_pct, row.avg_ram_pct, row.net_traffic_mb, row.avg_power_w, row.energy_j
                ));
            }
            out
        }
        ReportFormat::Json => serde_json::to_string_pretty(report).expect("report serializes"),
    }
}

/// Writes the full artifact set for a finished run into `out_dir`:
/// `run_report.{csv,md,json}`, the raw `run_record.json`, and one power log
/// CSV per node.
pub fn write_run_artifacts(run: &RunRecord, out_dir: &std::path::Path) -> Result<(), ControllerError> {
    std::fs::create_dir_all(out_dir)?;
    for (format, name) in [
        (ReportFormat::Csv, "run_report.csv"),
        (ReportFormat::Markdown, "run_report.md"),
        (ReportFormat::Json, "run_report.json"),
    ] {
        std::fs::write(out_dir.join(name), render_report(run, format)?)?;
    }
    std::fs::write(out_dir.join("run_record.json"), serde_json::to_vec_pretty(run)?)?;
    for (node_id, summary) in &run.summaries {
        let path = out_dir.join(format!("power_node{node_id}.csv"));
        crate::telemetry::write_power_log(&summary.power_log, &path)
            .map_err(|e| ControllerError::Io(std::io::Error::other(e.to_string())))?;
    }
    Ok(())
}

/// The ingest service: POST /metrics, POST /summary, GET /health.
pub struct IngestServer {
    addr: SocketAddr,
    record: Arc<Mutex<RunRecord>>,
    stop: Arc<AtomicBool>,
    handle: Option<std::thread::JoinHandle<()>>,
}

impl IngestServer {
    pub fn start(bind: &str, record: Arc<Mutex<RunRecord>>) -> Result<Self, ControllerError> {
        let listener = std::net::TcpListener::bind(bind)?;
        let addr = listener.local_addr()?;
        listener.set_nonblocking(true)?;
        let stop = Arc::new(AtomicBool::new(false));
        let stop_flag = Arc::clone(&stop);
        let shared = Arc::clone(&record);
        let handle = std::thread::Builder::new()
            .name("ingest-server".into())
            .spawn(move || {
                while !stop_flag.load(Ordering::Acquire) {
                    match listener.accept() {
                        Ok((stream, _)) => {
                            let record = Arc::clone(&shared);
                            std::thread::spawn(move || handle_connection(stream, record));
                        }
                        Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                            std::thread::sleep(Duration::from_millis(2));
                        }
                        Err(e) => {
                            log::warn!("ingest accept failed: {e}");
                            std::thread::sleep(Duration::from_millis(50));
                        }
                    }
                }
            })?;
        Ok(IngestServer {
            addr,
            record,
            stop,
            handle: Some(handle),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Base URL nodes should use as their metrics endpoint.
    pub fn endpoint(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn record(&self) -> Arc<Mutex<RunRecord>> {
        Arc::clone(&self.record)
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::Release);
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

impl Drop for IngestServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn handle_connection(mut stream: std::net::TcpStream, record: Arc<Mutex<RunRecord>>) {
    stream.set_read_timeout(Some(Duration::from_secs(10))).ok();
    stream.set_write_timeout(Some(Duration::from_secs(10))).ok();
    let request = match http::read_request(&mut stream) {
        Ok(r) => r,
        Err(e) => {
            let _ = http::write_response(&mut stream, 400, "text/plain", format!("bad request: {e}").as_bytes());
            return;
        }
    };
    let (status, content_type, body): (u16, &str, Vec<u8>) = match (request.method.as_str(), request.path.as_str()) {
        ("GET", "/health") => (200, "text/plain", b"ok".to_vec()),
        ("POST", "/metrics") => match serde_json::from_slice::<MetricReport>(&request.body) {
            Ok(report) => {
                let mut run = record.lock().expect("ingest lock");
                match ingest(&mut run, IngestMessage::Metric(report)) {
                    Ok(()) => (200, "application/json", b"{\"status\":\"ok\"}".to_vec()),
                    Err(ControllerError::NotRunning(s)) => {
                        (409, "text/plain", format!("run is {s:?}").into_bytes())
                    }
                    Err(e) => (400, "text/plain", e.to_string().into_bytes()),
                }
            }
            Err(e) => (400, "text/plain", format!("bad metric body: {e}").into_bytes()),
        },
        ("POST", "/summary") => match serde_json::from_slice::<NodeSummary>(&request.body) {
            Ok(summary) => {
                let mut run = record.lock().expect("ingest lock");
                match ingest(&mut run, IngestMessage::Summary(summary)) {
                    Ok(()) => (200, "application/json", b"{\"status\":\"ok\"}".to_vec()),
                    Err(ControllerError::NotRunning(s)) => {
                        (409, "text/plain", format!("run is {s:?}").into_bytes())
                    }
                    Err(e) => (400, "text/plain", e.to_string().into_bytes()),
                }
            }
            Err(e) => (400, "text/plain", format!("bad summary body: {e}").into_bytes()),
        },
        (_, "/metrics" | "/summary" | "/health") => (405, "text/plain", b"method not allowed".to_vec()),
        _ => (404, "text/plain", b"not found".to_vec()),
    };
    let _ = http::write_response(&mut stream, status, content_type, &body);
}
