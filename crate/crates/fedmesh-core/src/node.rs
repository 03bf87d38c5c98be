//! The participant runtime: receive a configuration, connect to topology
//! neighbors, run synchronous federation rounds (train, exchange, FedAvg
//! aggregate), sample telemetry throughout, and deliver the final summary.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, AtomicU8, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{self, Dataset, DatasetError, Partition};
use crate::model::{
    deserialize_params, evaluate, init_model, serialize_params, train_epochs, ModelError,
    ModelParams,
};
use crate::protocol::{MetricReport, NodeAssignment, ProtocolError};
use crate::scenario::{MeterSpec, ModelSpec, ScenarioConfig};
use crate::seeds::{self, derive_seed, fnv1a64};
use crate::telemetry::{
    build_meter, Activity, Clock, OsResources, ResourceSample, SimulatedResources, TelemetryError,
    WallClock,
};
use crate::topology::{build_topology, neighbors, TopologyError, TopologyGraph};
use crate::transport::PeerTransport;

pub use crate::protocol::{NodeSummary, RoundOutcome};

pub type NodeId = u16;

/// Default barrier timeout: how long a node waits on a missing neighbor
/// model before declaring the round failed.
pub const DEFAULT_EXCHANGE_TIMEOUT: Duration = Duration::from_secs(120);

/// Share of a scheduled round slot spent in the TRAINING phase; the rest is
/// exchange/aggregate idle. 0.55 puts the run-average simulated CPU in the
/// mid-twenties, the load profile of the slow edge devices being modeled.
pub const TRAINING_PHASE_FRACTION: f64 = 0.55;

#[derive(Debug, Error)]
pub enum NodeError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("node {0} is not a participant")]
    UnknownParticipant(u16),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
    #[error("illegal phase transition {from:?} -> {to:?}")]
    IllegalTransition { from: NodePhase, to: NodePhase },
    #[error("round {round}: timed out waiting for model from node {peer}")]
    NeighborTimeout { peer: NodeId, round: u32 },
    #[error("round {round}: node {peer} closed before sending its model")]
    PeerClosed { peer: NodeId, round: u32 },
    #[error("connection to node {peer} failed: {message}")]
    PeerConnection { peer: NodeId, message: String },
    #[error("node {0} is not a neighbor")]
    UnknownPeer(NodeId),
    #[error("no message arrived in time")]
    RecvTimeout,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("aggregation weights: {0}")]
    AggregationWeights(String),
    #[error("aggregation weight sum must be positive")]
    ZeroWeightSum,
}

/// Lifecycle phases. Legal transitions: IDLE -> CONFIGURED -> CONNECTING ->
/// (TRAINING -> EXCHANGING -> AGGREGATING) x rounds -> REPORTING -> DONE,
/// plus any -> FAILED.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodePhase {
    Idle,
    Configured,
    Connecting,
    Training,
    Exchanging,
    Aggregating,
    Reporting,
    Done,
    Failed,
}

impl NodePhase {
    pub fn can_transition(self, next: NodePhase) -> bool {
        use NodePhase::*;
        if next == Failed {
            return self != Done;
        }
        matches!(
            (self, next),
            (Idle, Configured)
                | (Configured, Connecting)
                | (Connecting, Training)
                | (Training, Exchanging)
                | (Exchanging, Aggregating)
                | (Aggregating, Training)
                | (Aggregating, Reporting)
                | (Connecting, Reporting)
                | (Reporting, Done)
        )
    }

    fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn activity(self) -> Activity {
        match self {
            NodePhase::Training => Activity::Training,
            _ => Activity::Idle,
        }
    }
}

fn phase_from_u8(v: u8) -> NodePhase {
    use NodePhase::*;
    match v {
        0 => Idle,
        1 => Configured,
        2 => Connecting,
        3 => Training,
        4 => Exchanging,
        5 => Aggregating,
        6 => Reporting,
        7 => Done,
        _ => Failed,
    }
}

/// Enforces the phase machine and mirrors the current phase into an atomic
/// the telemetry sampler reads.
pub struct PhaseTracker {
    current: NodePhase,
    shared: Arc<AtomicU8>,
}

impl PhaseTracker {
    pub fn new() -> Self {
        PhaseTracker {
            current: NodePhase::Idle,
            shared: Arc::new(AtomicU8::new(NodePhase::Idle.as_u8())),
        }
    }

    pub fn shared(&self) -> Arc<AtomicU8> {
        Arc::clone(&self.shared)
    }

    pub fn current(&self) -> NodePhase {
        self.current
    }

    pub fn transition(&mut self, next: NodePhase) -> Result<(), NodeError> {
        if !self.current.can_transition(next) {
            return Err(NodeError::IllegalTransition {
                from: self.current,
                to: next,
            });
        }
        log::debug!("phase {:?} -> {next:?}", self.current);
        self.current = next;
        self.shared.store(next.as_u8(), Ordering::Release);
        Ok(())
    }
}

impl Default for PhaseTracker {
    fn default() -> Self {
        Self::new()
    }
}

/// Running totals of MODEL-frame bytes on the wire, shared with the
/// telemetry sampler. Control frames (HELLO/BYE) are not counted: traffic
/// figures track model exchange, and the closed form
/// `rounds x degree x frame_size` must hold exactly.
#[derive(Debug, Default)]
pub struct TrafficCounters {
    pub sent: AtomicU64,
    pub recv: AtomicU64,
}

/// FedAvg: element-wise weighted mean over the node's own parameters and
/// every received set. `weights[0]` belongs to `own`, then one weight per
/// received model in order.
pub fn aggregate(
    own: &ModelParams,
    received: &[ModelParams],
    weights: &[f64],
) -> Result<ModelParams, NodeError> {
    if weights.len() != 1 + received.len() {
        return Err(NodeError::AggregationWeights(format!(
            "{} weights for {} models",
            weights.len(),
            1 + received.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0)) {
        return Err(NodeError::AggregationWeights(format!(
            "negative or non-finite weight {w}"
        )));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(NodeError::ZeroWeightSum);
    }
    for other in received {
        if other.arch_digest != own.arch_digest {
            return Err(NodeError::Model(ModelError::IncompatibleArchitecture {
                expected: own.arch_digest,
                got: other.arch_digest,
            }));
        }
    }
    // Mean of equals is the value itself; skip the float round trip so the
    // identity holds bit-exactly.
    if received.iter().all(|m| m.values == own.values) {
        return Ok(own.clone());
    }
    let mut values = vec![0.0f64; own.values.len()];
    for (acc, v) in values.iter_mut().zip(&own.values) {
        *acc = weights[0] * v;
    }
    for (model, &w) in received.iter().zip(&weights[1..]) {
        for (acc, v) in values.iter_mut().zip(&model.values) {
            *acc += w * v;
        }
    }
    for acc in values.iter_mut() {
        *acc /= total;
    }
    Ok(ModelParams {
        arch: own.arch.clone(),
        values,
        arch_digest: own.arch_digest,
    })
}

/// Buffers models that arrive for rounds we have not reached yet.
#[derive(Default)]
pub struct RoundInbox {
    buffered: BTreeMap<u32, BTreeMap<NodeId, ModelParams>>,
}

impl RoundInbox {
    fn take_round(&mut self, round: u32) -> BTreeMap<NodeId, ModelParams> {
        self.buffered.remove(&round).unwrap_or_default()
    }

    fn buffer(&mut self, round: u32, peer: NodeId, params: ModelParams) {
        self.buffered.entry(round).or_default().insert(peer, params);
    }
}

/// One synchronous exchange: send this round's parameters to every
/// neighbor, then block until every neighbor's parameters for this round
/// have arrived. Models for future rounds are buffered, never dropped.
pub fn exchange_round(
    transport: &mut dyn PeerTransport,
    arch: &ModelSpec,
    round: u32,
    params: &ModelParams,
    inbox: &mut RoundInbox,
    timeout: Duration,
    counters: &TrafficCounters,
) -> Result<BTreeMap<NodeId, ModelParams>, NodeError> {
    let payload = serialize_params(params);
    let my_id = transport.my_id();
    let neighbor_ids = transport.neighbor_ids().to_vec();
    for &peer in &neighbor_ids {
        let msg = crate::protocol::PeerMessage::Model {
            round,
            node_id: my_id,
            params_payload: payload.clone(),
        };
        transport.send(peer, &msg)?;
        counters.sent.fetch_add(msg.wire_size(), Ordering::Relaxed);
    }

    let mut got = inbox.take_round(round);
    got.retain(|peer, _| neighbor_ids.contains(peer));
    let deadline = Instant::now() + timeout;
    while got.len() < neighbor_ids.len() {
        let remaining = deadline.saturating_duration_since(Instant::now());
        if remaining.is_zero() {
            let missing = neighbor_ids
                .iter()
                .find(|p| !got.contains_key(p))
                .copied()
                .unwrap_or(my_id);
            return Err(NodeError::NeighborTimeout { peer: missing, round });
        }
        match transport.recv(remaining) {
            Ok((conn_peer, crate::protocol::PeerMessage::Model { round: r, node_id, params_payload })) => {
                let msg_size = 4 + 1 + 4 + 2 + params_payload.len() as u64;
                counters.recv.fetch_add(msg_size, Ordering::Relaxed);
                let sender = if node_id == conn_peer {
                    node_id
                } else {
                    log::warn!("frame sender {node_id} differs from connection peer {conn_peer}");
                    node_id
                };
                let model = deserialize_params(arch, &params_payload)?;
                if r == round {
                    if neighbor_ids.contains(&sender) {
                        got.insert(sender, model);
                    }
                } else if r > round {
                    inbox.buffer(r, sender, model);
                } else {
                    log::debug!("ignoring stale round {r} model from node {sender}");
                }
            }
            Ok((peer, crate::protocol::PeerMessage::Bye)) => {
                if neighbor_ids.contains(&peer) && !got.contains_key(&peer) {
                    return Err(NodeError::PeerClosed { peer, round });
                }
            }
            Ok((_, crate::protocol::PeerMessage::Hello { .. })) => {}
            Err(NodeError::RecvTimeout) => {}
            Err(NodeError::PeerConnection { peer, message }) => {
                if neighbor_ids.contains(&peer) && !got.contains_key(&peer) {
                    return Err(NodeError::PeerConnection { peer, message });
                }
            }
            Err(e) => return Err(e),
        }
    }
    Ok(got)
}

/// Where telemetry reports go.
pub trait MetricSink: Send + Sync {
    fn post_metrics(&self, report: &MetricReport) -> Result<(), ProtocolError>;
    fn post_summary(&self, summary: &NodeSummary) -> Result<(), ProtocolError>;
}

/// HTTP delivery to the controller's ingest endpoints.
pub struct HttpSink {
    pub endpoint: String,
}

impl MetricSink for HttpSink {
    fn post_metrics(&self, report: &MetricReport) -> Result<(), ProtocolError> {
        crate::protocol::post_metrics(&self.endpoint, report)
    }

    fn post_summary(&self, summary: &NodeSummary) -> Result<(), ProtocolError> {
        crate::protocol::post_summary(&self.endpoint, summary)
    }
}

/// Swallows reports; for tests and detached runs.
pub struct NullSink;

impl MetricSink for NullSink {
    fn post_metrics(&self, _report: &MetricReport) -> Result<(), ProtocolError> {
        Ok(())
    }

    fn post_summary(&self, _summary: &NodeSummary) -> Result<(), ProtocolError> {
        Ok(())
    }
}

/// Deterministically prepared data for one scenario: the train/test pair
/// and the per-node IID shards. Every node computes the same value from the
/// same scenario, so processes need not ship datasets around.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Dataset,
    pub test: Dataset,
    pub partition: Partition,
}

pub fn prepare_data(cfg: &ScenarioConfig) -> Result<PreparedData, DatasetError> {
    let (train, test) = dataset::load_for_scenario(&cfg.dataset, cfg.master_seed)?;
    let partition = dataset::partition_iid(
        train.n_samples(),
        cfg.participants.len(),
        derive_seed(cfg.master_seed, seeds::tags::PARTITION),
    )?;
    Ok(PreparedData {
        train,
        test,
        partition,
    })
}

/// Stretches rounds to a fixed simulated duration so telemetry reflects
/// device-scale timing even when the actual computation is fast.
#[derive(Debug, Clone, Copy)]
pub struct RoundSchedule {
    pub round_duration_ms: u64,
    pub training_fraction: f64,
}

impl RoundSchedule {
    pub fn new(round_duration_ms: u64) -> Self {
        RoundSchedule {
            round_duration_ms,
            training_fraction: TRAINING_PHASE_FRACTION,
        }
    }
}

/// CPU/RAM source selection for the sampler.
pub enum ResourceMode {
    Simulated { noise_scale: f64 },
    Os,
}

pub type TransportFactory =
    Box<dyn FnOnce(&NodeAssignment, &TopologyGraph) -> Result<Box<dyn PeerTransport>, NodeError> + Send>;

/// Everything a node runtime needs from its environment.
pub struct NodeServices {
    pub transport: TransportFactory,
    pub sink: Arc<dyn MetricSink>,
    pub clock: Arc<dyn Clock>,
    /// Pre-built data (shared in simulation); `None` loads from the scenario.
    pub data: Option<Arc<PreparedData>>,
    pub schedule: Option<RoundSchedule>,
    pub resources: ResourceMode,
    pub exchange_timeout: Duration,
}

impl NodeServices {
    /// Physical-mode defaults: TCP transport, HTTP metrics, wall clock, OS
    /// resource sampling, data loaded from the scenario.
    pub fn physical(metrics_endpoint: String) -> Self {
        NodeServices {
            transport: Box::new(|assignment, graph| {
                crate::transport::TcpTransport::connect(assignment, graph, Duration::from_secs(60))
                    .map(|t| Box::new(t) as Box<dyn PeerTransport>)
            }),
            sink: Arc::new(HttpSink { endpoint: metrics_endpoint }),
            clock: Arc::new(WallClock),
            data: None,
            schedule: None,
            resources: ResourceMode::Os,
            exchange_timeout: DEFAULT_EXCHANGE_TIMEOUT,
        }
    }
}

struct SamplerHandle {
    stop: Arc<AtomicBool>,
    handle: std::thread::JoinHandle<SamplerResult>,
}

struct SamplerResult {
    power_log: Vec<crate::telemetry::PowerSample>,
    dropped_reports: u64,
}

struct SamplerArgs {
    node_id: NodeId,
    node_seed: u64,
    meter_spec: MeterSpec,
    metric_interval_ms: u64,
    resources: ResourceMode,
    clock: Arc<dyn Clock>,
    sink: Arc<dyn MetricSink>,
    phase: Arc<AtomicU8>,
    round: Arc<AtomicU32>,
    counters: Arc<TrafficCounters>,
}

/// Periodic sampler: power every meter interval, a metric report every
/// `metric_interval_ms`, all timestamps on the provided clock. Runs until
/// stopped; never blocks the training thread.
fn spawn_sampler(args: SamplerArgs) -> Result<SamplerHandle, NodeError> {
    let stop = Arc::new(AtomicBool::new(false));
    let stop_flag = Arc::clone(&stop);
    let mut meter = build_meter(&args.meter_spec, derive_seed(args.node_seed, seeds::tags::METER))?;
    let mut simulated = match args.resources {
        ResourceMode::Simulated { noise_scale } => Some(SimulatedResources::with_noise_scale(
            derive_seed(args.node_seed, seeds::tags::RESOURCES),
            noise_scale,
        )),
        ResourceMode::Os => None,
    };
    let mut os_resources = match simulated {
        None => Some(OsResources::new()),
        Some(_) => None,
    };
    let sample_interval = args.meter_spec.sample_interval_ms.max(1);
    let metric_interval = args.metric_interval_ms.max(1);

    let handle = std::thread::Builder::new()
        .name(format!("telemetry-{}", args.node_id))
        .spawn(move || {
            let mut power_log = Vec::new();
            let mut dropped = 0u64;
            let mut seq = 0u64;
            let start = args.clock.now_ms();
            let mut tick: u64 = 0;
            let mut last_post: Option<u64> = None;
            let mut last_resources = ResourceSample {
                timestamp_ms: start,
                cpu_pct: 0.0,
                ram_pct: 0.0,
            };
            loop {
                if stop_flag.load(Ordering::Acquire) {
                    break;
                }
                let tick_time = start + tick * sample_interval;
                // Absolute schedule: late ticks catch up without drift.
                loop {
                    if stop_flag.load(Ordering::Acquire) {
                        return SamplerResult { power_log, dropped_reports: dropped };
                    }
                    let now = args.clock.now_ms();
                    if now >= tick_time {
                        break;
                    }
                    args.clock.sleep_ms((tick_time - now).min(sample_interval / 4 + 1));
                }

                let activity = phase_from_u8(args.phase.load(Ordering::Acquire)).activity();
                let resources = match (&mut simulated, &mut os_resources) {
                    (Some(sim), _) => Some(sim.sample(activity, tick_time)),
                    (None, Some(os)) => os.sample(tick_time),
                    _ => None,
                };
                if let Some(r) = resources {
                    last_resources = r;
                }
                let utilization = (last_resources.cpu_pct / 100.0).clamp(0.0, 1.0);
                let power = match meter.sample(utilization, tick_time) {
                    Ok(Some(sample)) => {
                        power_log.push(sample);
                        Some(sample.power_w)
                    }
                    Ok(None) => None,
                    Err(e) => {
                        log::warn!("meter sample failed: {e}");
                        None
                    }
                };

                let due = match last_post {
                    None => true,
                    Some(t) => tick_time.saturating_sub(t) >= metric_interval,
                };
                if due {
                    let report = MetricReport {
                        node_id: args.node_id,
                        seq,
                        timestamp_ms: tick_time,
                        round: args.round.load(Ordering::Acquire),
                        cpu_pct: last_resources.cpu_pct,
                        ram_pct: last_resources.ram_pct,
                        bytes_sent: args.counters.sent.load(Ordering::Relaxed),
                        bytes_recv: args.counters.recv.load(Ordering::Relaxed),
                        power_w: power,
                    };
                    seq += 1;
                    last_post = Some(tick_time);
                    if args.sink.post_metrics(&report).is_err() {
                        dropped += 1;
                    }
                }
                tick += 1;
            }
            SamplerResult { power_log, dropped_reports: dropped }
        })
        .map_err(|e| NodeError::Transport(format!("spawn telemetry: {e}")))?;
    Ok(SamplerHandle { stop, handle })
}

/// Runs the whole participant lifecycle for `assignment`, returning the
/// summary that was posted to the controller. The model trajectory is
/// deterministic in the scenario seeds; telemetry timestamps are not.
///
/// Failures after setup produce a partial summary with `completed = false`
/// and a phase diagnostic rather than an error.
pub fn run_node(assignment: &NodeAssignment, services: NodeServices) -> Result<NodeSummary, NodeError> {
    let cfg = &assignment.scenario;
    let violations = crate::scenario::validate_scenario(cfg);
    if !violations.is_empty() {
        return Err(NodeError::InvalidScenario(
            violations
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join("; "),
        ));
    }
    let my_id = assignment.node_id;
    if cfg.participant(my_id).is_none() {
        return Err(NodeError::UnknownParticipant(my_id));
    }

    let mut tracker = PhaseTracker::new();
    tracker.transition(NodePhase::Configured)?;
    log::info!("node={my_id} phase=configured scenario={}", cfg.scenario_name);

    let data = match &services.data {
        Some(shared) => Arc::clone(shared),
        None => Arc::new(prepare_data(cfg)?),
    };
    let graph = build_topology(&cfg.topology, cfg.n_nodes())?;
    let my_neighbors = neighbors(&graph, my_id)?;
    let degree = my_neighbors.len() as u64;

    tracker.transition(NodePhase::Connecting)?;
    let mut transport = (services.transport)(assignment, &graph)?;

    let counters = Arc::new(TrafficCounters::default());
    let round_flag = Arc::new(AtomicU32::new(0));
    let sampler = spawn_sampler(SamplerArgs {
        node_id: my_id,
        node_seed: assignment.seed,
        meter_spec: cfg.power_meter.clone(),
        metric_interval_ms: cfg.metric_interval_ms,
        resources: services.resources,
        clock: Arc::clone(&services.clock),
        sink: Arc::clone(&services.sink),
        phase: tracker.shared(),
        round: Arc::clone(&round_flag),
        counters: Arc::clone(&counters),
    })?;

    let start_ms = services.clock.now_ms();
    let mut params = init_model(&cfg.model, derive_seed(assignment.seed, seeds::tags::MODEL_INIT));
    let shard = data.partition.shards[my_id as usize].clone();
    let mut inbox = RoundInbox::default();
    let mut rounds_out: Vec<RoundOutcome> = Vec::with_capacity(cfg.rounds as usize);
    let mut f1_per_round: Vec<f64> = Vec::with_capacity(cfg.rounds as usize);
    let frame_size = 4 + 1 + 4 + 2 + serialize_params(&params).len() as u64;
    let train_seed_base = derive_seed(assignment.seed, seeds::tags::TRAIN);

    let run_result: Result<(), NodeError> = (|| {
        for round in 0..cfg.rounds {
            round_flag.store(round, Ordering::Release);
            let slot_start = services.clock.now_ms();

            tracker.transition(NodePhase::Training)?;
            let (trained, train_report) = train_epochs(
                &params,
                &data.train,
                &shard,
                cfg.local_epochs,
                cfg.learning_rate,
                cfg.batch_size,
                derive_seed(train_seed_base, round as u64),
            )?;
            params = trained;
            if let Some(schedule) = &services.schedule {
                let training_end = slot_start
                    + (schedule.round_duration_ms as f64 * schedule.training_fraction) as u64;
                sleep_until(&*services.clock, training_end);
            }

            tracker.transition(NodePhase::Exchanging)?;
            let received = exchange_round(
                transport.as_mut(),
                &cfg.model,
                round,
                &params,
                &mut inbox,
                services.exchange_timeout,
                &counters,
            )?;

            tracker.transition(NodePhase::Aggregating)?;
            // Merge own + received in global node-id order: every node then
            // sums in the same sequence, keeping full-graph consensus
            // bit-identical.
            let mut by_id: BTreeMap<NodeId, ModelParams> = received;
            by_id.insert(my_id, params);
            let mut ordered = by_id.into_values();
            let first = ordered.next().expect("at least own params");
            let rest: Vec<ModelParams> = ordered.collect();
            let weights = vec![1.0; 1 + rest.len()];
            params = aggregate(&first, &rest, &weights)?;
            let (macro_f1, _) = evaluate(&params, &data.test)?;
            f1_per_round.push(macro_f1);
            rounds_out.push(RoundOutcome {
                round,
                f1_after_aggregate: macro_f1,
                mean_loss: train_report.mean_loss,
                bytes_sent_round: degree * frame_size,
                bytes_recv_round: degree * frame_size,
                params_digest: fnv1a64(&serialize_params(&params)),
            });
            log::info!(
                "node={my_id} round={round} f1={macro_f1:.4} loss={:.4}",
                train_report.mean_loss
            );

            if let Some(schedule) = &services.schedule {
                sleep_until(&*services.clock, slot_start + schedule.round_duration_ms);
            }
        }
        Ok(())
    })();

    let diagnostic = match &run_result {
        Ok(()) => {
            tracker.transition(NodePhase::Reporting)?;
            None
        }
        Err(e) => {
            let failed_phase = tracker.current();
            tracker.transition(NodePhase::Failed)?;
            log::warn!("node={my_id} failed in {failed_phase:?}: {e}");
            Some(format!("{failed_phase:?}: {e}"))
        }
    };

    transport.close();
    sampler.stop.store(true, Ordering::Release);
    let telemetry = sampler
        .handle
        .join()
        .unwrap_or(SamplerResult { power_log: Vec::new(), dropped_reports: 0 });

    let end_ms = services.clock.now_ms();
    let energy_j = crate::telemetry::integrate_energy(&telemetry.power_log).unwrap_or(0.0);
    let avg_power_w = if telemetry.power_log.is_empty() {
        0.0
    } else {
        telemetry.power_log.iter().map(|s| s.power_w).sum::<f64>() / telemetry.power_log.len() as f64
    };
    let summary = NodeSummary {
        node_id: my_id,
        f1_final: f1_per_round.last().copied().unwrap_or(0.0),
        f1_per_round,
        energy_j,
        avg_power_w,
        total_bytes_sent: counters.sent.load(Ordering::Relaxed),
        total_bytes_recv: counters.recv.load(Ordering::Relaxed),
        duration_s: (end_ms.saturating_sub(start_ms)) as f64 / 1000.0,
        power_log: telemetry.power_log,
        rounds: rounds_out,
        dropped_reports: telemetry.dropped_reports,
        completed: run_result.is_ok(),
        diagnostic,
    };

    if let Err(e) = services.sink.post_summary(&summary) {
        log::warn!("node={my_id} summary delivery failed: {e}");
    }
    if run_result.is_ok() {
        tracker.transition(NodePhase::Done)?;
        log::info!(
            "node={my_id} phase=done f1={:.4} sent={} recv={}",
            summary.f1_final,
            summary.total_bytes_sent,
            summary.total_bytes_recv
        );
    }
    Ok(summary)
}

fn sleep_until(clock: &dyn Clock, deadline_ms: u64) {
    loop {
        let now = clock.now_ms();
        if now >= deadline_ms {
            return;
        }
        clock.sleep_ms((deadline_ms - now).min(250));
    }
}

/// In-process services for a single node wired to an in-memory mesh; used
/// by tests and the simulation."
pub fn mem_services(
    transport: crate::transport::MemTransport,
    sink: Arc<dyn MetricSink>,
    clock: Arc<dyn Clock>,
    data: Arc<PreparedData>,
    schedule: Option<RoundSchedule>,
) -> NodeServices {
    NodeServices {
        transport: Box::new(move |_, _| Ok(Box::new(transport) as Box<dyn PeerTransport>)),
        sink,
        clock,
        data: Some(data),
        schedule,
        resources: ResourceMode::Simulated { noise_scale: 1.0 },
        exchange_timeout: DEFAULT_EXCHANGE_TIMEOUT,
    }
}
