//! Decentralized federated learning testbed.
//!
//! A controller distributes a scenario configuration to node daemons; each
//! node trains a small MLP on its data shard, exchanges parameters with its
//! topology neighbors over framed TCP, aggregates with FedAvg, and reports
//! resource and power telemetry back over HTTP. The [`simulation`] module
//! runs the whole arrangement inside one process, deterministically.

pub mod controller;
pub mod dataset;
pub mod model;
pub mod node;
pub mod protocol;
pub mod scenario;
pub mod seeds;
pub mod simulation;
pub mod telemetry;
pub mod topology;
pub mod transport;

pub use controller::{ReportFormat, RunRecord, RunReport, RunStatus};
pub use dataset::{Dataset, Partition};
pub use model::{ModelParams, TrainReport};
pub use node::{NodeId, NodeSummary, RoundOutcome};
pub use protocol::{MetricReport, NodeAssignment, PeerMessage};
pub use scenario::{
    DatasetSpec, MeterSpec, ModelSpec, ParticipantSpec, ScenarioConfig, TopologySpec,
};
pub use simulation::{SimPlan, SimTransport};
pub use telemetry::{MeterModel, PowerSample, ResourceSample};
pub use topology::TopologyGraph;
