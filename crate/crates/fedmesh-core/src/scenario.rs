//! Experiment configuration: the document the controller distributes to
//! every participant before a run starts.
//!
//! The on-disk and on-wire format is JSON with snake_case keys; the same
//! document is the body of `POST /config`. See `docs/scenario.md` for the
//! schema and defaults.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeds;

/// Full experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario_name: String,
    pub master_seed: u64,
    pub participants: Vec<ParticipantSpec>,
    pub topology: TopologySpec,
    pub dataset: DatasetSpec,
    #[serde(default = "default_rounds")]
    pub rounds: u32,
    #[serde(default = "default_local_epochs")]
    pub local_epochs: u32,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_metric_interval_ms")]
    pub metric_interval_ms: u64,
    #[serde(default)]
    pub power_meter: MeterSpec,
}

fn default_rounds() -> u32 {
    10
}
fn default_local_epochs() -> u32 {
    1
}
fn default_learning_rate() -> f64 {
    0.01
}
fn default_batch_size() -> usize {
    32
}
fn default_metric_interval_ms() -> u64 {
    1000
}

impl ScenarioConfig {
    pub fn n_nodes(&self) -> u16 {
        self.participants.len() as u16
    }

    /// Per-node seed: `master_seed XOR (node_id + 1)`.
    pub fn node_seed(&self, node_id: u16) -> u64 {
        seeds::node_seed(self.master_seed, node_id)
    }

    pub fn participant(&self, node_id: u16) -> Option<&ParticipantSpec> {
        self.participants.iter().find(|p| p.node_id == node_id)
    }
}

/// One participant's network identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticipantSpec {
    pub node_id: u16,
    pub host: String,
    /// Port of the one-shot config server the node runs while waiting.
    pub config_port: u16,
    /// Port the node listens on for neighbor TCP connections.
    pub peer_port: u16,
    /// Base URL of the controller's ingest endpoints, e.g. `http://10.0.0.1:9000`.
    pub metrics_endpoint: String,
}

/// Overlay graph selector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySpec {
    pub kind: TopologyKind,
    /// Edge probability for `random`; defaults to 0.5 at build time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edge_probability: Option<f64>,
    /// Star center; defaults to node 0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hub_id: Option<u16>,
    /// Seed for the random topology; independent of `master_seed` so traffic
    /// shape stays fixed across seed sweeps.
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    Fully,
    Star,
    Ring,
    Random,
}

impl std::fmt::Display for TopologyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            TopologyKind::Fully => "fully",
            TopologyKind::Star => "star",
            TopologyKind::Ring => "ring",
            TopologyKind::Random => "random",
        };
        f.write_str(s)
    }
}

/// Training data source and partitioning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub source: DataSource,
    /// Directory holding the four standard IDX files (mnist/fashion_mnist).
    #[serde(default)]
    pub data_dir: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default)]
    pub partition: PartitionKind,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Mnist,
    FashionMnist,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    #[default]
    Iid,
}

/// Gaussian class-cluster generator parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub n_features: usize,
    pub n_classes: usize,
    pub cluster_stddev: f64,
}

/// MLP architecture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    #[serde(default)]
    pub init_scheme: InitScheme,
}

impl Default for ModelSpec {
    /// 784-128-10: the MNIST-scale default architecture.
    fn default() -> Self {
        ModelSpec {
            input_dim: 784,
            hidden_dims: vec![128],
            output_dim: 10,
            init_scheme: InitScheme::UniformHe,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    #[default]
    UniformHe,
}

/// Power meter selection and model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeterSpec {
    #[serde(default)]
    pub backend: MeterBackend,
    #[serde(default = "default_idle_watts")]
    pub idle_watts: f64,
    #[serde(default = "default_load_coefficient")]
    pub load_coefficient_watts: f64,
    #[serde(default = "default_noise_stddev")]
    pub noise_stddev_watts: f64,
    #[serde(default = "default_sample_interval_ms")]
    pub sample_interval_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replay_path: Option<String>,
}

fn default_idle_watts() -> f64 {
    2.6
}
fn default_load_coefficient() -> f64 {
    2.8
}
fn default_noise_stddev() -> f64 {
    0.05
}
fn default_sample_interval_ms() -> u64 {
    1000
}

impl Default for MeterSpec {
    fn default() -> Self {
        MeterSpec {
            backend: MeterBackend::Simulated,
            idle_watts: default_idle_watts(),
            load_coefficient_watts: default_load_coefficient(),
            noise_stddev_watts: default_noise_stddev(),
            sample_interval_ms: default_sample_interval_ms(),
            replay_path: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MeterBackend {
    #[default]
    Simulated,
    Replay,
    None,
}

/// One violated invariant, with the JSON path of the offending field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    /// Malformed JSON; message carries line/column from the parser.
    #[error("scenario parse error: {0}")]
    Parse(String),
    /// Well-formed JSON that does not fit the schema (missing field,
    /// unknown enum value, wrong type); message names the field.
    #[error("scenario schema error: {0}")]
    Schema(String),
    /// Schema-valid config that violates invariants.
    #[error("invalid scenario: {}", format_violations(.0))]
    Invalid(Vec<Violation>),
}

fn format_violations(vs: &[Violation]) -> String {
    vs.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

/// Parses and validates a scenario document.
pub fn parse_scenario(text: &str) -> Result<ScenarioConfig, ScenarioError> {
    let cfg: ScenarioConfig = serde_json::from_str(text).map_err(|e| match e.classify() {
        serde_json::error::Category::Data => ScenarioError::Schema(e.to_string()),
        _ => ScenarioError::Parse(e.to_string()),
    })?;
    let violations = validate_scenario(&cfg);
    if violations.is_empty() {
        Ok(cfg)
    } else {
        Err(ScenarioError::Invalid(violations))
    }
}

/// Serializes a config back to its canonical JSON document.
pub fn serialize_scenario(cfg: &ScenarioConfig) -> String {
    serde_json::to_string_pretty(cfg).expect("scenario serialization cannot fail")
}

/// Checks every invariant and returns the violations in a fixed order.
/// Pure: same config, same list.
pub fn validate_scenario(cfg: &ScenarioConfig) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |path: &str, message: String| {
        out.push(Violation {
            path: path.to_string(),
            message,
        });
    };

    let n = cfg.participants.len();
    if n == 0 {
        push("participants", "must not be empty".into());
    }
    let mut seen_ids = std::collections::BTreeSet::new();
    let mut seen_addrs = std::collections::BTreeSet::new();
    for (i, p) in cfg.participants.iter().enumerate() {
        if p.node_id as usize >= n {
            push(
                &format!("participants[{i}].node_id"),
                format!("node_id {} outside 0..{}", p.node_id, n),
            );
        }
        if !seen_ids.insert(p.node_id) {
            push(
                &format!("participants[{i}].node_id"),
                format!("duplicate node_id {}", p.node_id),
            );
        }
        if p.config_port == 0 {
            push(
                &format!("participants[{i}].config_port"),
                "port must be in 1..65535".into(),
            );
        }
        if p.peer_port == 0 {
            push(
                &format!("participants[{i}].peer_port"),
                "port must be in 1..65535".into(),
            );
        }
        for (field, port) in [("config_port", p.config_port), ("peer_port", p.peer_port)] {
            if port != 0 && !seen_addrs.insert((p.host.clone(), port)) {
                push(
                    &format!("participants[{i}].{field}"),
                    format!("duplicate (host, port) pair {}:{}", p.host, port),
                );
            }
        }
    }

    match cfg.topology.kind {
        TopologyKind::Ring => {
            if n > 0 && n < 3 {
                push("topology.kind", format!("ring requires >= 3 nodes, have {n}"));
            }
        }
        TopologyKind::Star => {
            if let Some(hub) = cfg.topology.hub_id {
                if hub as usize >= n {
                    push("topology.hub_id", format!("hub_id {hub} out of range"));
                }
            }
        }
        TopologyKind::Random => {
            if let Some(p) = cfg.topology.edge_probability {
                if !(p > 0.0 && p <= 1.0) {
                    push(
                        "topology.edge_probability",
                        format!("must be in (0, 1], got {p}"),
                    );
                }
            }
        }
        TopologyKind::Fully => {}
    }

    match cfg.dataset.source {
        DataSource::Synthetic => match &cfg.dataset.synthetic {
            None => push("dataset.synthetic", "required when source = synthetic".into()),
            Some(s) => {
                if s.n_classes < 2 {
                    push("dataset.synthetic.n_classes", "must be >= 2".into());
                }
                if s.n_features == 0 {
                    push("dataset.synthetic.n_features", "must be >= 1".into());
                }
                if s.n_samples == 0 {
                    push("dataset.synthetic.n_samples", "must be >= 1".into());
                }
                if !(s.cluster_stddev >= 0.0) {
                    push("dataset.synthetic.cluster_stddev", "must be >= 0".into());
                }
                if cfg.model.input_dim != s.n_features {
                    push(
                        "model.input_dim",
                        format!(
                            "must equal dataset n_features ({} != {})",
                            cfg.model.input_dim, s.n_features
                        ),
                    );
                }
                if cfg.model.output_dim != s.n_classes {
                    push(
                        "model.output_dim",
                        format!(
                            "must equal dataset n_classes ({} != {})",
                            cfg.model.output_dim, s.n_classes
                        ),
                    );
                }
            }
        },
        DataSource::Mnist | DataSource::FashionMnist => {
            if cfg.dataset.synthetic.is_some() {
                push(
                    "dataset.synthetic",
                    "only allowed when source = synthetic".into(),
                );
            }
            if cfg.dataset.data_dir.is_empty() {
                push("dataset.data_dir", "required for IDX file sources".into());
            }
            if cfg.model.input_dim != 784 {
                push("model.input_dim", "must be 784 for 28x28 image sources".into());
            }
            if cfg.model.output_dim != 10 {
                push("model.output_dim", "must be 10 for this source".into());
            }
        }
    }
    if !(cfg.dataset.test_fraction > 0.0 && cfg.dataset.test_fraction < 1.0) {
        push(
            "dataset.test_fraction",
            format!("must be in (0, 1), got {}", cfg.dataset.test_fraction),
        );
    }

    if cfg.rounds == 0 {
        push("rounds", "must be >= 1".into());
    }
    if cfg.local_epochs == 0 {
        push("local_epochs", "must be >= 1".into());
    }
    if !(cfg.learning_rate > 0.0 && cfg.learning_rate.is_finite()) {
        push("learning_rate", format!("must be > 0, got {}", cfg.learning_rate));
    }
    if cfg.batch_size == 0 {
        push("batch_size", "must be >= 1".into());
    }
    if cfg.metric_interval_ms == 0 {
        push("metric_interval_ms", "must be >= 1".into());
    }

    if cfg.model.input_dim == 0 {
        push("model.input_dim", "must be >= 1".into());
    }
    if cfg.model.output_dim == 0 {
        push("model.output_dim", "must be >= 1".into());
    }
    for (i, h) in cfg.model.hidden_dims.iter().enumerate() {
        if *h == 0 {
            push(&format!("model.hidden_dims[{i}]"), "must be >= 1".into());
        }
    }

    let m = &cfg.power_meter;
    if !(m.idle_watts >= 0.0) {
        push("power_meter.idle_watts", "must be >= 0".into());
    }
    if !(m.load_coefficient_watts >= 0.0) {
        push("power_meter.load_coefficient_watts", "must be >= 0".into());
    }
    if !(m.noise_stddev_watts >= 0.0) {
        push("power_meter.noise_stddev_watts", "must be >= 0".into());
    }
    if m.sample_interval_ms == 0 {
        push("power_meter.sample_interval_ms", "must be >= 1".into());
    }
    match m.backend {
        MeterBackend::Replay => {
            if m.replay_path.is_none() {
                push("power_meter.replay_path", "required when backend = replay".into());
            }
        }
        _ => {
            if m.replay_path.is_some() {
                push(
                    "power_meter.replay_path",
                    "only allowed when backend = replay".into(),
                );
            }
        }
    }

    out
}
