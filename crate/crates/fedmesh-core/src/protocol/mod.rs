//! Every byte that crosses a wire.
//!
//! Peer traffic is length-prefixed TCP frames:
//!
//! ```text
//! [4 bytes: length, u32 big-endian][1 byte: msg type][payload]
//!          length = 1 + |payload|, capped at 16 MiB
//! ```
//!
//! Message types: HELLO 0x01 (`node_id` u16), MODEL 0x02 (`round` u32,
//! `node_id` u16, parameter bytes), BYE 0x03 (empty). Integers in frame
//! headers are big-endian; the parameter payload itself is the
//! little-endian layout fixed by the model module.
//!
//! Control traffic (config distribution, metric reporting) is a small
//! HTTP/1.1 subset with JSON bodies; see [`http`] and [`config`].

pub mod config;
pub mod http;

use serde::{Deserialize, Serialize};
use std::io::Read;
use std::time::Duration;
use thiserror::Error;

use crate::telemetry::PowerSample;

pub use config::{serve_config_once, post_config, ConfigAck, NodeAssignment};

/// Upper bound on `length` (bytes after the length field); guards against
/// corrupted prefixes. The default model payload is ~0.8 MB.
pub const FRAME_CAP: u32 = 16 * 1024 * 1024;

pub const MSG_HELLO: u8 = 0x01;
pub const MSG_MODEL: u8 = 0x02;
pub const MSG_BYE: u8 = 0x03;

/// One peer-protocol message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PeerMessage {
    Hello { node_id: u16 },
    Model { round: u32, node_id: u16, params_payload: Vec<u8> },
    Bye,
}

impl PeerMessage {
    /// Exact on-wire size of the encoded frame, including the length
    /// prefix: `4 + 1 + |payload|`. For MODEL that is
    /// `4 + 1 + 4 + 2 + |params_payload|`.
    pub fn wire_size(&self) -> u64 {
        4 + 1 + match self {
            PeerMessage::Hello { .. } => 2,
            PeerMessage::Model { params_payload, .. } => 4 + 2 + params_payload.len() as u64,
            PeerMessage::Bye => 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("frame truncated: {0}")]
    Truncated(String),
    #[error("frame length {0} exceeds cap {FRAME_CAP}")]
    Oversize(u32),
    #[error("invalid frame length 0")]
    EmptyFrame,
    #[error("unknown message type 0x{0:02x}")]
    UnknownMsgType(u8),
    #[error("malformed {kind} payload: expected {expected} bytes, got {got}")]
    MalformedPayload { kind: &'static str, expected: String, got: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("http error: {0}")]
    Http(#[from] http::HttpError),
    #[error("remote replied {status}: {body}")]
    Remote { status: u16, body: String },
    #[error("timed out waiting for configuration")]
    ConfigTimeout,
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Encodes one message as a length-prefixed frame.
pub fn encode_frame(msg: &PeerMessage) -> Result<Vec<u8>, ProtocolError> {
    let mut payload = Vec::new();
    let msg_type = match msg {
        PeerMessage::Hello { node_id } => {
            payload.extend_from_slice(&node_id.to_be_bytes());
            MSG_HELLO
        }
        PeerMessage::Model { round, node_id, params_payload } => {
            payload.reserve(6 + params_payload.len());
            payload.extend_from_slice(&round.to_be_bytes());
            payload.extend_from_slice(&node_id.to_be_bytes());
            payload.extend_from_slice(params_payload);
            MSG_MODEL
        }
        PeerMessage::Bye => MSG_BYE,
    };
    let length = 1 + payload.len() as u64;
    if length > FRAME_CAP as u64 {
        return Err(ProtocolError::Oversize(length.min(u32::MAX as u64) as u32));
    }
    let mut frame = Vec::with_capacity(4 + length as usize);
    frame.extend_from_slice(&(length as u32).to_be_bytes());
    frame.push(msg_type);
    frame.extend_from_slice(&payload);
    Ok(frame)
}

/// Reads exactly one frame from the stream and decodes it.
pub fn decode_frame<R: Read>(reader: &mut R) -> Result<PeerMessage, ProtocolError> {
    let mut len_buf = [0u8; 4];
    read_exact(reader, &mut len_buf, "length prefix")?;
    let length = u32::from_be_bytes(len_buf);
    if length == 0 {
        return Err(ProtocolError::EmptyFrame);
    }
    if length > FRAME_CAP {
        return Err(ProtocolError::Oversize(length));
    }
    let mut buf = vec![0u8; length as usize];
    read_exact(reader, &mut buf, "frame body")?;
    parse_frame_body(&buf)
}

fn read_exact<R: Read>(reader: &mut R, buf: &mut [u8], what: &str) -> Result<(), ProtocolError> {
    reader.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            ProtocolError::Truncated(format!("short read in {what}"))
        } else {
            ProtocolError::Io(e)
        }
    })
}

fn parse_frame_body(buf: &[u8]) -> Result<PeerMessage, ProtocolError> {
    let (msg_type, payload) = buf.split_first().expect("length >= 1 checked");
    match *msg_type {
        MSG_HELLO => {
            if payload.len() != 2 {
                return Err(ProtocolError::MalformedPayload {
                    kind: "HELLO",
                    expected: "2".into(),
                    got: payload.len(),
                });
            }
            Ok(PeerMessage::Hello {
                node_id: u16::from_be_bytes([payload[0], payload[1]]),
            })
        }
        MSG_MODEL => {
            if payload.len() < 6 {
                return Err(ProtocolError::MalformedPayload {
                    kind: "MODEL",
                    expected: ">= 6".into(),
                    got: payload.len(),
                });
            }
            Ok(PeerMessage::Model {
                round: u32::from_be_bytes(payload[..4].try_into().unwrap()),
                node_id: u16::from_be_bytes(payload[4..6].try_into().unwrap()),
                params_payload: payload[6..].to_vec(),
            })
        }
        MSG_BYE => {
            if !payload.is_empty() {
                return Err(ProtocolError::MalformedPayload {
                    kind: "BYE",
                    expected: "0".into(),
                    got: payload.len(),
                });
            }
            Ok(PeerMessage::Bye)
        }
        other => Err(ProtocolError::UnknownMsgType(other)),
    }
}

/// Periodic telemetry record, one per reporting tick, node to controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub node_id: u16,
    /// Strictly increasing per node; the controller deduplicates on
    /// `(node_id, seq)`.
    pub seq: u64,
    pub timestamp_ms: u64,
    pub round: u32,
    pub cpu_pct: f64,
    pub ram_pct: f64,
    pub bytes_sent: u64,
    pub bytes_recv: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power_w: Option<f64>,
}

/// Per-round results carried inside the end-of-run summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundOutcome {
    pub round: u32,
    pub f1_after_aggregate: f64,
    pub mean_loss: f64,
    pub bytes_sent_round: u64,
    pub bytes_recv_round: u64,
    /// FNV-1a over the serialized post-aggregation parameters; lets runs be
    /// compared for bit-identical trajectories without shipping the values.
    pub params_digest: u64,
}

/// The batch report a node sends once, after its last round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSummary {
    pub node_id: u16,
    pub f1_final: f64,
    pub f1_per_round: Vec<f64>,
    pub energy_j: f64,
    pub avg_power_w: f64,
    pub total_bytes_sent: u64,
    pub total_bytes_recv: u64,
    pub duration_s: f64,
    pub power_log: Vec<PowerSample>,
    pub rounds: Vec<RoundOutcome>,
    /// Metric reports that could not be delivered (controller unreachable).
    #[serde(default)]
    pub dropped_reports: u64,
    pub completed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

/// Periodic metric delivery: initial attempt plus bounded retries.
pub const METRIC_RETRIES: u32 = 2;
/// Summary delivery tries harder; it is the batch energy report.
pub const SUMMARY_RETRIES: u32 = 5;
/// Pause between delivery attempts.
pub const RETRY_DELAY: Duration = Duration::from_millis(250);

const POST_TIMEOUT: Duration = Duration::from_secs(10);

/// POSTs a metric report to `<endpoint>/metrics`. Failure is a normal
/// outcome; the caller counts it and keeps training.
pub fn post_metrics(endpoint: &str, report: &MetricReport) -> Result<(), ProtocolError> {
    post_with_retries(endpoint, "/metrics", &serde_json::to_vec(report)?, METRIC_RETRIES)
}

/// POSTs the final summary to `<endpoint>/summary` with extra retries.
pub fn post_summary(endpoint: &str, summary: &NodeSummary) -> Result<(), ProtocolError> {
    post_with_retries(endpoint, "/summary", &serde_json::to_vec(summary)?, SUMMARY_RETRIES)
}

fn post_with_retries(
    endpoint: &str,
    path: &str,
    body: &[u8],
    retries: u32,
) -> Result<(), ProtocolError> {
    let target = http::HttpTarget::parse(endpoint)?;
    let mut last_err = None;
    for attempt in 0..=retries {
        if attempt > 0 {
            std::thread::sleep(RETRY_DELAY);
        }
        match http::post_json(&target, path, body, POST_TIMEOUT) {
            Ok(resp) if (200..300).contains(&resp.status) => return Ok(()),
            Ok(resp) => {
                last_err = Some(ProtocolError::Remote {
                    status: resp.status,
                    body: String::from_utf8_lossy(&resp.body).into_owned(),
                });
            }
            Err(e) => last_err = Some(e.into()),
        }
    }
    Err(last_err.expect("at least one attempt"))
}
