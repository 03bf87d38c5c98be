//! Peer links: how MODEL frames travel between neighbors.
//!
//! Two interchangeable backends speak the same frame protocol: real TCP
//! sockets (one connection per topology edge, HELLO handshake, reader
//! thread per connection) and an in-process channel mesh that carries the
//! very same encoded bytes. Byte accounting and message semantics are
//! identical, so learning trajectories do not depend on the backend.

use std::collections::BTreeMap;
use std::io::Write;
use std::net::{TcpListener, TcpStream};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use crate::node::{NodeError, NodeId};
use crate::protocol::{decode_frame, encode_frame, NodeAssignment, PeerMessage};
use crate::topology::{neighbors, TopologyGraph};

/// A connected set of links to this node's neighbors.
pub trait PeerTransport: Send {
    fn my_id(&self) -> NodeId;
    /// Neighbor ids, ascending.
    fn neighbor_ids(&self) -> &[NodeId];
    fn send(&mut self, peer: NodeId, msg: &PeerMessage) -> Result<(), NodeError>;
    /// Next message from any peer; `NodeError::RecvTimeout` when nothing
    /// arrives in time, `NodeError::PeerConnection` when a link dies.
    fn recv(&mut self, timeout: Duration) -> Result<(NodeId, PeerMessage), NodeError>;
    /// Says goodbye on every link; errors are ignored, peers may be gone.
    fn close(&mut self);
}

type FrameEnvelope = (NodeId, Result<Vec<u8>, String>);

/// Channel-backed transport. Frames are encoded and decoded exactly as on
/// TCP so wire sizes match bit for bit.
pub struct MemTransport {
    my_id: NodeId,
    neighbors: Vec<NodeId>,
    inbound: mpsc::Receiver<FrameEnvelope>,
    outbound: BTreeMap<NodeId, mpsc::Sender<FrameEnvelope>>,
}

/// Builds one transport per node for the given overlay, indexable by node id.
pub fn build_mem_mesh(graph: &TopologyGraph) -> Result<Vec<MemTransport>, NodeError> {
    let n = graph.n;
    let mut senders = Vec::with_capacity(n as usize);
    let mut receivers = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let (tx, rx) = mpsc::channel();
        senders.push(tx);
        receivers.push(Some(rx));
    }
    let mut transports = Vec::with_capacity(n as usize);
    for id in 0..n {
        let my_neighbors = neighbors(graph, id)?;
        let outbound = my_neighbors
            .iter()
            .map(|&peer| (peer, senders[peer as usize].clone()))
            .collect();
        transports.push(MemTransport {
            my_id: id,
            neighbors: my_neighbors,
            inbound: receivers[id as usize].take().expect("taken once"),
            outbound,
        });
    }
    Ok(transports)
}

impl PeerTransport for MemTransport {
    fn my_id(&self) -> NodeId {
        self.my_id
    }

    fn neighbor_ids(&self) -> &[NodeId] {
        &self.neighbors
    }

    fn send(&mut self, peer: NodeId, msg: &PeerMessage) -> Result<(), NodeError> {
        let frame = encode_frame(msg)?;
        let sender = self
            .outbound
            .get(&peer)
            .ok_or(NodeError::UnknownPeer(peer))?;
        sender.send((self.my_id, Ok(frame))).map_err(|_| NodeError::PeerConnection {
            peer,
            message: "channel closed".into(),
        })
    }

    fn recv(&mut self, timeout: Duration) -> Result<(NodeId, PeerMessage), NodeError> {
        match self.inbound.recv_timeout(timeout) {
            Ok((peer, Ok(frame))) => {
                let msg = decode_frame(&mut std::io::Cursor::new(frame))?;
                Ok((peer, msg))
            }
            Ok((peer, Err(message))) => Err(NodeError::PeerConnection { peer, message }),
            Err(mpsc::RecvTimeoutError::Timeout) => Err(NodeError::RecvTimeout),
            Err(mpsc::RecvTimeoutError::Disconnected) => Err(NodeError::PeerConnection {
                peer: self.my_id,
                message: "all peer channels closed".into(),
            }),
        }
    }

    fn close(&mut self) {
        for (&peer, sender) in &self.outbound {
            if let Ok(frame) = encode_frame(&PeerMessage::Bye) {
                let _ = sender.send((self.my_id, Ok(frame)));
            }
            let _ = peer;
        }
    }
}

/// TCP transport: dials neighbors with lower ids, accepts from higher ids,
/// one connection per edge, HELLO identifying the dialer.
pub struct TcpTransport {
    my_id: NodeId,
    neighbors: Vec<NodeId>,
    writers: BTreeMap<NodeId, TcpStream>,
    inbound: mpsc::Receiver<(NodeId, Result<PeerMessage, String>)>,
}

const DIAL_RETRY: Duration = Duration::from_millis(100);
const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(10);

impl TcpTransport {
    /// Binds `0.0.0.0:<peer_port>` and connects the mesh.
    pub fn connect(
        assignment: &NodeAssignment,
        graph: &TopologyGraph,
        timeout: Duration,
    ) -> Result<Self, NodeError> {
        let me = assignment
            .scenario
            .participant(assignment.node_id)
            .ok_or(NodeError::UnknownParticipant(assignment.node_id))?;
        let listener = TcpListener::bind(("0.0.0.0", me.peer_port))
            .map_err(|e| NodeError::Transport(format!("bind peer port {}: {e}", me.peer_port)))?;
        Self::connect_with_listener(listener, assignment, graph, timeout)
    }

    /// Connects the mesh over a pre-bound listener (the simulation reserves
    /// ephemeral ports up front this way).
    pub fn connect_with_listener(
        listener: TcpListener,
        assignment: &NodeAssignment,
        graph: &TopologyGraph,
        timeout: Duration,
    ) -> Result<Self, NodeError> {
        let my_id = assignment.node_id;
        let my_neighbors = neighbors(graph, my_id)?;
        let deadline = Instant::now() + timeout;
        let (tx, rx) = mpsc::channel();
        let mut writers = BTreeMap::new();

        // Dial every lower-id neighbor; they are accepting.
        for &peer in my_neighbors.iter().filter(|&&p| p < my_id) {
            let spec = assignment
                .scenario
                .participant(peer)
                .ok_or(NodeError::UnknownParticipant(peer))?;
            let stream = dial_until(&spec.host, spec.peer_port, deadline)?;
            stream.set_nodelay(true).ok();
            let mut stream = stream;
            let hello = encode_frame(&PeerMessage::Hello { node_id: my_id })?;
            stream
                .write_all(&hello)
                .map_err(|e| NodeError::PeerConnection { peer, message: e.to_string() })?;
            spawn_reader(peer, &stream, tx.clone())?;
            writers.insert(peer, stream);
        }

        // Accept from every higher-id neighbor.
        let mut expected: std::collections::BTreeSet<NodeId> = my_neighbors
            .iter()
            .copied()
            .filter(|&p| p > my_id)
            .collect();
        if !expected.is_empty() {
            listener
                .set_nonblocking(true)
                .map_err(|e| NodeError::Transport(e.to_string()))?;
            while !expected.is_empty() {
                match listener.accept() {
                    Ok((mut stream, _)) => {
                        stream.set_nonblocking(false).ok();
                        stream.set_read_timeout(Some(HANDSHAKE_TIMEOUT)).ok();
                        let peer = match decode_frame(&mut stream) {
                            Ok(PeerMessage::Hello { node_id }) if expected.contains(&node_id) => node_id,
                            Ok(PeerMessage::Hello { node_id }) => {
                                log::warn!("unexpected hello from node {node_id}, dropping");
                                continue;
                            }
                            other => {
                                log::warn!("bad handshake: {other:?}");
                                continue;
                            }
                        };
                        expected.remove(&peer);
                        stream.set_nodelay(true).ok();
                        stream.set_read_timeout(None).ok();
                        spawn_reader(peer, &stream, tx.clone())?;
                        writers.insert(peer, stream);
                    }
                    Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                        if Instant::now() >= deadline {
                            let missing = *expected.iter().next().unwrap();
                            return Err(NodeError::PeerConnection {
                                peer: missing,
                                message: "no inbound connection before timeout".into(),
                            });
                        }
                        std::thread::sleep(Duration::from_millis(10));
                    }
                    Err(e) => return Err(NodeError::Transport(e.to_string())),
                }
            }
        }
        Ok(TcpTransport {
            my_id,
            neighbors: my_neighbors,
            writers,
            inbound: rx,
        })
    }
}

fn dial_until(host: &str, port: u16, deadline: Instant) -> Result<TcpStream, NodeError> {
    loop {
        match TcpStream::connect((host, port)) {
            Ok(stream) => return Ok(stream),
            Err(e) => {
                if Instant::now() >= deadline {
                    return Err(NodeError::Transport(format!(
                        "dial {host}:{port} failed before timeout: {e}"
                    )));
                }
                std::thread::sleep(DIAL_RETRY);
            }
        }
    }
}

fn spawn_reader(
    peer: NodeId,
    stream: &TcpStream,
    tx: mpsc::Sender<(NodeId, Result<PeerMessage, String>)>,
) -> Result<(), NodeError> {
    let mut reader = stream
        .try_clone()
        .map_err(|e| NodeError::Transport(format!("clone stream: {e}")))?;
    std::thread::Builder::new()
        .name(format!("peer-reader-{peer}"))
        .spawn(move || loop {
            match decode_frame(&mut reader) {
                Ok(PeerMessage::Bye) => {
                    let _ = tx.send((peer, Ok(PeerMessage::Bye)));
                    break;
                }
                Ok(msg) => {
                    if tx.send((peer, Ok(msg))).is_err() {
                        break;
                    }
                }
                Err(e) => {
                    let _ = tx.send((peer, Err(e.to_string())));
                    break;
                }
            }
        })
        .map_err(|e| NodeError::Transport(format!("spawn reader: {e}")))?;
    Ok(())
}

impl PeerTransport for TcpTransport {
    fn my_id(&self) -> NodeId {
        self.my_id
    }

    fn neighbor_ids(&self) -> &[NodeId] {
        &self.neighbors
    }

    fn send(&mut self, peer: NodeId, msg: &PeerMessage) -> Result<(), NodeError> {
        let frame = encode_frame(msg)?;
        let stream = self
            .writers
            .get_mut(&peer)
            .ok_or(NodeError::UnknownPeer(peer))?;
        stream
            .write_all(&frame)
            .and_then(|_| stream.flush())
            .map_err(|e| NodeError::PeerConnection { peer, message: e.to_string() })
    }

    fn recv(&mut self, timeout: Duration) -> Result<(NodeId, PeerMessage), NodeError> {
        match self.inbound.recv_timeout(timeout) {
            Ok((peer, Ok(msg))) => Ok((peer, msg)),
            Ok((peer, Err(message))) => Err(NodeError::PeerConnection { peer, message }),
            Err(mpsc::RecvTimeoutError::Timeout) => Err(NodeError::RecvTimeout),
            Err(mpsc::RecvTimeoutError::Disconnected) => Err(NodeError::PeerConnection {
                peer: self.my_id,
                message: "all reader threads ended".into(),
            }),
        }
    }

    fn close(&mut self) {
        for (_, stream) in self.writers.iter_mut() {
            if let Ok(frame) = encode_frame(&PeerMessage::Bye) {
                let _ = stream.write_all(&frame);
                let _ = stream.flush();
            }
            let _ = stream.shutdown(std::net::Shutdown::Write);
        }
    }
}
