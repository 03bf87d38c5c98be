//! Configuration distribution: each node runs a one-shot HTTP server that
//! accepts a single valid `POST /config` and then terminates to release
//! the port.

use serde::{Deserialize, Serialize};
use std::io::Read;
use std::net::{TcpListener, ToSocketAddrs};
use std::time::{Duration, Instant};

use super::http::{read_request, write_response, HttpTarget};
use super::ProtocolError;
use crate::scenario::{validate_scenario, ScenarioConfig};

/// What the controller actually sends a node: the shared scenario plus the
/// recipient's identity and derived seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeAssignment {
    pub node_id: u16,
    pub seed: u64,
    pub scenario: ScenarioConfig,
}

impl NodeAssignment {
    pub fn for_node(scenario: &ScenarioConfig, node_id: u16) -> Self {
        NodeAssignment {
            node_id,
            seed: scenario.node_seed(node_id),
            scenario: scenario.clone(),
        }
    }
}

/// Body of the 200 response to a valid config POST.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigAck {
    pub status: String,
    pub node_id: u16,
}

/// Serves exactly one configuration on `bind`, then closes the listener so
/// the port is immediately re-bindable.
///
/// Bad requests do not consume the server: a malformed request line gets
/// 400, a wrong path 404, a wrong method 405, and an invalid config body
/// 400 with the violation list; in each case the server keeps listening.
/// Idling past `idle_timeout` returns an error to the caller.
pub fn serve_config_once(
    bind: &str,
    idle_timeout: Duration,
) -> Result<NodeAssignment, ProtocolError> {
    let listener = TcpListener::bind(bind)?;
    listener.set_nonblocking(true)?;
    let deadline = Instant::now() + idle_timeout;
    loop {
        match listener.accept() {
            Ok((mut stream, _)) => {
                stream.set_nonblocking(false)?;
                stream.set_read_timeout(Some(Duration::from_secs(10)))?;
                stream.set_write_timeout(Some(Duration::from_secs(10)))?;
                let request = match read_request(&mut stream) {
                    Ok(r) => r,
                    Err(e) => {
                        let _ = write_response(
                            &mut stream,
                            400,
                            "text/plain",
                            format!("bad request: {e}").as_bytes(),
                        );
                        continue;
                    }
                };
                if request.path != "/config" {
                    let _ = write_response(&mut stream, 404, "text/plain", b"not found");
                    continue;
                }
                if request.method != "POST" {
                    let _ = write_response(&mut stream, 405, "text/plain", b"method not allowed");
                    continue;
                }
                let assignment: NodeAssignment = match serde_json::from_slice(&request.body) {
                    Ok(a) => a,
                    Err(e) => {
                        let _ = write_response(
                            &mut stream,
                            400,
                            "text/plain",
                            format!("invalid config: {e}").as_bytes(),
                        );
                        continue;
                    }
                };
                let mut violations = validate_scenario(&assignment.scenario);
                if assignment.scenario.participant(assignment.node_id).is_none() {
                    violations.push(crate::scenario::Violation {
                        path: "node_id".into(),
                        message: format!("{} is not a participant", assignment.node_id),
                    });
                }
                if !violations.is_empty() {
                    let body = serde_json::to_vec(&violations)?;
                    let _ = write_response(&mut stream, 400, "application/json", &body);
                    continue;
                }

                let ack = ConfigAck {
                    status: "ok".into(),
                    node_id: assignment.node_id,
                };
                write_response(&mut stream, 200, "application/json", &serde_json::to_vec(&ack)?)?;
                // Let the client close first so no TIME_WAIT lands on our
                // listening port and it can be re-bound immediately.
                let _ = stream.shutdown(std::net::Shutdown::Write);
                let _ = stream.set_read_timeout(Some(Duration::from_millis(500)));
                let mut drain = [0u8; 256];
                while matches!(stream.read(&mut drain), Ok(n) if n > 0) {}
                return Ok(assignment);
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    return Err(ProtocolError::ConfigTimeout);
                }
                std::thread::sleep(Duration::from_millis(5));
            }
            Err(e) => return Err(ProtocolError::Io(e)),
        }
    }
}

/// Controller-side push of one node's assignment to its config server.
pub fn post_config(
    host: &str,
    port: u16,
    assignment: &NodeAssignment,
    timeout: Duration,
) -> Result<ConfigAck, ProtocolError> {
    // Guard against unresolvable hosts before building the URL.
    format!("{host}:{port}")
        .to_socket_addrs()
        .map_err(ProtocolError::Io)?;
    let target = HttpTarget::parse(&format!("http://{host}:{port}"))?;
    let body = serde_json::to_vec(assignment)?;
    let resp = super::http::post_json(&target, "/config", &body, timeout)?;
    if resp.status != 200 {
        return Err(ProtocolError::Remote {
            status: resp.status,
            body: String::from_utf8_lossy(&resp.body).into_owned(),
        });
    }
    Ok(serde_json::from_slice(&resp.body)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::parse_scenario;
    use std::net::TcpStream;

    fn test_scenario() -> ScenarioConfig {
        parse_scenario(
            r#"{
                "scenario_name": "t",
                "master_seed": 7,
                "participants": [
                    {"node_id": 0, "host": "127.0.0.1", "config_port": 9001, "peer_port": 9101, "metrics_endpoint": "http://127.0.0.1:9000"},
                    {"node_id": 1, "host": "127.0.0.1", "config_port": 9002, "peer_port": 9102, "metrics_endpoint": "http://127.0.0.1:9000"}
                ],
                "topology": {"kind": "fully"},
                "dataset": {"source": "synthetic", "synthetic": {"n_samples": 40, "n_features": 4, "n_classes": 2, "cluster_stddev": 0.1}},
                "model": {"input_dim": 4, "hidden_dims": [4], "output_dim": 2}
            }"#,
        )
        .unwrap()
    }

    fn free_port() -> u16 {
        TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
    }

    #[test]
    fn accepts_one_config_then_releases_port() {
        let port = free_port();
        let bind = format!("127.0.0.1:{port}");
        let server_bind = bind.clone();
        let server =
            std::thread::spawn(move || serve_config_once(&server_bind, Duration::from_secs(10)));

        let scenario = test_scenario();
        let assignment = NodeAssignment::for_node(&scenario, 1);
        let ack = post_config("127.0.0.1", port, &assignment, Duration::from_secs(5)).unwrap();
        assert_eq!(ack.status, "ok");
        assert_eq!(ack.node_id, 1);

        let received = server.join().unwrap().unwrap();
        assert_eq!(received, assignment);
        assert_eq!(received.seed, 7 ^ 2);

        // Port released: re-bind must succeed immediately.
        let rebound = TcpListener::bind(&bind);
        assert!(rebound.is_ok(), "port not re-bindable: {rebound:?}");
    }

    #[test]
    fn wrong_path_and_method_keep_server_alive() {
        let port = free_port();
        let bind = format!("127.0.0.1:{port}");
        let server_bind = bind.clone();
        let server =
            std::thread::spawn(move || serve_config_once(&server_bind, Duration::from_secs(10)));
        std::thread::sleep(Duration::from_millis(50));

        let target = HttpTarget::parse(&format!("http://127.0.0.1:{port}")).unwrap();
        let resp = super::super::http::post_json(&target, "/wrong", b"{}", Duration::from_secs(5)).unwrap();
        assert_eq!(resp.status, 404);
        let resp = super::super::http::get(&target, "/config", Duration::from_secs(5)).unwrap();
        assert_eq!(resp.status, 405);

        // Malformed request line.
        {
            use std::io::Write;
            let mut stream = TcpStream::connect(format!("127.0.0.1:{port}")).unwrap();
            stream.write_all(b"garbage\r\n\r\n").unwrap();
            let _ = stream.flush();
        }

        // Invalid config body: violations listed, server continues.
        let mut scenario = test_scenario();
        scenario.rounds = 0;
        let assignment = NodeAssignment {
            node_id: 0,
            seed: 1,
            scenario,
        };
        let body = serde_json::to_vec(&assignment).unwrap();
        let resp = super::super::http::post_json(&target, "/config", &body, Duration::from_secs(5)).unwrap();
        assert_eq!(resp.status, 400);
        assert!(String::from_utf8_lossy(&resp.body).contains("rounds"));

        // A valid config still lands.
        let good = NodeAssignment::for_node(&test_scenario(), 0);
        let ack = post_config("127.0.0.1", port, &good, Duration::from_secs(5)).unwrap();
        assert_eq!(ack.node_id, 0);
        server.join().unwrap().unwrap();
    }

    #[test]
    fn idle_timeout_errors_out() {
        let port = free_port();
        let err = serve_config_once(&format!("127.0.0.1:{port}"), Duration::from_millis(100));
        assert!(matches!(err, Err(ProtocolError::ConfigTimeout)));
    }
}
