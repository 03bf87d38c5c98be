//! Acceptance suite: one test per criterion, each printing a PASS/FAIL
//! line (run with `--nocapture` to see them live). Criterion 8 needs local
//! MNIST IDX files and prints SKIP when they are absent.

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fedmesh_core::controller::RunRecord;
use fedmesh_core::model::{
    gradient, init_model, mean_loss, param_count, serialize_params, ModelParams,
};
use fedmesh_core::node::aggregate;
use fedmesh_core::protocol::{decode_frame, encode_frame, PeerMessage};
use fedmesh_core::scenario::{parse_scenario, InitScheme, ModelSpec, ScenarioConfig, TopologyKind};
use fedmesh_core::simulation::{run_simulation, SimPlan, SimTransport};
use fedmesh_core::telemetry::{integrate_energy, PowerSample};

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

fn verdict(n: u32, name: &str, started: Instant, limit: Duration, result: Result<(), String>) {
    let elapsed = started.elapsed();
    match &result {
        Ok(()) if elapsed <= limit => {
            println!("ACCEPTANCE {n} ({name}): PASS [{:.2}s]", elapsed.as_secs_f64());
        }
        Ok(()) => {
            println!(
                "ACCEPTANCE {n} ({name}): FAIL [runtime {:.2}s exceeds {:.0}s]",
                elapsed.as_secs_f64(),
                limit.as_secs_f64()
            );
            panic!("criterion {n} exceeded its runtime bound");
        }
        Err(msg) => {
            println!("ACCEPTANCE {n} ({name}): FAIL [{msg}]");
            panic!("criterion {n} failed: {msg}");
        }
    }
}

fn small_arch() -> ModelSpec {
    ModelSpec {
        input_dim: 10,
        hidden_dims: vec![4],
        output_dim: 3,
        init_scheme: InitScheme::UniformHe,
    }
}

#[test]
fn criterion_01_fedavg_oracle_equivalence() {
    let started = Instant::now();
    let arch = small_arch();
    let mut rng = ChaCha8Rng::seed_from_u64(0xFEDA);
    let result = (|| {
        for case in 0..1000u64 {
            let models: Vec<ModelParams> = (0..5)
                .map(|_| {
                    let mut m = init_model(&arch, rng.random());
                    m.values.iter_mut().for_each(|v| *v = rng.random::<f64>() * 4.0 - 2.0);
                    m
                })
                .collect();
            let out = aggregate(&models[0], &models[1..], &[1.0; 5])
                .map_err(|e| format!("case {case}: {e}"))?;
            // Independent element-wise mean.
            for i in 0..out.values.len() {
                let mut sum = 0.0;
                for m in &models {
                    sum += m.values[i];
                }
                let expect = sum / 5.0;
                if (out.values[i] - expect).abs() > 1e-12 {
                    return Err(format!(
                        "case {case} index {i}: {} vs oracle {expect}",
                        out.values[i]
                    ));
                }
            }
        }
        Ok(())
    })();
    verdict(1, "fedavg oracle equivalence", started, Duration::from_secs(5), result);
}

#[test]
fn criterion_02_gradient_matches_finite_differences() {
    let started = Instant::now();
    let arch = small_arch();
    let result = (|| {
        for case in 0..50u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(0x6AD0 + case);
            let model = init_model(&arch, rng.random());
            let batch: Vec<f64> = (0..8 * 10).map(|_| rng.random::<f64>()).collect();
            let labels: Vec<usize> = (0..8).map(|_| rng.random_range(0..3)).collect();
            let analytic = gradient(&model, &batch, &labels).map_err(|e| e.to_string())?;

            let h = 1e-6;
            let mut probe = model.clone();
            let mut max_rel = 0.0f64;
            for i in 0..probe.values.len() {
                let orig = probe.values[i];
                probe.values[i] = orig + h;
                let up = mean_loss(&probe, &batch, &labels).map_err(|e| e.to_string())?;
                probe.values[i] = orig - h;
                let down = mean_loss(&probe, &batch, &labels).map_err(|e| e.to_string())?;
                probe.values[i] = orig;
                let numeric = (up - down) / (2.0 * h);
                let rel = (analytic[i] - numeric).abs()
                    / analytic[i].abs().max(numeric.abs()).max(1e-4);
                max_rel = max_rel.max(rel);
            }
            if max_rel > 1e-5 {
                return Err(format!("case {case}: max relative error {max_rel}"));
            }
        }
        Ok(())
    })();
    verdict(2, "gradient vs central finite differences", started, Duration::from_secs(30), result);
}

#[test]
fn criterion_03_protocol_round_trip_and_one_shot_config() {
    let started = Instant::now();
    let result = (|| {
        // 10^4 randomized messages encode -> decode bit-exactly.
        let mut rng = ChaCha8Rng::seed_from_u64(0x0F0F);
        for case in 0..10_000u64 {
            let msg = match rng.random_range(0..3u8) {
                0 => PeerMessage::Hello { node_id: rng.random() },
                1 => {
                    let len = rng.random_range(0..2048usize);
                    let params_payload: Vec<u8> = (0..len).map(|_| rng.random()).collect();
                    PeerMessage::Model {
                        round: rng.random(),
                        node_id: rng.random(),
                        params_payload,
                    }
                }
                _ => PeerMessage::Bye,
            };
            let frame = encode_frame(&msg).map_err(|e| format!("case {case}: {e}"))?;
            if frame.len() as u64 != msg.wire_size() {
                return Err(format!("case {case}: wire size mismatch"));
            }
            let decoded = decode_frame(&mut std::io::Cursor::new(&frame))
                .map_err(|e| format!("case {case}: {e}"))?;
            if decoded != msg {
                return Err(format!("case {case}: round trip not bit-exact"));
            }
        }

        // Config server: exactly one config, then the port re-binds.
        let port = std::net::TcpListener::bind("127.0.0.1:0")
            .map_err(|e| e.to_string())?
            .local_addr()
            .map_err(|e| e.to_string())?
            .port();
        let bind = format!("127.0.0.1:{port}");
        let scenario = quick_scenario("accept3", 3, TopologyKind::Fully, 2);
        let server_bind = bind.clone();
        let server = std::thread::spawn(move || {
            fedmesh_core::protocol::serve_config_once(&server_bind, Duration::from_secs(20))
        });
        std::thread::sleep(Duration::from_millis(50));
        let assignment = fedmesh_core::protocol::NodeAssignment::for_node(&scenario, 1);
        let ack =
            fedmesh_core::protocol::post_config("127.0.0.1", port, &assignment, Duration::from_secs(5))
                .map_err(|e| format!("config post: {e}"))?;
        if ack.node_id != 1 {
            return Err("wrong ack".into());
        }
        let received = server
            .join()
            .map_err(|_| "server thread panicked".to_string())?
            .map_err(|e| format!("server: {e}"))?;
        if received != assignment {
            return Err("assignment mangled in flight".into());
        }
        std::net::TcpListener::bind(&bind)
            .map_err(|e| format!("port not immediately re-bindable: {e}"))?;
        Ok(())
    })();
    verdict(3, "protocol round-trip, one-shot config server", started, Duration::from_secs(30), result);
}

/// Small synthetic scenario for the structural criteria.
fn quick_scenario(name: &str, seed: u64, kind: TopologyKind, rounds: u32) -> ScenarioConfig {
    let kind_str = kind.to_string();
    let doc = format!(
        r#"{{
            "scenario_name": "{name}",
            "master_seed": {seed},
            "rounds": {rounds},
            "learning_rate": 0.3,
            "batch_size": 16,
            "metric_interval_ms": 1000,
            "participants": [
                {{"node_id": 0, "host": "10.0.0.10", "config_port": 9001, "peer_port": 9101, "metrics_endpoint": "http://10.0.0.1:9000"}},
                {{"node_id": 1, "host": "10.0.0.11", "config_port": 9001, "peer_port": 9101, "metrics_endpoint": "http://10.0.0.1:9000"}},
                {{"node_id": 2, "host": "10.0.0.12", "config_port": 9001, "peer_port": 9101, "metrics_endpoint": "http://10.0.0.1:9000"}},
                {{"node_id": 3, "host": "10.0.0.13", "config_port": 9001, "peer_port": 9101, "metrics_endpoint": "http://10.0.0.1:9000"}}
            ],
            "topology": {{"kind": "{kind_str}", "seed": 7}},
            "dataset": {{
                "source": "synthetic",
                "synthetic": {{"n_samples": 600, "n_features": 8, "n_classes": 3, "cluster_stddev": 0.05}},
                "test_fraction": 0.2
            }},
            "model": {{"input_dim": 8, "hidden_dims": [16], "output_dim": 3}},
            "power_meter": {{"sample_interval_ms": 1000}}
        }}"#
    );
    parse_scenario(&doc).unwrap()
}

fn mem_plan(scenario: ScenarioConfig) -> SimPlan {
    SimPlan {
        scenario,
        time_compression: 1.0,
        transport: SimTransport::InMemory,
        round_duration_ms: None,
    }
}

#[test]
fn criterion_04_traffic_proportional_to_degree() {
    let started = Instant::now();
    let result = (|| {
        let rounds = 10;
        let (ring, _) = run_simulation(&mem_plan(quick_scenario("t4r", 1, TopologyKind::Ring, rounds)))
            .map_err(|e| e.to_string())?;
        let (fully, _) = run_simulation(&mem_plan(quick_scenario("t4f", 1, TopologyKind::Fully, rounds)))
            .map_err(|e| e.to_string())?;
        let (star, _) = run_simulation(&mem_plan(quick_scenario("t4s", 1, TopologyKind::Star, rounds)))
            .map_err(|e| e.to_string())?;

        let arch = &fully.scenario.model;
        let frame = 4 + 1 + 4 + 2 + (12 + 8 * param_count(arch)) as u64;
        for id in 0..4u16 {
            let ring_sent = ring.summaries[&id].total_bytes_sent;
            let fully_sent = fully.summaries[&id].total_bytes_sent;
            // Closed form, zero tolerance.
            if ring_sent != rounds as u64 * 2 * frame {
                return Err(format!("ring node {id} sent {ring_sent}, closed form says {}", rounds as u64 * 2 * frame));
            }
            if fully_sent != rounds as u64 * 3 * frame {
                return Err(format!("fully node {id} sent {fully_sent}"));
            }
            if ring_sent * 3 != fully_sent * 2 {
                return Err(format!("node {id}: ring:fully != 2:3 ({ring_sent}:{fully_sent})"));
            }
        }
        let hub_sent = star.summaries[&0].total_bytes_sent;
        for leaf in 1..4u16 {
            let leaf_sent = star.summaries[&leaf].total_bytes_sent;
            if hub_sent != 3 * leaf_sent {
                return Err(format!("star hub:leaf != 3:1 ({hub_sent}:{leaf_sent})"));
            }
        }
        Ok(())
    })();
    verdict(4, "traffic proportional to degree (30/20, P0:30 Oth:10)", started, Duration::from_secs(120), result);
}

#[test]
fn criterion_05_energy_accounting() {
    let started = Instant::now();
    let result = (|| {
        // Closed forms within 0.1%.
        let mut constant: Vec<PowerSample> = (0..=425u64)
            .map(|s| PowerSample {
                timestamp_ms: s * 1000,
                voltage_v: 5.0,
                current_a: 3.3 / 5.0,
                power_w: 3.3,
            })
            .collect();
        constant.push(PowerSample {
            timestamp_ms: 425_450,
            voltage_v: 5.0,
            current_a: 3.3 / 5.0,
            power_w: 3.3,
        });
        let e = integrate_energy(&constant).map_err(|e| e.to_string())?;
        let expect = 3.3 * 425.45;
        if (e - expect).abs() / expect > 0.001 {
            return Err(format!("constant-power energy {e} vs {expect}"));
        }
        let ramp: Vec<PowerSample> = (0..=100u64)
            .map(|s| PowerSample {
                timestamp_ms: s * 1000,
                voltage_v: 0.0,
                current_a: 0.0,
                power_w: 4.0 * s as f64 / 100.0,
            })
            .collect();
        let e = integrate_energy(&ramp).map_err(|e| e.to_string())?;
        if (e - 200.0).abs() / 200.0 > 0.001 {
            return Err(format!("ramp energy {e} vs 200"));
        }

        // A device-scale run: 10 rounds stretched to 40 s each of simulated
        // time (~420 s total with setup), default meter, compressed clock.
        let plan = SimPlan {
            scenario: quick_scenario("t5", 5, TopologyKind::Fully, 10),
            time_compression: 50.0,
            transport: SimTransport::InMemory,
            round_duration_ms: Some(40_000),
        };
        let (record, _) = run_simulation(&plan).map_err(|e| e.to_string())?;
        for (id, summary) in &record.summaries {
            if !(1250.0..=1450.0).contains(&summary.energy_j) {
                return Err(format!(
                    "node {id}: energy {} J outside [1250, 1450]",
                    summary.energy_j
                ));
            }
        }
        Ok(())
    })();
    verdict(5, "trapezoidal energy, 1250-1450 J band", started, Duration::from_secs(60), result);
}

#[test]
fn criterion_06_full_graph_consensus() {
    let started = Instant::now();
    let result = (|| {
        for seed in [11u64, 22, 33] {
            let (record, _) =
                run_simulation(&mem_plan(quick_scenario("t6", seed, TopologyKind::Fully, 10)))
                    .map_err(|e| e.to_string())?;
            for round in 0..10 {
                let digests: Vec<u64> = record
                    .summaries
                    .values()
                    .map(|s| s.rounds[round].params_digest)
                    .collect();
                if !digests.windows(2).all(|w| w[0] == w[1]) {
                    return Err(format!("seed {seed} round {round}: digests diverge {digests:?}"));
                }
            }
        }
        Ok(())
    })();
    verdict(6, "bit-identical consensus on full graphs, 3 seeds", started, Duration::from_secs(120), result);
}

fn desk_scale_scenario(seed: u64, kind: TopologyKind) -> ScenarioConfig {
    let path = workspace_root().join("scenarios/fc_synth.json");
    let text = std::fs::read_to_string(path).expect("scenarios/fc_synth.json present");
    let mut scenario = parse_scenario(&text).expect("valid shipped scenario");
    scenario.master_seed = seed;
    scenario.topology.kind = kind;
    scenario
}

#[test]
fn criterion_07_desk_scale_learning() {
    let started = Instant::now();
    let result = (|| {
        for seed in [42u64, 43, 44] {
            let (record, report) =
                run_simulation(&mem_plan(desk_scale_scenario(seed, TopologyKind::Fully)))
                    .map_err(|e| e.to_string())?;
            if record.status != fedmesh_core::RunStatus::Complete {
                return Err(format!("seed {seed}: status {:?}", record.status));
            }
            if report.average.avg_f1 < 0.90 {
                return Err(format!("seed {seed}: macro-F1 {} < 0.90", report.average.avg_f1));
            }
        }
        Ok(())
    })();
    verdict(7, "synthetic 4-node macro-F1 >= 0.90, 3 seeds", started, Duration::from_secs(120), result);
}

#[test]
fn criterion_08_mnist_reproduction_optional() {
    let started = Instant::now();
    let data_dir = std::env::var("FEDMESH_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|_| workspace_root().join("data/mnist"));
    let missing: Vec<&str> = fedmesh_core::dataset::MNIST_FILES
        .iter()
        .copied()
        .filter(|name| !data_dir.join(name).exists())
        .collect();
    if !missing.is_empty() {
        println!(
            "ACCEPTANCE 8 (MNIST reproduction): SKIP [missing {} in {}]",
            missing.join(", "),
            data_dir.display()
        );
        return;
    }
    let result = (|| {
        let path = workspace_root().join("scenarios/fc_mnist.json");
        let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
        let mut scenario = parse_scenario(&text).map_err(|e| e.to_string())?;
        scenario.dataset.data_dir = data_dir.display().to_string();
        let (record, report) = run_simulation(&mem_plan(scenario)).map_err(|e| e.to_string())?;
        if record.status != fedmesh_core::RunStatus::Complete {
            return Err(format!("status {:?}", record.status));
        }
        if report.average.avg_f1 < 0.75 {
            return Err(format!("mean macro-F1 {} < 0.75", report.average.avg_f1));
        }
        Ok(())
    })();
    verdict(8, "MNIST reproduction", started, Duration::from_secs(900), result);
}

#[test]
fn criterion_09_topology_density_trend() {
    let started = Instant::now();
    let result = (|| {
        let mut means = std::collections::BTreeMap::new();
        for kind in [TopologyKind::Fully, TopologyKind::Random, TopologyKind::Ring] {
            let mut total = 0.0;
            for seed in [1u64, 2, 3, 4, 5] {
                let (_, report) = run_simulation(&mem_plan(desk_scale_scenario(seed, kind)))
                    .map_err(|e| e.to_string())?;
                total += report.average.avg_f1;
            }
            means.insert(kind.to_string(), total / 5.0);
        }
        let fully = means["fully"];
        for sparse in ["random", "ring"] {
            if fully < means[sparse] - 0.02 {
                return Err(format!(
                    "mean F1 fully {fully} < {sparse} {} - 0.02",
                    means[sparse]
                ));
            }
        }
        println!("  topology mean F1 over 5 seeds: {means:?}");
        Ok(())
    })();
    verdict(9, "denser topologies trend, 5 seeds", started, Duration::from_secs(600), result);
}

#[test]
fn criterion_10_physical_mode_rehearsal_over_loopback() {
    let started = Instant::now();
    let result = (|| {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        // Reserve distinct loopback ports: 4 config, 4 peer, 1 ingest.
        let mut ports = Vec::new();
        {
            let listeners: Vec<std::net::TcpListener> = (0..9)
                .map(|_| std::net::TcpListener::bind("127.0.0.1:0").unwrap())
                .collect();
            for l in &listeners {
                ports.push(l.local_addr().unwrap().port());
            }
        }
        let ingest_port = ports[8];
        let mut scenario = quick_scenario("t10", 77, TopologyKind::Fully, 5);
        for (i, p) in scenario.participants.iter_mut().enumerate() {
            p.host = "127.0.0.1".into();
            p.config_port = ports[i];
            p.peer_port = ports[4 + i];
            p.metrics_endpoint = format!("http://127.0.0.1:{ingest_port}");
        }
        let scenario_path = dir.path().join("scenario.json");
        std::fs::write(
            &scenario_path,
            fedmesh_core::scenario::serialize_scenario(&scenario),
        )
        .map_err(|e| e.to_string())?;

        let binary = env!("CARGO_BIN_EXE_fedmesh");
        let mut children = Vec::new();
        for i in 0..4 {
            let child = std::process::Command::new(binary)
                .env("FEDMESH_LOG", "error")
                .args([
                    "node",
                    "--bind",
                    &format!("127.0.0.1:{}", ports[i]),
                    "--config-timeout-s",
                    "60",
                ])
                .stdout(std::process::Stdio::null())
                .stderr(std::process::Stdio::null())
                .spawn()
                .map_err(|e| format!("spawn node {i}: {e}"))?;
            children.push(child);
        }
        let out_dir = dir.path().join("out");
        let mut controller = std::process::Command::new(binary)
            .env("FEDMESH_LOG", "error")
            .arg("controller")
            .arg("--scenario")
            .arg(&scenario_path)
            .args(["--bind", &format!("127.0.0.1:{ingest_port}")])
            .arg("--out")
            .arg(&out_dir)
            .args(["--deadline-s", "120"])
            .stdout(std::process::Stdio::null())
            .stderr(std::process::Stdio::null())
            .spawn()
            .map_err(|e| format!("spawn controller: {e}"))?;

        // Watchdog wait.
        let deadline = Instant::now() + Duration::from_secs(150);
        let controller_status = loop {
            if let Some(status) = controller.try_wait().map_err(|e| e.to_string())? {
                break status;
            }
            if Instant::now() >= deadline {
                let _ = controller.kill();
                for child in &mut children {
                    let _ = child.kill();
                }
                return Err("controller did not finish before the watchdog".into());
            }
            std::thread::sleep(Duration::from_millis(100));
        };
        for (i, mut child) in children.into_iter().enumerate() {
            let status = child.wait().map_err(|e| e.to_string())?;
            if !status.success() {
                return Err(format!("node process {i} exited with {status}"));
            }
        }
        if !controller_status.success() {
            return Err(format!("controller exited with {controller_status}"));
        }

        let record_text = std::fs::read_to_string(out_dir.join("run_record.json"))
            .map_err(|e| format!("run_record.json: {e}"))?;
        let record: RunRecord = serde_json::from_str(&record_text).map_err(|e| e.to_string())?;
        if record.status != fedmesh_core::RunStatus::Complete {
            return Err(format!("physical run status {:?}", record.status));
        }
        if record.summaries.len() != 4 {
            return Err(format!("{} summaries, expected 4", record.summaries.len()));
        }

        // Same seeds in-process: the trajectory must be bit-identical.
        let (sim_record, _) = run_simulation(&mem_plan(quick_scenario("t10", 77, TopologyKind::Fully, 5)))
            .map_err(|e| e.to_string())?;
        for id in 0..4u16 {
            let physical = &record.summaries[&id];
            let simulated = &sim_record.summaries[&id];
            let pd: Vec<u64> = physical.rounds.iter().map(|r| r.params_digest).collect();
            let sd: Vec<u64> = simulated.rounds.iter().map(|r| r.params_digest).collect();
            if pd != sd {
                return Err(format!("node {id}: digests differ (physical {pd:?} vs sim {sd:?})"));
            }
            if physical.f1_per_round != simulated.f1_per_round {
                return Err(format!("node {id}: f1 trajectories differ"));
            }
            if physical.total_bytes_sent != simulated.total_bytes_sent {
                return Err(format!("node {id}: byte counters differ"));
            }
        }
        Ok(())
    })();
    verdict(10, "physical-mode rehearsal over loopback", started, Duration::from_secs(180), result);
}

/// Model serialization sanity used by several criteria: keep the payload
/// arithmetic honest for the closed forms above.
#[test]
fn payload_size_arithmetic_holds() {
    let arch = ModelSpec {
        input_dim: 784,
        hidden_dims: vec![128],
        output_dim: 10,
        init_scheme: InitScheme::UniformHe,
    };
    let model = init_model(&arch, 0);
    assert_eq!(serialize_params(&model).len(), 8 + 4 + 814_160);
}
