//! Resource and power telemetry: the simulated meter standing in for the
//! physical USB multimeter, trapezoidal energy integration, CPU/RAM
//! sampling (simulated or from /proc), and the power-log CSV format.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

use crate::scenario::{MeterBackend, MeterSpec};

/// Nominal supply voltage of the simulated meter; current is derived as
/// power / voltage so samples stay internally consistent.
pub const NOMINAL_VOLTAGE_V: f64 = 5.0;

/// One power reading. `power_w` equals `voltage_v * current_a` within 1e-6
/// whenever voltage and current are present (zero means absent).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerSample {
    pub timestamp_ms: u64,
    pub voltage_v: f64,
    pub current_a: f64,
    pub power_w: f64,
}

/// One CPU/RAM utilization reading, both in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResourceSample {
    pub timestamp_ms: u64,
    pub cpu_pct: f64,
    pub ram_pct: f64,
}

/// What the node is doing right now, as far as telemetry is concerned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activity {
    Training,
    Idle,
}

#[derive(Debug, Error)]
pub enum TelemetryError {
    #[error("cpu utilization {0} outside [0, 1]")]
    UtilizationRange(f64),
    #[error("power log timestamps not strictly increasing at index {0}")]
    NonMonotonic(usize),
    #[error("power log parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("power log io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("replay log is empty")]
    EmptyReplay,
}

/// Affine power model: `P = idle + coefficient * utilization + N(0, sigma^2)`,
/// clamped at zero. Defaults (2.6 W idle, 2.8 W/unit) are calibrated so the
/// simulated resource pattern lands in the 3.0-3.5 W band of a Raspberry
/// Pi-class device under federated training load.
#[derive(Debug, Clone)]
pub struct MeterModel {
    pub idle_watts: f64,
    pub load_coefficient_watts: f64,
    pub noise_stddev_watts: f64,
    rng: ChaCha8Rng,
}

impl MeterModel {
    pub fn new(idle_watts: f64, load_coefficient_watts: f64, noise_stddev_watts: f64, seed: u64) -> Self {
        MeterModel {
            idle_watts,
            load_coefficient_watts,
            noise_stddev_watts,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn from_spec(spec: &MeterSpec, seed: u64) -> Self {
        MeterModel::new(
            spec.idle_watts,
            spec.load_coefficient_watts,
            spec.noise_stddev_watts,
            seed,
        )
    }

    /// Instantaneous power draw for a cpu utilization in [0, 1].
    pub fn simulate_power(&mut self, utilization: f64) -> Result<f64, TelemetryError> {
        if !(0.0..=1.0).contains(&utilization) {
            return Err(TelemetryError::UtilizationRange(utilization));
        }
        let mut power = self.idle_watts + self.load_coefficient_watts * utilization;
        if self.noise_stddev_watts > 0.0 {
            let noise = Normal::new(0.0, self.noise_stddev_watts).expect("stddev validated");
            power += noise.sample(&mut self.rng);
        }
        Ok(power.max(0.0))
    }
}

/// A power meter backend. The physical USB multimeter is out of scope; the
/// interface lets it slot in later without touching callers.
pub trait PowerMeter: Send {
    /// Produces a sample for the given utilization at the given timestamp,
    /// or `None` when metering is disabled.
    fn sample(&mut self, utilization: f64, timestamp_ms: u64) -> Result<Option<PowerSample>, TelemetryError>;
}

/// Simulated meter: affine model plus derived voltage/current at the
/// nominal supply voltage.
pub struct SimulatedMeter {
    model: MeterModel,
}

impl SimulatedMeter {
    pub fn new(model: MeterModel) -> Self {
        SimulatedMeter { model }
    }
}

impl PowerMeter for SimulatedMeter {
    fn sample(&mut self, utilization: f64, timestamp_ms: u64) -> Result<Option<PowerSample>, TelemetryError> {
        let power_w = self.model.simulate_power(utilization)?;
        Ok(Some(PowerSample {
            timestamp_ms,
            voltage_v: NOMINAL_VOLTAGE_V,
            current_a: power_w / NOMINAL_VOLTAGE_V,
            power_w,
        }))
    }
}

/// Replays a recorded CSV log, re-stamping each row with the caller's
/// timestamp; wraps around at the end.
pub struct ReplayMeter {
    samples: Vec<PowerSample>,
    cursor: usize,
}

impl ReplayMeter {
    pub fn from_path(path: &Path) -> Result<Self, TelemetryError> {
        let samples = read_power_log(path)?;
        if samples.is_empty() {
            return Err(TelemetryError::EmptyReplay);
        }
        Ok(ReplayMeter { samples, cursor: 0 })
    }
}

impl PowerMeter for ReplayMeter {
    fn sample(&mut self, _utilization: f64, timestamp_ms: u64) -> Result<Option<PowerSample>, TelemetryError> {
        let row = self.samples[self.cursor % self.samples.len()];
        self.cursor += 1;
        Ok(Some(PowerSample { timestamp_ms, ..row }))
    }
}

/// Disabled metering.
pub struct NullMeter;

impl PowerMeter for NullMeter {
    fn sample(&mut self, _utilization: f64, _timestamp_ms: u64) -> Result<Option<PowerSample>, TelemetryError> {
        Ok(None)
    }
}

/// Builds the backend a scenario selects.
pub fn build_meter(spec: &MeterSpec, seed: u64) -> Result<Box<dyn PowerMeter>, TelemetryError> {
    match spec.backend {
        MeterBackend::Simulated => Ok(Box::new(SimulatedMeter::new(MeterModel::from_spec(spec, seed)))),
        MeterBackend::Replay => {
            let path = spec.replay_path.as_deref().unwrap_or("");
            Ok(Box::new(ReplayMeter::from_path(Path::new(path))?))
        }
        MeterBackend::None => Ok(Box::new(NullMeter)),
    }
}

/// Trapezoidal energy over an ordered power log, in joules. Empty and
/// single-sample logs integrate to zero.
pub fn integrate_energy(log: &[PowerSample]) -> Result<f64, TelemetryError> {
    for (i, pair) in log.windows(2).enumerate() {
        if pair[1].timestamp_ms <= pair[0].timestamp_ms {
            return Err(TelemetryError::NonMonotonic(i + 1));
        }
    }
    let mut joules = 0.0;
    for pair in log.windows(2) {
        let dt_s = (pair[1].timestamp_ms - pair[0].timestamp_ms) as f64 / 1000.0;
        joules += dt_s * (pair[0].power_w + pair[1].power_w) / 2.0;
    }
    Ok(joules)
}

// Simulated CPU pattern: training draws around 40% with peaks above it,
// idle/exchange around 8%, so a run that trains a bit over half the time
// averages in the mid-twenties. RAM sits near a third of memory.
const TRAINING_CPU_MEAN: f64 = 40.0;
const TRAINING_CPU_STD: f64 = 5.0;
const IDLE_CPU_MEAN: f64 = 8.0;
const IDLE_CPU_STD: f64 = 2.0;
const RAM_MEAN: f64 = 33.0;
const RAM_STD: f64 = 1.0;

/// Seeded two-level CPU/RAM generator for simulation runs.
pub struct SimulatedResources {
    rng: ChaCha8Rng,
    noise_scale: f64,
}

impl SimulatedResources {
    pub fn new(seed: u64) -> Self {
        SimulatedResources {
            rng: ChaCha8Rng::seed_from_u64(seed),
            noise_scale: 1.0,
        }
    }

    pub fn with_noise_scale(seed: u64, noise_scale: f64) -> Self {
        SimulatedResources {
            rng: ChaCha8Rng::seed_from_u64(seed),
            noise_scale,
        }
    }

    pub fn sample(&mut self, activity: Activity, timestamp_ms: u64) -> ResourceSample {
        let (cpu_mean, cpu_std) = match activity {
            Activity::Training => (TRAINING_CPU_MEAN, TRAINING_CPU_STD),
            Activity::Idle => (IDLE_CPU_MEAN, IDLE_CPU_STD),
        };
        let cpu = self.draw(cpu_mean, cpu_std);
        let ram = self.draw(RAM_MEAN, RAM_STD);
        ResourceSample {
            timestamp_ms,
            cpu_pct: cpu.clamp(0.0, 100.0),
            ram_pct: ram.clamp(0.0, 100.0),
        }
    }

    fn draw(&mut self, mean: f64, std: f64) -> f64 {
        let sigma = std * self.noise_scale;
        if sigma > 0.0 {
            let normal = Normal::new(mean, sigma).expect("stddev nonneg");
            normal.sample(&mut self.rng)
        } else {
            mean
        }
    }
}

/// CPU/RAM from the operating system: /proc/stat deltas between calls and
/// /proc/meminfo. Returns `None` when the counters cannot be read; the
/// caller keeps reporting with its last known values.
pub struct OsResources {
    last_cpu: Option<(u64, u64)>,
}

impl OsResources {
    pub fn new() -> Self {
        OsResources { last_cpu: None }
    }

    pub fn sample(&mut self, timestamp_ms: u64) -> Option<ResourceSample> {
        let cpu = self.cpu_pct();
        let ram = Self::ram_pct();
        match (cpu, ram) {
            (Some(cpu_pct), Some(ram_pct)) => Some(ResourceSample {
                timestamp_ms,
                cpu_pct,
                ram_pct,
            }),
            _ => None,
        }
    }

    fn cpu_pct(&mut self) -> Option<f64> {
        let stat = std::fs::read_to_string("/proc/stat").ok()?;
        let line = stat.lines().next()?;
        let fields: Vec<u64> = line
            .split_whitespace()
            .skip(1)
            .filter_map(|f| f.parse().ok())
            .collect();
        if fields.len() < 4 {
            return None;
        }
        let total: u64 = fields.iter().sum();
        let idle = fields[3] + fields.get(4).copied().unwrap_or(0);
        let busy = total - idle;
        let pct = match self.last_cpu {
            Some((prev_busy, prev_total)) if total > prev_total => {
                100.0 * (busy - prev_busy) as f64 / (total - prev_total) as f64
            }
            _ => 0.0,
        };
        self.last_cpu = Some((busy, total));
        Some(pct.clamp(0.0, 100.0))
    }

    fn ram_pct() -> Option<f64> {
        let meminfo = std::fs::read_to_string("/proc/meminfo").ok()?;
        let mut total = None;
        let mut available = None;
        for line in meminfo.lines() {
            if let Some(rest) = line.strip_prefix("MemTotal:") {
                total = rest.trim().split_whitespace().next()?.parse::<f64>().ok();
            } else if let Some(rest) = line.strip_prefix("MemAvailable:") {
                available = rest.trim().split_whitespace().next()?.parse::<f64>().ok();
            }
        }
        match (total, available) {
            (Some(t), Some(a)) if t > 0.0 => Some((100.0 * (1.0 - a / t)).clamp(0.0, 100.0)),
            _ => None,
        }
    }
}

impl Default for OsResources {
    fn default() -> Self {
        Self::new()
    }
}

/// Time source for telemetry timestamps and cadence. The simulation runs
/// nodes against a compressed clock so a multi-minute device run fits in
/// seconds of wall time without changing any computation.
pub trait Clock: Send + Sync {
    /// Current time in milliseconds on this clock's axis.
    fn now_ms(&self) -> u64;
    /// Sleeps for `ms` milliseconds of this clock's time.
    fn sleep_ms(&self, ms: u64);
}

/// Wall time in unix-epoch milliseconds.
pub struct WallClock;

impl Clock for WallClock {
    fn now_ms(&self) -> u64 {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }

    fn sleep_ms(&self, ms: u64) {
        std::thread::sleep(std::time::Duration::from_millis(ms));
    }
}

/// Run-relative clock that advances `factor` times faster than wall time.
pub struct ScaledClock {
    start: std::time::Instant,
    factor: f64,
}

impl ScaledClock {
    pub fn new(factor: f64) -> Self {
        ScaledClock {
            start: std::time::Instant::now(),
            factor: factor.max(1.0),
        }
    }
}

impl Clock for ScaledClock {
    fn now_ms(&self) -> u64 {
        (self.start.elapsed().as_secs_f64() * 1000.0 * self.factor) as u64
    }

    fn sleep_ms(&self, ms: u64) {
        let wall = std::time::Duration::from_secs_f64(ms as f64 / 1000.0 / self.factor);
        std::thread::sleep(wall);
    }
}

const POWER_LOG_HEADER: &str = "timestamp_ms,voltage_v,current_a,power_w";

/// Writes a power log as CSV with six decimal places per reading.
pub fn write_power_log(log: &[PowerSample], path: &Path) -> Result<(), TelemetryError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{POWER_LOG_HEADER}")?;
    for s in log {
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6}",
            s.timestamp_ms, s.voltage_v, s.current_a, s.power_w
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a power log written by [`write_power_log`]. Rejects malformed rows
/// (with their line number) and non-increasing timestamps.
pub fn read_power_log(path: &Path) -> Result<Vec<PowerSample>, TelemetryError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == POWER_LOG_HEADER => {}
        Some((_, header)) => {
            return Err(TelemetryError::Parse {
                line: 1,
                message: format!("expected header '{POWER_LOG_HEADER}', got '{header}'"),
            })
        }
        None => return Ok(Vec::new()),
    }
    let mut log = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(TelemetryError::Parse {
                line: line_no,
                message: format!("expected 4 fields, got {}", parts.len()),
            });
        }
        let parse_f = |s: &str, name: &str| -> Result<f64, TelemetryError> {
            s.trim().parse::<f64>().map_err(|e| TelemetryError::Parse {
                line: line_no,
                message: format!("bad {name}: {e}"),
            })
        };
        let timestamp_ms = parts[0]
            .trim()
            .parse::<u64>()
            .map_err(|e| TelemetryError::Parse {
                line: line_no,
                message: format!("bad timestamp: {e}"),
            })?;
        let sample = PowerSample {
            timestamp_ms,
            voltage_v: parse_f(parts[1], "voltage")?,
            current_a: parse_f(parts[2], "current")?,
            power_w: parse_f(parts[3], "power")?,
        };
        if let Some(last) = log.last() {
            let last: &PowerSample = last;
            if sample.timestamp_ms <= last.timestamp_ms {
                return Err(TelemetryError::NonMonotonic(log.len()));
            }
        }
        log.push(sample);
    }
    Ok(log)
}
