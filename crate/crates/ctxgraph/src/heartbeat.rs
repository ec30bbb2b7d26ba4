//! Per-server resource monitoring and failure classification.
//!
//! Every worker host runs a heartbeat service on its own port, separate
//! from the application service. The pairing is what makes failures
//! diagnosable from the outside: probing both ports and combining the two
//! outcomes distinguishes a dead machine from a dead application without
//! logging into either.
//!
//! | heartbeat | application | status            |
//! |-----------|-------------|-------------------|
//! | ok        | ok          | HEALTHY           |
//! | ok        | failed      | APPLICATION_ERROR |
//! | failed    | failed      | SYSTEM_ERROR      |
//! | failed    | ok          | DEGRADED          |
//!
//! where "failed" covers both error responses and timeouts.

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::get;
use axum::Router;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};
use thiserror::Error;

use crate::service::{spawn_service, ServeError, ServiceHandle};

/// Default probe timeout, overridable via `CTXGRAPH_HB_TIMEOUT_MS`.
pub const DEFAULT_PROBE_TIMEOUT_MS: u64 = 1000;

/// One resource-usage snapshot. Field order is the wire contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeartbeatReport {
    pub server_id: String,
    pub cpu_percent: f64,
    pub memory_percent: f64,
    pub disk_percent: f64,
    /// Present only when a GPU sampler is configured; serialized as null
    /// otherwise so the key set is fixed.
    pub gpu_percent: Option<f64>,
    pub timestamp_ms: i64,
}

/// Raw usage values a sampler produces, all in percent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResourceSample {
    pub cpu: f64,
    pub memory: f64,
    pub disk: f64,
    pub gpu: Option<f64>,
}

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("host counters unreadable: {0}")]
    Unreadable(String),
}

/// Source of resource usage numbers. The production implementation reads
/// host counters; tests inject fixed values.
pub trait ResourceSampler: Send + Sync {
    fn sample(&self) -> Result<ResourceSample, SamplerError>;
}

/// Fixed-value sampler for tests and simulations.
#[derive(Debug, Clone, Copy)]
pub struct FixedSampler(pub ResourceSample);

impl ResourceSampler for FixedSampler {
    fn sample(&self) -> Result<ResourceSample, SamplerError> {
        Ok(self.0)
    }
}

/// Real host sampler backed by instantaneous system counters. GPU usage is
/// never populated here; inject a sampler that knows your hardware instead.
pub struct SystemSampler {
    system: Mutex<sysinfo::System>,
    primed: AtomicI64,
}

impl SystemSampler {
    pub fn new() -> Self {
        Self {
            system: Mutex::new(sysinfo::System::new()),
            primed: AtomicI64::new(0),
        }
    }
}

impl Default for SystemSampler {
    fn default() -> Self {
        Self::new()
    }
}

impl ResourceSampler for SystemSampler {
    fn sample(&self) -> Result<ResourceSample, SamplerError> {
        let mut sys = self
            .system
            .lock()
            .map_err(|_| SamplerError::Unreadable("sampler poisoned".into()))?;
        sys.refresh_cpu_usage();
        if self.primed.swap(1, Ordering::SeqCst) == 0 {
            // cpu usage is a delta between refreshes; prime on first use
            std::thread::sleep(sysinfo::MINIMUM_CPU_UPDATE_INTERVAL);
            sys.refresh_cpu_usage();
        }
        sys.refresh_memory();
        let cpu = f64::from(sys.global_cpu_usage());
        let total = sys.total_memory();
        if total == 0 {
            return Err(SamplerError::Unreadable("total memory reads zero".into()));
        }
        let memory = sys.used_memory() as f64 / total as f64 * 100.0;

        let disks = sysinfo::Disks::new_with_refreshed_list();
        let disk = disks
            .iter()
            .find(|d| d.mount_point() == std::path::Path::new("/"))
            .or_else(|| disks.iter().next())
            .map(|d| {
                let total = d.total_space() as f64;
                if total == 0.0 {
                    0.0
                } else {
                    (total - d.available_space() as f64) / total * 100.0
                }
            })
            .unwrap_or(0.0);

        Ok(ResourceSample {
            cpu: cpu.clamp(0.0, 100.0),
            memory: memory.clamp(0.0, 100.0),
            disk: disk.clamp(0.0, 100.0),
            gpu: None,
        })
    }
}

/// Builds [`HeartbeatReport`]s for one server, keeping timestamps monotone
/// even if the wall clock steps backwards.
pub struct Snapshotter {
    server_id: String,
    sampler: Box<dyn ResourceSampler>,
    last_ts: AtomicI64,
}

impl Snapshotter {
    pub fn new(server_id: impl Into<String>, sampler: Box<dyn ResourceSampler>) -> Self {
        Self {
            server_id: server_id.into(),
            sampler,
            last_ts: AtomicI64::new(i64::MIN),
        }
    }

    /// Take one atomic snapshot. Either every field is populated or the
    /// sampler error propagates; no partial report is emitted.
    pub fn snapshot(&self) -> Result<HeartbeatReport, SamplerError> {
        let s = self.sampler.sample()?;
        let now = epoch_ms();
        let ts = self.last_ts.fetch_max(now, Ordering::SeqCst).max(now);
        Ok(HeartbeatReport {
            server_id: self.server_id.clone(),
            cpu_percent: s.cpu.clamp(0.0, 100.0),
            memory_percent: s.memory.clamp(0.0, 100.0),
            disk_percent: s.disk.clamp(0.0, 100.0),
            gpu_percent: s.gpu.map(|g| g.clamp(0.0, 100.0)),
            timestamp_ms: ts,
        })
    }
}

/// Milliseconds since the Unix epoch.
pub fn epoch_ms() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as i64)
        .unwrap_or(0)
}

/// Start the heartbeat service: `GET /heartbeat` returns one JSON report
/// per request, anything else is 404. Runs independently of the
/// application service so one can fail without the other.
pub fn serve_heartbeat(
    addr: SocketAddr,
    snapshotter: Snapshotter,
) -> Result<ServiceHandle, ServeError> {
    let shared = Arc::new(snapshotter);
    let router = Router::new()
        .route("/heartbeat", get(heartbeat_endpoint))
        .with_state(shared);
    spawn_service(addr, router)
}

async fn heartbeat_endpoint(
    State(snap): State<Arc<Snapshotter>>,
) -> Result<axum::Json<HeartbeatReport>, (StatusCode, String)> {
    match snap.snapshot() {
        Ok(report) => Ok(axum::Json(report)),
        Err(e) => Err((StatusCode::INTERNAL_SERVER_ERROR, e.to_string())),
    }
}

/// Outcome of probing one endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "result", content = "detail", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ProbeOutcome {
    /// 2xx with a parseable JSON body.
    Ok(Value),
    /// Definite failure: non-2xx status, malformed body, or transport error.
    Failed(String),
    /// No response within the configured timeout.
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub outcome: ProbeOutcome,
    pub latency_ms: f64,
}

impl ProbeResult {
    pub fn is_ok(&self) -> bool {
        matches!(self.outcome, ProbeOutcome::Ok(_))
    }

    pub fn ok(outcome: Value) -> Self {
        Self {
            outcome: ProbeOutcome::Ok(outcome),
            latency_ms: 0.0,
        }
    }

    pub fn failed(reason: impl Into<String>) -> Self {
        Self {
            outcome: ProbeOutcome::Failed(reason.into()),
            latency_ms: 0.0,
        }
    }

    pub fn timeout(latency_ms: f64) -> Self {
        Self {
            outcome: ProbeOutcome::Timeout,
            latency_ms,
        }
    }
}

/// Health of one logical server, derived from a (heartbeat, application)
/// probe pair. See the module table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ServerStatus {
    Healthy,
    ApplicationError,
    SystemError,
    /// Heartbeat down while the application answers. Not allocated to, but
    /// not declared dead either — an observable anomaly.
    Degraded,
}

impl std::fmt::Display for ServerStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ServerStatus::Healthy => "HEALTHY",
            ServerStatus::ApplicationError => "APPLICATION_ERROR",
            ServerStatus::SystemError => "SYSTEM_ERROR",
            ServerStatus::Degraded => "DEGRADED",
        };
        f.write_str(s)
    }
}

/// Combine the two probe outcomes into a server status. Total and pure:
/// all nine outcome combinations collapse onto the four statuses.
pub fn classify(hb: &ProbeResult, app: &ProbeResult) -> ServerStatus {
    match (hb.is_ok(), app.is_ok()) {
        (true, true) => ServerStatus::Healthy,
        (true, false) => ServerStatus::ApplicationError,
        (false, false) => ServerStatus::SystemError,
        (false, true) => ServerStatus::Degraded,
    }
}

/// Probe `http://{address}{path}` with a timeout. All failure modes are
/// encoded in the result; this function never errors.
pub fn probe(address: &str, path: &str, timeout_ms: u64) -> ProbeResult {
    let url = format!("http://{address}{path}");
    let started = Instant::now();
    let client = match reqwest::blocking::Client::builder()
        .timeout(Duration::from_millis(timeout_ms))
        .build()
    {
        Ok(c) => c,
        Err(e) => return ProbeResult::failed(format!("client: {e}")),
    };
    let elapsed = |s: Instant| s.elapsed().as_secs_f64() * 1000.0;
    match client.get(&url).send() {
        Ok(resp) => {
            let status = resp.status();
            if !status.is_success() {
                return ProbeResult {
                    outcome: ProbeOutcome::Failed(format!("http {}", status.as_u16())),
                    latency_ms: elapsed(started),
                };
            }
            match resp.json::<Value>() {
                Ok(v) => ProbeResult {
                    outcome: ProbeOutcome::Ok(v),
                    latency_ms: elapsed(started),
                },
                Err(e) => ProbeResult {
                    outcome: ProbeOutcome::Failed(format!("malformed body: {e}")),
                    latency_ms: elapsed(started),
                },
            }
        }
        Err(e) => {
            let latency = elapsed(started).max(if e.is_timeout() {
                timeout_ms as f64
            } else {
                0.0
            });
            if e.is_timeout() {
                ProbeResult::timeout(latency)
            } else {
                ProbeResult {
                    outcome: ProbeOutcome::Failed(format!("transport: {e}")),
                    latency_ms: latency,
                }
            }
        }
    }
}
