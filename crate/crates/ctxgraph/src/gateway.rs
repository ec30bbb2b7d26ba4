//! The central authoritative allocator.
//!
//! The gateway owns the server registry. It refreshes each record by
//! probing the server's heartbeat and application ports — on a regular
//! interval, or when a task arrives and the record has gone stale,
//! whichever comes first — and classifies the pair of outcomes into a
//! status. Tasks wait in a single-level queue or a keyed silo, and an
//! allocation policy chain picks a placement for the best queued task:
//! the first policy that yields a server wins, a policy that errors or
//! abstains falls through to the next, and an exhausted chain leaves the
//! task queued rather than failing it.
//!
//! Placement decisions are a serialized critical section. Concurrency
//! lives in probing and in the workers themselves; two decisions never
//! race for the same eligibility slot.

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::{get, post, put};
use axum::{Json, Router};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;
use thiserror::Error;

use crate::context::Context;
use crate::heartbeat::{classify, epoch_ms, probe, HeartbeatReport, ProbeResult, ServerStatus};
use crate::service::{spawn_service, ServeError, ServiceHandle};
use crate::worker::{TaskOutcome, TaskRequest, TaskResponse};

pub const DEFAULT_REFRESH_INTERVAL_MS: i64 = 2000;
pub const DEFAULT_STALENESS_BOUND_MS: i64 = 5000;
pub const DEFAULT_CPU_CEILING: f64 = 90.0;
pub const DEFAULT_MEM_CEILING: f64 = 90.0;

// ---------------------------------------------------------------------------
// Routing table
// ---------------------------------------------------------------------------

/// One row of the server-list file handed to the gateway at startup.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerEntry {
    pub server_id: String,
    pub app_address: String,
    pub hb_address: String,
}

/// Live bookkeeping for one server: addresses, the latest heartbeat
/// report, and the classification of the most recent probe pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerRecord {
    pub server_id: String,
    pub app_address: String,
    pub hb_address: String,
    pub last_report: Option<HeartbeatReport>,
    pub status: ServerStatus,
    pub last_refresh_ms: i64,
}

impl ServerRecord {
    pub fn new(entry: ServerEntry) -> Self {
        Self {
            server_id: entry.server_id,
            app_address: entry.app_address,
            hb_address: entry.hb_address,
            last_report: None,
            // conservative until the first probe pair lands
            status: ServerStatus::SystemError,
            last_refresh_ms: i64::MIN,
        }
    }

    pub fn age_ms(&self, now_ms: i64) -> i64 {
        now_ms.saturating_sub(self.last_refresh_ms)
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RoutingTable {
    pub records: BTreeMap<String, ServerRecord>,
    pub refresh_interval_ms: i64,
    /// A record older than this is never used for allocation without a
    /// refresh.
    pub staleness_bound_ms: i64,
}

impl RoutingTable {
    pub fn new(entries: Vec<ServerEntry>, refresh_interval_ms: i64, staleness_bound_ms: i64) -> Self {
        Self {
            records: entries
                .into_iter()
                .map(|e| (e.server_id.clone(), ServerRecord::new(e)))
                .collect(),
            refresh_interval_ms,
            staleness_bound_ms,
        }
    }

    /// Force the next refresh pass to re-probe `server_id`.
    pub fn mark_stale(&mut self, server_id: &str) {
        if let Some(r) = self.records.get_mut(server_id) {
            r.last_refresh_ms = i64::MIN;
        }
    }
}

/// Issues one (heartbeat, application) probe pair for a server. The
/// production prober speaks HTTP; simulations script the outcomes.
pub trait Prober: Send + Sync {
    fn probe_server(&self, record: &ServerRecord) -> (ProbeResult, ProbeResult);
}

/// HTTP prober: `GET /heartbeat` on the heartbeat port, `GET /tasks` on the
/// application port.
pub struct HttpProber {
    pub timeout_ms: u64,
}

impl Prober for HttpProber {
    fn probe_server(&self, record: &ServerRecord) -> (ProbeResult, ProbeResult) {
        let hb = probe(&record.hb_address, "/heartbeat", self.timeout_ms);
        let app = probe(&record.app_address, "/tasks", self.timeout_ms);
        (hb, app)
    }
}

/// Re-probe and reclassify every record at least `threshold_ms` old.
/// Probe failures land in the record's status; nothing is thrown.
/// Returns the ids that were refreshed.
pub fn refresh_older_than(
    table: &mut RoutingTable,
    prober: &dyn Prober,
    now_ms: i64,
    threshold_ms: i64,
) -> Vec<String> {
    let due: Vec<String> = table
        .records
        .values()
        .filter(|r| r.age_ms(now_ms) >= threshold_ms)
        .map(|r| r.server_id.clone())
        .collect();
    for id in &due {
        let (hb, app) = {
            let record = &table.records[id];
            prober.probe_server(record)
        };
        let record = table.records.get_mut(id).expect("record exists");
        record.status = classify(&hb, &app);
        if let crate::heartbeat::ProbeOutcome::Ok(payload) = &hb.outcome {
            if let Ok(report) = serde_json::from_value::<HeartbeatReport>(payload.clone()) {
                record.last_report = Some(report);
            }
        }
        record.last_refresh_ms = now_ms;
    }
    due
}

/// The regular-interval refresh: re-probe records older than the table's
/// refresh interval. The task-arrival trigger uses the staleness bound
/// instead — whichever fires first keeps records usable.
pub fn refresh_routing(table: &mut RoutingTable, prober: &dyn Prober, now_ms: i64) -> Vec<String> {
    refresh_older_than(table, prober, now_ms, table.refresh_interval_ms)
}

// ---------------------------------------------------------------------------
// Queue
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueueMode {
    SingleLevel,
    Silo,
}

/// Key under which single-level depths are reported.
pub const SINGLE_LEVEL_KEY: &str = "default";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueuedTask {
    pub task: TaskRequest,
    pub enqueue_time_ms: i64,
    pub silo_key: Option<String>,
    pub priority: i64,
    /// Monotone admission counter; FIFO tiebreaker within a priority.
    pub seq: u64,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum QueueError {
    #[error("queue bound {0} reached")]
    QueueFull(usize),
}

/// Derives a silo key from a task; the default uses the task name.
pub type SiloFn = dyn Fn(&TaskRequest) -> String + Send + Sync;

/// Priority-then-FIFO task queue, optionally partitioned into silos.
pub struct TaskQueue {
    mode: QueueMode,
    bound: Option<usize>,
    silo_fn: Box<SiloFn>,
    items: Vec<QueuedTask>,
    next_seq: u64,
}

impl TaskQueue {
    pub fn new(mode: QueueMode, bound: Option<usize>) -> Self {
        Self::with_silo_fn(mode, bound, Box::new(|t: &TaskRequest| t.task.clone()))
    }

    pub fn with_silo_fn(mode: QueueMode, bound: Option<usize>, silo_fn: Box<SiloFn>) -> Self {
        Self {
            mode,
            bound,
            silo_fn,
            items: Vec::new(),
            next_seq: 0,
        }
    }

    /// Append a task. In silo mode the silo key comes from the silo
    /// function; order within a silo is FIFO per priority.
    pub fn enqueue(
        &mut self,
        task: TaskRequest,
        priority: i64,
        now_ms: i64,
    ) -> Result<QueuedTask, QueueError> {
        if let Some(bound) = self.bound {
            if self.items.len() >= bound {
                return Err(QueueError::QueueFull(bound));
            }
        }
        let silo_key = match self.mode {
            QueueMode::SingleLevel => None,
            QueueMode::Silo => Some((self.silo_fn)(&task)),
        };
        let queued = QueuedTask {
            task,
            enqueue_time_ms: now_ms,
            silo_key,
            priority,
            seq: self.next_seq,
        };
        self.next_seq += 1;
        self.items.push(queued.clone());
        Ok(queued)
    }

    /// Put a dispatched task back (after a refusal or transport failure),
    /// keeping its admission seq so it does not lose its queue position.
    pub fn requeue(&mut self, mut queued: QueuedTask) {
        queued.task.attempt += 1;
        self.items.push(queued);
    }

    /// Highest priority first, then earliest admission.
    pub fn peek_best(&self) -> Option<&QueuedTask> {
        self.items
            .iter()
            .max_by_key(|q| (q.priority, std::cmp::Reverse(q.seq)))
    }

    pub fn remove(&mut self, request_id: &str) -> Option<QueuedTask> {
        let idx = self.items.iter().position(|q| q.task.request_id == request_id)?;
        Some(self.items.remove(idx))
    }

    pub fn contains(&self, request_id: &str) -> bool {
        self.items.iter().any(|q| q.task.request_id == request_id)
    }

    /// Depth per silo; single-level queues report one `default` entry.
    pub fn depths(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for item in &self.items {
            let key = item
                .silo_key
                .clone()
                .unwrap_or_else(|| SINGLE_LEVEL_KEY.to_string());
            *out.entry(key).or_insert(0) += 1;
        }
        out
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Tasks of one silo in dequeue order, for inspection.
    pub fn silo_items(&self, key: &str) -> Vec<&QueuedTask> {
        let mut items: Vec<&QueuedTask> = self
            .items
            .iter()
            .filter(|q| q.silo_key.as_deref() == Some(key))
            .collect();
        items.sort_by_key(|q| (std::cmp::Reverse(q.priority), q.seq));
        items
    }
}

// ---------------------------------------------------------------------------
// Allocation
// ---------------------------------------------------------------------------

/// Usage ceilings a server must stay under to be eligible.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AllocationLimits {
    pub cpu_ceiling: f64,
    pub mem_ceiling: f64,
}

impl Default for AllocationLimits {
    fn default() -> Self {
        Self {
            cpu_ceiling: DEFAULT_CPU_CEILING,
            mem_ceiling: DEFAULT_MEM_CEILING,
        }
    }
}

/// Result of running one task through the policy chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationDecision {
    pub request_id: String,
    /// `None` exactly when no server was eligible after the whole chain.
    pub chosen: Option<String>,
    pub policy_used: String,
    /// How many policies abstained or errored before one chose.
    pub fallback_depth: u32,
    pub eligible_count: usize,
}

/// A placement policy. Abstaining (`Ok(None)`) or erroring hands the
/// decision to the next policy in the chain.
pub trait AllocationPolicy: Send {
    fn name(&self) -> &str;
    fn choose(&mut self, eligible: &[&ServerRecord]) -> Result<Option<String>, String>;
}

/// Least CPU usage; ties break to the lexicographically smallest id.
/// Abstains when no eligible server has a report to compare.
pub struct LeastCpu;

/// Least memory usage; same tie and abstention rules as [`LeastCpu`].
pub struct LeastMemory;

/// Rotates through the eligible set (sorted by id) across decisions.
pub struct RoundRobin {
    cursor: usize,
}

/// Uniform choice from a seeded generator; deterministic per seed.
pub struct Random {
    rng: ChaCha8Rng,
}

impl RoundRobin {
    pub fn new() -> Self {
        Self { cursor: 0 }
    }
}

impl Default for RoundRobin {
    fn default() -> Self {
        Self::new()
    }
}

impl Random {
    pub fn seeded(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

fn least_by(
    eligible: &[&ServerRecord],
    metric: impl Fn(&HeartbeatReport) -> f64,
) -> Option<String> {
    eligible
        .iter()
        .filter_map(|r| r.last_report.as_ref().map(|rep| (metric(rep), r.server_id.as_str())))
        .min_by(|(a, ida), (b, idb)| a.total_cmp(b).then_with(|| ida.cmp(idb)))
        .map(|(_, id)| id.to_string())
}

impl AllocationPolicy for LeastCpu {
    fn name(&self) -> &str {
        "LEAST_CPU"
    }
    fn choose(&mut self, eligible: &[&ServerRecord]) -> Result<Option<String>, String> {
        Ok(least_by(eligible, |r| r.cpu_percent))
    }
}

impl AllocationPolicy for LeastMemory {
    fn name(&self) -> &str {
        "LEAST_MEMORY"
    }
    fn choose(&mut self, eligible: &[&ServerRecord]) -> Result<Option<String>, String> {
        Ok(least_by(eligible, |r| r.memory_percent))
    }
}

impl AllocationPolicy for RoundRobin {
    fn name(&self) -> &str {
        "ROUND_ROBIN"
    }
    fn choose(&mut self, eligible: &[&ServerRecord]) -> Result<Option<String>, String> {
        if eligible.is_empty() {
            return Ok(None);
        }
        let mut ids: Vec<&str> = eligible.iter().map(|r| r.server_id.as_str()).collect();
        ids.sort_unstable();
        let pick = ids[self.cursor % ids.len()].to_string();
        self.cursor = self.cursor.wrapping_add(1);
        Ok(Some(pick))
    }
}

impl AllocationPolicy for Random {
    fn name(&self) -> &str {
        "RANDOM"
    }
    fn choose(&mut self, eligible: &[&ServerRecord]) -> Result<Option<String>, String> {
        if eligible.is_empty() {
            return Ok(None);
        }
        let mut ids: Vec<&str> = eligible.iter().map(|r| r.server_id.as_str()).collect();
        ids.sort_unstable();
        let idx = self.rng.random_range(0..ids.len());
        Ok(Some(ids[idx].to_string()))
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("unknown allocation policy {0}")]
pub struct PolicyParseError(pub String);

/// Build a policy chain from a comma-separated list of names. User-defined
/// policies plug in by constructing the chain directly.
pub fn parse_policy_chain(
    spec: &str,
    seed: u64,
) -> Result<Vec<Box<dyn AllocationPolicy>>, PolicyParseError> {
    let mut chain: Vec<Box<dyn AllocationPolicy>> = Vec::new();
    for name in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match name.to_ascii_uppercase().as_str() {
            "LEAST_CPU" => chain.push(Box::new(LeastCpu)),
            "LEAST_MEMORY" => chain.push(Box::new(LeastMemory)),
            "ROUND_ROBIN" => chain.push(Box::new(RoundRobin::new())),
            "RANDOM" => chain.push(Box::new(Random::seeded(seed))),
            other => return Err(PolicyParseError(other.to_string())),
        }
    }
    Ok(chain)
}

/// Servers a task may be placed on right now: healthy, fresh, and under
/// the usage ceilings. A missing report passes the ceiling checks — the
/// load is unknown, not known-high.
pub fn eligible_servers<'a>(
    table: &'a RoutingTable,
    limits: &AllocationLimits,
    now_ms: i64,
) -> Vec<&'a ServerRecord> {
    table
        .records
        .values()
        .filter(|r| r.status == ServerStatus::Healthy)
        .filter(|r| r.age_ms(now_ms) <= table.staleness_bound_ms)
        .filter(|r| match &r.last_report {
            Some(rep) => {
                rep.cpu_percent < limits.cpu_ceiling && rep.memory_percent < limits.mem_ceiling
            }
            None => true,
        })
        .collect()
}

/// Run the policy chain over the eligible set. Never errors: policy
/// failures are consumed by the fallback chain, and an exhausted chain
/// yields `chosen: None` with the task left queued.
pub fn allocate(
    task: &QueuedTask,
    table: &RoutingTable,
    chain: &mut [Box<dyn AllocationPolicy>],
    limits: &AllocationLimits,
    now_ms: i64,
) -> AllocationDecision {
    let eligible = eligible_servers(table, limits, now_ms);
    let mut fallback_depth = 0u32;
    for policy in chain.iter_mut() {
        match policy.choose(&eligible) {
            Ok(Some(server_id)) => {
                return AllocationDecision {
                    request_id: task.task.request_id.clone(),
                    chosen: Some(server_id),
                    policy_used: policy.name().to_string(),
                    fallback_depth,
                    eligible_count: eligible.len(),
                }
            }
            Ok(None) | Err(_) => fallback_depth += 1,
        }
    }
    AllocationDecision {
        request_id: task.task.request_id.clone(),
        chosen: None,
        policy_used: "none".to_string(),
        fallback_depth,
        eligible_count: eligible.len(),
    }
}

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

/// Sends a task to a worker's application port. Scripted in simulations.
pub trait WorkerClient: Send + Sync {
    fn execute(&self, app_address: &str, req: &TaskRequest) -> Result<TaskResponse, String>;
}

pub struct HttpWorkerClient {
    pub timeout_ms: u64,
}

impl WorkerClient for HttpWorkerClient {
    fn execute(&self, app_address: &str, req: &TaskRequest) -> Result<TaskResponse, String> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(self.timeout_ms))
            .build()
            .map_err(|e| e.to_string())?;
        let url = format!("http://{app_address}/execute");
        let resp = client.post(&url).json(req).send().map_err(|e| e.to_string())?;
        if !resp.status().is_success() {
            return Err(format!("http {}", resp.status().as_u16()));
        }
        resp.json::<TaskResponse>().map_err(|e| e.to_string())
    }
}

/// What became of one dispatch attempt.
#[derive(Debug)]
pub enum DispatchResult {
    /// The worker answered with a terminal outcome; relay it verbatim.
    Answered(TaskResponse),
    /// The task went back into the queue (worker refusal or transport
    /// failure) and the server was marked for immediate re-probe.
    Requeued,
}

// ---------------------------------------------------------------------------
// Gateway core
// ---------------------------------------------------------------------------

/// Task-binding rule: the default gateway locks onto a single task
/// template; multi-task mode relaxes that with weaker durability
/// guarantees.
#[derive(Debug, Clone, Default)]
pub struct TaskBinding {
    pub bound: Option<String>,
    pub multi_task: bool,
}

impl TaskBinding {
    /// Check a submission against the binding, locking onto the first task
    /// name seen when unbound.
    pub fn admit(&mut self, task: &str) -> Result<(), String> {
        if self.multi_task {
            return Ok(());
        }
        match &self.bound {
            None => {
                self.bound = Some(task.to_string());
                Ok(())
            }
            Some(t) if t == task => Ok(()),
            Some(t) => Err(format!("gateway is bound to task {t}, got {task}")),
        }
    }
}

/// The gateway's single-threaded decision state: routing table, queue,
/// policy chain, and the stored origin context. The HTTP service wraps it
/// in a mutex; the simulator drives it directly.
pub struct GatewayCore {
    pub table: RoutingTable,
    pub queue: TaskQueue,
    pub chain: Vec<Box<dyn AllocationPolicy>>,
    pub limits: AllocationLimits,
    pub binding: TaskBinding,
    pub stored_context: Option<Context>,
    decision_count: u64,
}

impl GatewayCore {
    pub fn new(
        table: RoutingTable,
        queue: TaskQueue,
        chain: Vec<Box<dyn AllocationPolicy>>,
        limits: AllocationLimits,
        binding: TaskBinding,
    ) -> Self {
        Self {
            table,
            queue,
            chain,
            limits,
            binding,
            stored_context: None,
            decision_count: 0,
        }
    }

    /// Total decisions taken; the stream is serialized, so this is also
    /// the order of the decision log.
    pub fn decision_count(&self) -> u64 {
        self.decision_count
    }

    pub fn allocate_for(&mut self, queued: &QueuedTask, now_ms: i64) -> AllocationDecision {
        self.decision_count += 1;
        allocate(queued, &self.table, &mut self.chain, &self.limits, now_ms)
    }

    /// Dispatch a decided task. Refusals and transport failures put the
    /// task back in the queue with the attempt bumped and force the target
    /// server to be re-probed before its next use.
    pub fn dispatch(
        &mut self,
        decision: &AllocationDecision,
        queued: QueuedTask,
        client: &dyn WorkerClient,
    ) -> DispatchResult {
        let server_id = decision
            .chosen
            .as_ref()
            .expect("dispatch requires a chosen server");
        let app_address = self.table.records[server_id].app_address.clone();
        match client.execute(&app_address, &queued.task) {
            Ok(resp) => {
                if matches!(resp.outcome, TaskOutcome::Refused(_)) {
                    self.queue.requeue(queued);
                    self.table.mark_stale(server_id);
                    DispatchResult::Requeued
                } else {
                    DispatchResult::Answered(resp)
                }
            }
            Err(_) => {
                self.queue.requeue(queued);
                self.table.mark_stale(server_id);
                DispatchResult::Requeued
            }
        }
    }
}

// ---------------------------------------------------------------------------
// HTTP service
// ---------------------------------------------------------------------------

pub struct GatewayOptions {
    pub refresh_interval_ms: i64,
    pub staleness_bound_ms: i64,
    pub probe_timeout_ms: u64,
    pub policy_chain: String,
    pub seed: u64,
    pub queue_mode: QueueMode,
    pub queue_bound: Option<usize>,
    pub limits: AllocationLimits,
    /// How long POST /submit waits for an eligible server before answering
    /// REFUSED and dropping the task from the queue.
    pub submit_wait_ms: u64,
    pub task: Option<String>,
    pub multi_task: bool,
}

impl Default for GatewayOptions {
    fn default() -> Self {
        Self {
            refresh_interval_ms: DEFAULT_REFRESH_INTERVAL_MS,
            staleness_bound_ms: DEFAULT_STALENESS_BOUND_MS,
            probe_timeout_ms: crate::heartbeat::DEFAULT_PROBE_TIMEOUT_MS,
            policy_chain: "LEAST_CPU,ROUND_ROBIN".to_string(),
            seed: 0,
            queue_mode: QueueMode::SingleLevel,
            queue_bound: None,
            limits: AllocationLimits::default(),
            submit_wait_ms: 30_000,
            task: None,
            multi_task: false,
        }
    }
}

struct GatewayState {
    core: Mutex<GatewayCore>,
    prober: Box<dyn Prober>,
    client: Box<dyn WorkerClient>,
    submit_wait_ms: u64,
}

/// A running gateway: the HTTP service plus the background probe loop.
pub struct GatewayHandle {
    service: ServiceHandle,
    stop: Arc<AtomicBool>,
    refresher: Option<std::thread::JoinHandle<()>>,
}

impl GatewayHandle {
    pub fn addr(&self) -> SocketAddr {
        self.service.addr()
    }

    pub fn stop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.refresher.take() {
            let _ = t.join();
        }
        self.service.stop();
    }
}

impl Drop for GatewayHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Start the gateway service over a server list.
///
/// Endpoints: `POST /submit` (synchronous queue → allocate → dispatch),
/// `GET /servers`, `GET /queue`, and `PUT`/`GET /context` for the run's
/// stored origin context.
pub fn serve_gateway(
    addr: SocketAddr,
    servers: Vec<ServerEntry>,
    options: GatewayOptions,
) -> Result<GatewayHandle, GatewayStartError> {
    let chain = parse_policy_chain(&options.policy_chain, options.seed)?;
    let table = RoutingTable::new(
        servers,
        options.refresh_interval_ms,
        options.staleness_bound_ms,
    );
    let queue = TaskQueue::new(options.queue_mode, options.queue_bound);
    let binding = TaskBinding {
        bound: options.task.clone(),
        multi_task: options.multi_task,
    };
    let core = GatewayCore::new(table, queue, chain, options.limits, binding);
    let state = Arc::new(GatewayState {
        core: Mutex::new(core),
        prober: Box::new(HttpProber {
            timeout_ms: options.probe_timeout_ms,
        }),
        client: Box::new(HttpWorkerClient {
            timeout_ms: options.probe_timeout_ms.max(10_000),
        }),
        submit_wait_ms: options.submit_wait_ms,
    });

    let router = Router::new()
        .route("/submit", post(submit_endpoint))
        .route("/servers", get(servers_endpoint))
        .route("/queue", get(queue_endpoint))
        .route("/context", put(put_context_endpoint).get(get_context_endpoint))
        .with_state(state.clone());
    let service = spawn_service(addr, router)?;

    // background interval refresher
    let stop = Arc::new(AtomicBool::new(false));
    let stop_flag = stop.clone();
    let refresher_state = state;
    let refresher = std::thread::Builder::new()
        .name("gw-refresh".to_string())
        .spawn(move || {
            while !stop_flag.load(Ordering::SeqCst) {
                refresh_pass(&refresher_state, None);
                std::thread::sleep(Duration::from_millis(100));
            }
        })
        .expect("refresher spawns");

    Ok(GatewayHandle {
        service,
        stop,
        refresher: Some(refresher),
    })
}

#[derive(Debug, Error)]
pub enum GatewayStartError {
    #[error(transparent)]
    Serve(#[from] ServeError),
    #[error(transparent)]
    Policy(#[from] PolicyParseError),
}

/// Probe outside the core lock, apply under it. `threshold` defaults to
/// the table's refresh interval.
fn refresh_pass(state: &GatewayState, threshold: Option<i64>) {
    let now = epoch_ms();
    let due: Vec<ServerRecord> = {
        let core = state.core.lock().expect("core lock");
        let t = threshold.unwrap_or(core.table.refresh_interval_ms);
        core.table
            .records
            .values()
            .filter(|r| r.age_ms(now) >= t)
            .cloned()
            .collect()
    };
    if due.is_empty() {
        return;
    }
    let probed: Vec<(String, ProbeResult, ProbeResult)> = due
        .iter()
        .map(|r| {
            let (hb, app) = state.prober.probe_server(r);
            (r.server_id.clone(), hb, app)
        })
        .collect();
    let mut core = state.core.lock().expect("core lock");
    for (id, hb, app) in probed {
        if let Some(record) = core.table.records.get_mut(&id) {
            record.status = classify(&hb, &app);
            if let crate::heartbeat::ProbeOutcome::Ok(payload) = &hb.outcome {
                if let Ok(report) = serde_json::from_value::<HeartbeatReport>(payload.clone()) {
                    record.last_report = Some(report);
                }
            }
            record.last_refresh_ms = now;
        }
    }
}

fn submit_blocking(state: &GatewayState, req: TaskRequest) -> TaskResponse {
    let request_id = req.request_id.clone();
    let refused = |reason: String| TaskResponse {
        request_id: request_id.clone(),
        outcome: TaskOutcome::Refused(reason),
        duration_ms: 0.0,
    };

    {
        let mut core = state.core.lock().expect("core lock");
        if let Err(reason) = core.binding.admit(&req.task) {
            return refused(reason);
        }
        if let Err(e) = core.queue.enqueue(req, 0, epoch_ms()) {
            return refused(e.to_string());
        }
    }

    let deadline = epoch_ms() + state.submit_wait_ms as i64;
    loop {
        // task-arrival refresh: any record past the staleness bound gets
        // probed before the next allocation
        let staleness = {
            let core = state.core.lock().expect("core lock");
            core.table.staleness_bound_ms
        };
        refresh_pass(state, Some(staleness));

        {
            let mut core = state.core.lock().expect("core lock");
            let my_turn = core
                .queue
                .peek_best()
                .map(|q| q.task.request_id == request_id)
                .unwrap_or(false);
            if my_turn {
                let queued = core
                    .queue
                    .peek_best()
                    .cloned()
                    .expect("peeked task exists");
                let decision = core.allocate_for(&queued, epoch_ms());
                if decision.chosen.is_some() {
                    let queued = core
                        .queue
                        .remove(&request_id)
                        .expect("queued task exists");
                    // decision + dispatch stay inside the critical section:
                    // one placement at a time
                    match core.dispatch(&decision, queued, state.client.as_ref()) {
                        DispatchResult::Answered(resp) => return resp,
                        DispatchResult::Requeued => {}
                    }
                }
            }
        }

        if epoch_ms() > deadline {
            let mut core = state.core.lock().expect("core lock");
            core.queue.remove(&request_id);
            return refused("no eligible server".to_string());
        }
        std::thread::sleep(Duration::from_millis(25));
    }
}

async fn submit_endpoint(
    State(state): State<Arc<GatewayState>>,
    body: Result<Json<TaskRequest>, JsonRejection>,
) -> Result<Json<TaskResponse>, (StatusCode, String)> {
    let Json(req) = body.map_err(|e| (StatusCode::BAD_REQUEST, e.to_string()))?;
    let resp = tokio::task::spawn_blocking(move || submit_blocking(&state, req))
        .await
        .map_err(|e| (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(Json(resp))
}

async fn servers_endpoint(State(state): State<Arc<GatewayState>>) -> Json<Vec<ServerRecord>> {
    let core = state.core.lock().expect("core lock");
    Json(core.table.records.values().cloned().collect())
}

async fn queue_endpoint(State(state): State<Arc<GatewayState>>) -> Json<BTreeMap<String, usize>> {
    let core = state.core.lock().expect("core lock");
    Json(core.queue.depths())
}

async fn put_context_endpoint(
    State(state): State<Arc<GatewayState>>,
    body: Result<Json<Context>, JsonRejection>,
) -> Result<StatusCode, (StatusCode, String)> {
    let Json(ctx) = body.map_err(|e| (StatusCode::BAD_REQUEST, e.to_string()))?;
    state.core.lock().expect("core lock").stored_context = Some(ctx);
    Ok(StatusCode::NO_CONTENT)
}

async fn get_context_endpoint(
    State(state): State<Arc<GatewayState>>,
) -> Result<Json<Context>, StatusCode> {
    let core = state.core.lock().expect("core lock");
    core.stored_context
        .clone()
        .map(Json)
        .ok_or(StatusCode::NOT_FOUND)
}
