//! Deterministic in-process simulation of a full deployment.
//!
//! A [`Scenario`] describes a graph, a set of virtual servers with
//! synthetic load curves, and a scripted fault timeline. [`simulate`] runs
//! the real orchestrator against a simulated gateway on a virtual clock:
//! no sockets, no threads, no wall time. Every probe, classification,
//! queue operation, placement decision, dispatch, and journal entry lands
//! in a [`Trace`] stamped with virtual milliseconds, and identical
//! scenarios produce byte-identical traces.
//!
//! The wire codecs stay honest: every request and response crossing the
//! virtual boundary is serialized through the real protocol encoders and
//! parsed back.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::cell::RefCell;
use std::collections::BTreeSet;
use std::rc::Rc;
use std::sync::Arc;
use thiserror::Error;

use crate::canon::canonical_json;
use crate::gateway::{
    AllocationDecision, AllocationLimits, GatewayCore, QueueMode, RoutingTable, ServerEntry,
    TaskBinding, TaskQueue,
};
use crate::graph::{validate_graph, GraphError, GraphSpec};
use crate::heartbeat::{classify, HeartbeatReport, ProbeOutcome, ProbeResult, ServerStatus};
use crate::orchestrator::{
    run_graph, Executor, JournalEntry, JournalSink, OrchestratorError, RetryPolicy, RunResult,
};
use crate::tasks::{builtin_names, full_builtin_registry};
use crate::worker::{handle_execute, TaskOutcome, TaskRegistry, TaskRequest, TaskResponse};

pub const DEFAULT_SIM_TASK_DURATION_MS: u64 = 10;
pub const DEFAULT_SIM_PROBE_DELAY_MS: u64 = 1;

/// One point of a synthetic load curve; the latest point at or before the
/// current virtual time is in effect.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoadPoint {
    pub at_ms: u64,
    pub cpu_percent: f64,
    pub memory_percent: f64,
}

/// A simulated worker server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VirtualServer {
    pub server_id: String,
    #[serde(default = "default_capacity")]
    pub capacity: usize,
    #[serde(default)]
    pub load: Vec<LoadPoint>,
    /// Virtual execution time per task on this server; the scenario-wide
    /// default applies when absent.
    #[serde(default)]
    pub task_duration_ms: Option<u64>,
}

fn default_capacity() -> usize {
    1
}

/// Fault script entries flip probe behavior at their virtual timestamps.
/// SYSTEM_DOWN fails both probes until SYSTEM_UP; APP_DOWN fails only the
/// application probe while the heartbeat keeps answering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FaultKind {
    AppDown,
    AppUp,
    SystemDown,
    SystemUp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultEvent {
    pub at_ms: u64,
    pub target: String,
    pub kind: FaultKind,
}

fn default_policy_chain() -> Vec<String> {
    vec!["LEAST_CPU".to_string(), "ROUND_ROBIN".to_string()]
}

/// A complete simulation script. The seed fully determines all randomness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub graph: GraphSpec,
    pub servers: Vec<VirtualServer>,
    #[serde(default)]
    pub faults: Vec<FaultEvent>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_policy_chain")]
    pub policy_chain: Vec<String>,
    #[serde(default)]
    pub retry: Option<RetryPolicy>,
    #[serde(default = "default_task_duration")]
    pub task_duration_ms: u64,
    #[serde(default = "default_probe_delay")]
    pub probe_delay_ms: u64,
    #[serde(default = "default_refresh_interval")]
    pub refresh_interval_ms: i64,
    #[serde(default = "default_staleness_bound")]
    pub staleness_bound_ms: i64,
}

fn default_task_duration() -> u64 {
    DEFAULT_SIM_TASK_DURATION_MS
}
fn default_probe_delay() -> u64 {
    DEFAULT_SIM_PROBE_DELAY_MS
}
fn default_refresh_interval() -> i64 {
    crate::gateway::DEFAULT_REFRESH_INTERVAL_MS
}
fn default_staleness_bound() -> i64 {
    crate::gateway::DEFAULT_STALENESS_BOUND_MS
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Which port a simulated probe hit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTarget {
    Heartbeat,
    Application,
}

/// One trace record, stamped with virtual time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    Fault {
        at_ms: i64,
        target: String,
        kind: FaultKind,
    },
    Probe {
        at_ms: i64,
        server_id: String,
        target: ProbeTarget,
        ok: bool,
    },
    Classified {
        at_ms: i64,
        server_id: String,
        status: ServerStatus,
    },
    Enqueued {
        at_ms: i64,
        request_id: String,
        silo: String,
        priority: i64,
    },
    Decision {
        at_ms: i64,
        decision: AllocationDecision,
    },
    Dispatched {
        at_ms: i64,
        request_id: String,
        server_id: String,
    },
    Response {
        at_ms: i64,
        request_id: String,
        status: String,
    },
    Journal {
        at_ms: i64,
        entry: JournalEntry,
    },
}

impl TraceEvent {
    pub fn at_ms(&self) -> i64 {
        match self {
            TraceEvent::Fault { at_ms, .. }
            | TraceEvent::Probe { at_ms, .. }
            | TraceEvent::Classified { at_ms, .. }
            | TraceEvent::Enqueued { at_ms, .. }
            | TraceEvent::Decision { at_ms, .. }
            | TraceEvent::Dispatched { at_ms, .. }
            | TraceEvent::Response { at_ms, .. }
            | TraceEvent::Journal { at_ms, .. } => *at_ms,
        }
    }
}

/// The ordered event log of one simulation.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
}

impl Trace {
    /// Canonical NDJSON, one event per line. Byte-identical for identical
    /// scenarios.
    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&canonical_json(e));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("graph invalid: {0}")]
    Graph(#[from] GraphError),
    #[error("fault targets unknown server {0}")]
    UnknownServer(String),
    #[error("duplicate server id {0}")]
    DuplicateServer(String),
    #[error("scenario declares no servers")]
    NoServers,
    #[error("graph uses task {0}, which is not a built-in")]
    UnknownTask(String),
    #[error(transparent)]
    Policy(#[from] crate::gateway::PolicyParseError),
    #[error("invariant violated: {0}")]
    InvariantViolation(String),
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
}

// ---------------------------------------------------------------------------
// Simulator internals
// ---------------------------------------------------------------------------

struct SimInner {
    clock: i64,
    core: GatewayCore,
    servers: Vec<VirtualServer>,
    registry: Arc<TaskRegistry>,
    faults: Vec<FaultEvent>,
    next_fault: usize,
    app_down: BTreeSet<String>,
    system_down: BTreeSet<String>,
    trace: Vec<TraceEvent>,
    task_duration_ms: u64,
    probe_delay_ms: u64,
    violation: Option<String>,
}

impl SimInner {
    fn server(&self, id: &str) -> &VirtualServer {
        self.servers
            .iter()
            .find(|s| s.server_id == id)
            .expect("probed servers exist")
    }

    fn violated(&mut self, msg: String) {
        if self.violation.is_none() {
            self.violation = Some(msg);
        }
    }

    fn apply_due_faults(&mut self) {
        while self.next_fault < self.faults.len()
            && (self.faults[self.next_fault].at_ms as i64) <= self.clock
        {
            let f = self.faults[self.next_fault].clone();
            self.next_fault += 1;
            match f.kind {
                FaultKind::AppDown => {
                    self.app_down.insert(f.target.clone());
                }
                FaultKind::AppUp => {
                    self.app_down.remove(&f.target);
                }
                FaultKind::SystemDown => {
                    self.system_down.insert(f.target.clone());
                }
                FaultKind::SystemUp => {
                    self.system_down.remove(&f.target);
                }
            }
            self.trace.push(TraceEvent::Fault {
                at_ms: self.clock,
                target: f.target,
                kind: f.kind,
            });
        }
    }

    fn load_at(&self, id: &str) -> (f64, f64) {
        let server = self.server(id);
        server
            .load
            .iter()
            .filter(|p| (p.at_ms as i64) <= self.clock)
            .last()
            .map(|p| (p.cpu_percent, p.memory_percent))
            .unwrap_or((0.0, 0.0))
    }

    fn probe_of(&mut self, id: &str, target: ProbeTarget) -> ProbeResult {
        self.clock += self.probe_delay_ms as i64;
        let system_down = self.system_down.contains(id);
        let app_down = self.app_down.contains(id);
        let outcome = match target {
            ProbeTarget::Heartbeat => {
                if system_down {
                    ProbeOutcome::Timeout
                } else {
                    let (cpu, mem) = self.load_at(id);
                    let report = HeartbeatReport {
                        server_id: id.to_string(),
                        cpu_percent: cpu,
                        memory_percent: mem,
                        disk_percent: 0.0,
                        gpu_percent: None,
                        timestamp_ms: self.clock,
                    };
                    ProbeOutcome::Ok(serde_json::to_value(&report).expect("report encodes"))
                }
            }
            ProbeTarget::Application => {
                if system_down {
                    ProbeOutcome::Timeout
                } else if app_down {
                    ProbeOutcome::Failed("http 503".to_string())
                } else {
                    ProbeOutcome::Ok(Value::Array(vec![]))
                }
            }
        };
        let ok = matches!(outcome, ProbeOutcome::Ok(_));
        self.trace.push(TraceEvent::Probe {
            at_ms: self.clock,
            server_id: id.to_string(),
            target,
            ok,
        });
        ProbeResult {
            outcome,
            latency_ms: self.probe_delay_ms as f64,
        }
    }

    /// Re-probe every record at least `threshold` old, classify, and check
    /// the classification against the scripted fault state.
    fn refresh(&mut self, threshold: i64) {
        let due: Vec<String> = self
            .core
            .table
            .records
            .values()
            .filter(|r| r.age_ms(self.clock) >= threshold)
            .map(|r| r.server_id.clone())
            .collect();
        for id in due {
            let hb = self.probe_of(&id, ProbeTarget::Heartbeat);
            let app = self.probe_of(&id, ProbeTarget::Application);
            let status = classify(&hb, &app);

            // classification fidelity against the fault state right now
            let expected = if self.system_down.contains(&id) {
                ServerStatus::SystemError
            } else if self.app_down.contains(&id) {
                ServerStatus::ApplicationError
            } else {
                ServerStatus::Healthy
            };
            if status != expected {
                self.violated(format!(
                    "classification of {id} at {} is {status}, fault state implies {expected}",
                    self.clock
                ));
            }

            let now = self.clock;
            let record = self
                .core
                .table
                .records
                .get_mut(&id)
                .expect("due records exist");
            record.status = status;
            if let ProbeOutcome::Ok(payload) = &hb.outcome {
                if let Ok(report) = serde_json::from_value::<HeartbeatReport>(payload.clone()) {
                    record.last_report = Some(report);
                }
            }
            record.last_refresh_ms = now;
            self.trace.push(TraceEvent::Classified {
                at_ms: now,
                server_id: id,
                status,
            });
        }
    }

    /// Latest virtual instant the world changed: an applied fault or a
    /// load-curve step the clock has passed.
    fn last_change_ms(&self) -> i64 {
        let mut last = 0i64;
        for f in &self.faults[..self.next_fault] {
            last = last.max(f.at_ms as i64);
        }
        for s in &self.servers {
            for p in &s.load {
                if (p.at_ms as i64) <= self.clock {
                    last = last.max(p.at_ms as i64);
                }
            }
        }
        last
    }

    /// The next virtual instant at which anything can change: a scripted
    /// fault, a load-curve step, or — only while some record has not yet
    /// observed the latest world change — its next interval refresh.
    /// `None` means the simulation state is final.
    fn next_event_after(&self) -> Option<i64> {
        let mut next: Option<i64> = None;
        let mut consider = |t: i64| {
            if t > self.clock {
                next = Some(next.map_or(t, |n| n.min(t)));
            }
        };
        if self.next_fault < self.faults.len() {
            consider(self.faults[self.next_fault].at_ms as i64);
        }
        for s in &self.servers {
            for p in &s.load {
                consider(p.at_ms as i64);
            }
        }
        let last_change = self.last_change_ms();
        let threshold = self
            .core
            .table
            .refresh_interval_ms
            .min(self.core.table.staleness_bound_ms);
        for r in self.core.table.records.values() {
            if r.last_refresh_ms < last_change {
                consider(r.last_refresh_ms.saturating_add(threshold));
            }
        }
        next
    }

    /// Run one task on a virtual worker, advancing the clock by its
    /// duration. Requests and responses round-trip through the real wire
    /// encoders.
    fn worker_execute(&mut self, server_id: &str, req: &TaskRequest) -> Result<TaskResponse, String> {
        if self.system_down.contains(server_id) {
            return Err("connect timeout".to_string());
        }
        if self.app_down.contains(server_id) {
            return Err("connection refused".to_string());
        }
        let duration = self
            .server(server_id)
            .task_duration_ms
            .unwrap_or(self.task_duration_ms);
        self.clock += duration as i64;

        let encoded = serde_json::to_string(req).map_err(|e| e.to_string())?;
        let decoded: TaskRequest = serde_json::from_str(&encoded).map_err(|e| e.to_string())?;
        let capacity = self.server(server_id).capacity;
        let resp = handle_execute(&decoded, &self.registry, capacity);
        let encoded = serde_json::to_string(&resp).map_err(|e| e.to_string())?;
        serde_json::from_str(&encoded).map_err(|e| e.to_string())
    }
}

/// Executor over the simulated gateway. Single-threaded by construction:
/// concurrency is modeled by event interleaving on the virtual clock.
pub struct SimExecutor {
    inner: Rc<RefCell<SimInner>>,
}

const MAX_DISPATCH_ATTEMPTS_PER_SUBMIT: usize = 16;

impl Executor for SimExecutor {
    fn execute(&self, req: &TaskRequest) -> Result<TaskResponse, String> {
        let mut inner = self.inner.borrow_mut();
        let request_id = req.request_id.clone();
        inner.apply_due_faults();
        {
            let now = inner.clock;
            let queued = inner
                .core
                .queue
                .enqueue(req.clone(), 0, now)
                .map_err(|e| e.to_string())?;
            let silo = queued
                .silo_key
                .clone()
                .unwrap_or_else(|| crate::gateway::SINGLE_LEVEL_KEY.to_string());
            inner.trace.push(TraceEvent::Enqueued {
                at_ms: now,
                request_id: request_id.clone(),
                silo,
                priority: queued.priority,
            });
        }

        let mut dispatch_attempts = 0;
        loop {
            inner.apply_due_faults();
            let threshold = inner
                .core
                .table
                .staleness_bound_ms
                .min(inner.core.table.refresh_interval_ms);
            inner.refresh(threshold);

            let my_turn = inner
                .core
                .queue
                .peek_best()
                .map(|q| q.task.request_id == request_id)
                .unwrap_or(false);
            if my_turn && dispatch_attempts < MAX_DISPATCH_ATTEMPTS_PER_SUBMIT {
                let queued = inner.core.queue.peek_best().cloned().expect("peeked");
                let now = inner.clock;
                let decision = inner.core.allocate_for(&queued, now);
                inner.trace.push(TraceEvent::Decision {
                    at_ms: now,
                    decision: decision.clone(),
                });
                if let Some(server_id) = decision.chosen.clone() {
                    // allocation safety, asserted inline
                    let record = &inner.core.table.records[&server_id];
                    let unhealthy = record.status != ServerStatus::Healthy;
                    let stale = record.age_ms(now) > inner.core.table.staleness_bound_ms;
                    if unhealthy {
                        inner.violated(format!("allocated non-healthy server {server_id}"));
                    }
                    if stale {
                        inner.violated(format!("allocated stale server {server_id}"));
                    }

                    dispatch_attempts += 1;
                    let queued = inner
                        .core
                        .queue
                        .remove(&request_id)
                        .expect("queued task present");
                    let at = inner.clock;
                    inner.trace.push(TraceEvent::Dispatched {
                        at_ms: at,
                        request_id: request_id.clone(),
                        server_id: server_id.clone(),
                    });
                    match inner.worker_execute(&server_id, &queued.task) {
                        Ok(resp) => {
                            if matches!(resp.outcome, TaskOutcome::Refused(_)) {
                                inner.core.queue.requeue(queued);
                                inner.core.table.mark_stale(&server_id);
                                continue;
                            }
                            let status = match &resp.outcome {
                                TaskOutcome::Completed(_) => "COMPLETED",
                                TaskOutcome::Failed(_) => "FAILED",
                                TaskOutcome::Refused(_) => unreachable!(),
                            };
                            let at = inner.clock;
                            inner.trace.push(TraceEvent::Response {
                                at_ms: at,
                                request_id: request_id.clone(),
                                status: status.to_string(),
                            });
                            return Ok(resp);
                        }
                        Err(_) => {
                            inner.core.queue.requeue(queued);
                            inner.core.table.mark_stale(&server_id);
                            continue;
                        }
                    }
                }
            }

            // nothing dispatchable right now: advance to the next instant
            // where the world can change, or give up for this submission
            match inner.next_event_after() {
                Some(t) if dispatch_attempts < MAX_DISPATCH_ATTEMPTS_PER_SUBMIT => {
                    inner.clock = t;
                }
                _ => {
                    inner.core.queue.remove(&request_id);
                    let at = inner.clock;
                    inner.trace.push(TraceEvent::Response {
                        at_ms: at,
                        request_id: request_id.clone(),
                        status: "REFUSED".to_string(),
                    });
                    return Ok(TaskResponse {
                        request_id,
                        outcome: TaskOutcome::Refused("no eligible server".to_string()),
                        duration_ms: 0.0,
                    });
                }
            }
        }
    }

    fn now_ms(&self) -> i64 {
        self.inner.borrow().clock
    }

    fn sleep_ms(&self, ms: u64) {
        self.inner.borrow_mut().clock += ms as i64;
    }
}

struct SimSink {
    inner: Rc<RefCell<SimInner>>,
}

impl JournalSink for SimSink {
    fn append(&mut self, entry: &JournalEntry) -> Result<(), OrchestratorError> {
        let mut inner = self.inner.borrow_mut();
        let at = inner.clock;
        inner.trace.push(TraceEvent::Journal {
            at_ms: at,
            entry: entry.clone(),
        });
        Ok(())
    }
}

fn check_scenario(s: &Scenario) -> Result<(), ScenarioError> {
    if s.servers.is_empty() {
        return Err(ScenarioError::NoServers);
    }
    let mut ids = BTreeSet::new();
    for server in &s.servers {
        if !ids.insert(server.server_id.as_str()) {
            return Err(ScenarioError::DuplicateServer(server.server_id.clone()));
        }
    }
    for fault in &s.faults {
        if !ids.contains(fault.target.as_str()) {
            return Err(ScenarioError::UnknownServer(fault.target.clone()));
        }
    }
    let builtins = builtin_names();
    for node in &s.graph.nodes {
        if !builtins.contains(&node.task.as_str()) {
            return Err(ScenarioError::UnknownTask(node.task.clone()));
        }
    }
    Ok(())
}

/// Run one scenario to completion. Fully deterministic: the returned trace
/// is a pure function of the scenario.
pub fn simulate(s: &Scenario) -> Result<(RunResult, Trace), ScenarioError> {
    check_scenario(s)?;
    let graph = validate_graph(&s.graph)?;
    let chain = crate::gateway::parse_policy_chain(&s.policy_chain.join(","), s.seed)?;

    let entries: Vec<ServerEntry> = s
        .servers
        .iter()
        .map(|v| ServerEntry {
            server_id: v.server_id.clone(),
            app_address: format!("sim://{}/app", v.server_id),
            hb_address: format!("sim://{}/hb", v.server_id),
        })
        .collect();
    let table = RoutingTable::new(entries, s.refresh_interval_ms, s.staleness_bound_ms);
    let queue = TaskQueue::new(QueueMode::SingleLevel, None);
    let core = GatewayCore::new(
        table,
        queue,
        chain,
        AllocationLimits::default(),
        TaskBinding {
            multi_task: true,
            ..Default::default()
        },
    );

    let mut faults = s.faults.clone();
    faults.sort_by_key(|f| f.at_ms);

    let inner = Rc::new(RefCell::new(SimInner {
        clock: 0,
        core,
        servers: s.servers.clone(),
        registry: full_builtin_registry(),
        faults,
        next_fault: 0,
        app_down: BTreeSet::new(),
        system_down: BTreeSet::new(),
        trace: Vec::new(),
        task_duration_ms: s.task_duration_ms,
        probe_delay_ms: s.probe_delay_ms.max(1),
        violation: None,
    }));

    let executor = SimExecutor {
        inner: inner.clone(),
    };
    let mut sink = SimSink {
        inner: inner.clone(),
    };
    let retry = s.retry.clone().unwrap_or_default();
    let result = run_graph(&graph, &executor, &retry, &mut sink)?;
    drop(executor);
    drop(sink);

    let inner = Rc::try_unwrap(inner)
        .map_err(|_| ())
        .expect("executor and sink dropped")
        .into_inner();
    if let Some(v) = inner.violation {
        return Err(ScenarioError::InvariantViolation(v));
    }

    // trace accounting identity: every enqueued request terminates in a
    // response or is still queued at scenario end — none vanish
    let enqueued: BTreeSet<&str> = inner
        .trace
        .iter()
        .filter_map(|e| match e {
            TraceEvent::Enqueued { request_id, .. } => Some(request_id.as_str()),
            _ => None,
        })
        .collect();
    let responded: BTreeSet<&str> = inner
        .trace
        .iter()
        .filter_map(|e| match e {
            TraceEvent::Response { request_id, .. } => Some(request_id.as_str()),
            _ => None,
        })
        .collect();
    for id in &enqueued {
        if !responded.contains(id) && !inner.core.queue.contains(id) {
            return Err(ScenarioError::InvariantViolation(format!(
                "task {id} vanished: no response and not queued"
            )));
        }
    }

    Ok((
        result,
        Trace {
            events: inner.trace,
        },
    ))
}

/// Load a scenario file, run it, and export the trace as NDJSON.
pub fn simulate_to_ndjson(s: &Scenario) -> Result<(RunResult, String), ScenarioError> {
    let (result, trace) = simulate(s)?;
    Ok((result, trace.to_ndjson()))
}
