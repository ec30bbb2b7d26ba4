//! The generic application server: a registry of task functions behind a
//! capacity-gated `/execute` endpoint.
//!
//! Workers never self-select work — placement belongs to the gateway. The
//! worker-side capacity gate is a safety backstop only: a request above the
//! concurrent-execution limit is refused, not queued. Task functions get
//! all their dependencies as arguments (materialized inputs plus a
//! flattened context view), so each invocation is an atomic unit with
//! deterministic inputs.

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Instant;
use thiserror::Error;

use crate::context::Context;
use crate::service::{spawn_service, ServeError, ServiceHandle};

/// Default concurrent-execution limit, overridable via
/// `CTXGRAPH_WORKER_CAPACITY`.
pub const DEFAULT_WORKER_CAPACITY: usize = 4;

/// One task execution request. `inputs` arrive fully materialized — any
/// `output_of` references were resolved by the orchestrator — and `context`
/// carries the node's full context including all origin entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRequest {
    pub request_id: String,
    pub node_id: String,
    pub task: String,
    pub inputs: BTreeMap<String, Value>,
    pub context: Context,
    pub attempt: u32,
}

/// Terminal outcome of one execution attempt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", content = "value", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskOutcome {
    Completed(Value),
    /// Issued before any task side effects: unknown task, capacity, or an
    /// interceptor veto.
    Refused(String),
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResponse {
    pub request_id: String,
    pub outcome: TaskOutcome,
    pub duration_ms: f64,
}

/// What a task function sees: the flattened context view and its inputs.
/// Raw provenance entries are exposed only when the worker opts in.
pub struct TaskInvocation<'a> {
    pub context_view: &'a BTreeMap<String, Value>,
    pub raw_context: Option<&'a Context>,
    pub inputs: &'a BTreeMap<String, Value>,
}

/// The task callable: a pure function of its invocation.
pub type TaskFn = Arc<dyn Fn(&TaskInvocation<'_>) -> Result<Value, String> + Send + Sync>;

/// Registry entry: parameter names, purity contract, and the callable.
#[derive(Clone)]
pub struct TaskDescriptor {
    pub params: Vec<String>,
    /// Declared pure: same (inputs, context) must yield the same output.
    pub pure: bool,
    pub func: TaskFn,
}

impl TaskDescriptor {
    pub fn new<F>(params: &[&str], pure: bool, f: F) -> Self
    where
        F: Fn(&TaskInvocation<'_>) -> Result<Value, String> + Send + Sync + 'static,
    {
        Self {
            params: params.iter().map(|s| s.to_string()).collect(),
            pure,
            func: Arc::new(f),
        }
    }
}

impl std::fmt::Debug for TaskDescriptor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TaskDescriptor")
            .field("params", &self.params)
            .field("pure", &self.pure)
            .finish()
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum RegistryError {
    #[error("task {0} is already registered")]
    DuplicateTask(String),
    #[error("registration is closed: the worker is serving")]
    RegistrationClosed,
    #[error("unknown built-in task {0}")]
    UnknownBuiltin(String),
}

/// Task name → callable mapping. Mutable until serving starts, then closed:
/// further registrations fail rather than racing live traffic.
#[derive(Default)]
pub struct TaskRegistry {
    entries: RwLock<BTreeMap<String, TaskDescriptor>>,
    closed: AtomicBool,
}

impl TaskRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &self,
        name: impl Into<String>,
        descriptor: TaskDescriptor,
    ) -> Result<(), RegistryError> {
        if self.closed.load(Ordering::SeqCst) {
            return Err(RegistryError::RegistrationClosed);
        }
        let name = name.into();
        let mut entries = self.entries.write().expect("registry lock");
        if entries.contains_key(&name) {
            return Err(RegistryError::DuplicateTask(name));
        }
        entries.insert(name, descriptor);
        Ok(())
    }

    /// Freeze the registry. Called by `serve_worker`; idempotent.
    pub fn close(&self) {
        self.closed.store(true, Ordering::SeqCst);
    }

    pub fn is_closed(&self) -> bool {
        self.closed.load(Ordering::SeqCst)
    }

    pub fn get(&self, name: &str) -> Option<TaskDescriptor> {
        self.entries.read().expect("registry lock").get(name).cloned()
    }

    /// Registered names, sorted.
    pub fn names(&self) -> Vec<String> {
        self.entries.read().expect("registry lock").keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("registry lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Counting gate for concurrent executions. Acquisition never blocks: over
/// capacity means refusal, and the permit releases on drop so a failed task
/// cannot leak a slot.
#[derive(Debug)]
pub struct CapacityGate {
    in_flight: Mutex<usize>,
    capacity: usize,
}

pub struct CapacityPermit<'a>(&'a CapacityGate);

impl CapacityGate {
    pub fn new(capacity: usize) -> Self {
        Self {
            in_flight: Mutex::new(0),
            capacity,
        }
    }

    pub fn try_acquire(&self) -> Option<CapacityPermit<'_>> {
        let mut n = self.in_flight.lock().expect("gate lock");
        if *n >= self.capacity {
            return None;
        }
        *n += 1;
        Some(CapacityPermit(self))
    }

    pub fn in_flight(&self) -> usize {
        *self.in_flight.lock().expect("gate lock")
    }
}

impl Drop for CapacityPermit<'_> {
    fn drop(&mut self) {
        *self.0.in_flight.lock().expect("gate lock") -= 1;
    }
}

/// Pre-execution check. An `Err` refuses the request before any task side
/// effects. The default pipeline is empty; security or auth checks hook in
/// here.
pub trait Interceptor: Send + Sync {
    fn name(&self) -> &str;
    fn check(&self, req: &TaskRequest) -> Result<(), String>;
}

/// Worker behavior knobs beyond the registry itself.
pub struct WorkerOptions {
    pub capacity: usize,
    /// When set, task functions also see the raw provenance entries.
    pub expose_provenance: bool,
    pub interceptors: Vec<Box<dyn Interceptor>>,
}

impl Default for WorkerOptions {
    fn default() -> Self {
        Self {
            capacity: DEFAULT_WORKER_CAPACITY,
            expose_provenance: false,
            interceptors: Vec::new(),
        }
    }
}

/// The registry, gate, and options bundled for serving or for in-process
/// execution (the local executor runs on exactly this path).
pub struct WorkerCore {
    pub registry: Arc<TaskRegistry>,
    pub gate: CapacityGate,
    options: WorkerOptions,
}

impl WorkerCore {
    pub fn new(registry: Arc<TaskRegistry>, options: WorkerOptions) -> Self {
        Self {
            gate: CapacityGate::new(options.capacity),
            registry,
            options,
        }
    }

    pub fn execute(&self, req: &TaskRequest) -> TaskResponse {
        let started = Instant::now();
        let refuse = |reason: String| TaskResponse {
            request_id: req.request_id.clone(),
            outcome: TaskOutcome::Refused(reason),
            duration_ms: started.elapsed().as_secs_f64() * 1000.0,
        };

        for interceptor in &self.options.interceptors {
            if let Err(reason) = interceptor.check(req) {
                return refuse(format!("{}: {}", interceptor.name(), reason));
            }
        }
        let Some(descriptor) = self.registry.get(&req.task) else {
            return refuse("unknown task".to_string());
        };
        let Some(_permit) = self.gate.try_acquire() else {
            return refuse("at capacity".to_string());
        };

        // uniform flatten view: origin entries at depth -1, node entries at 0
        let depths: BTreeMap<String, i64> = req
            .context
            .iter()
            .map(|e| (e.origin.clone(), 0))
            .collect();
        let view = match req.context.flatten(&depths) {
            Ok(v) => v,
            Err(e) => return refuse(format!("context: {e}")),
        };
        let invocation = TaskInvocation {
            context_view: &view,
            raw_context: self.options.expose_provenance.then_some(&req.context),
            inputs: &req.inputs,
        };

        let outcome = match catch_unwind(AssertUnwindSafe(|| (descriptor.func)(&invocation))) {
            Ok(Ok(value)) => TaskOutcome::Completed(value),
            Ok(Err(msg)) => TaskOutcome::Failed(msg),
            Err(panic) => {
                let msg = panic
                    .downcast_ref::<&str>()
                    .map(|s| s.to_string())
                    .or_else(|| panic.downcast_ref::<String>().cloned())
                    .unwrap_or_else(|| "task panicked".to_string());
                TaskOutcome::Failed(format!("panic: {msg}"))
            }
        };
        TaskResponse {
            request_id: req.request_id.clone(),
            outcome,
            duration_ms: started.elapsed().as_secs_f64() * 1000.0,
        }
    }
}

/// Execute one request against a registry with a capacity gate. Bad inputs
/// map to refusals or failures in the response; this never errors.
pub fn handle_execute(
    req: &TaskRequest,
    registry: &Arc<TaskRegistry>,
    gate_capacity: usize,
) -> TaskResponse {
    WorkerCore::new(
        registry.clone(),
        WorkerOptions {
            capacity: gate_capacity,
            ..Default::default()
        },
    )
    .execute(req)
}

/// Start the application service: `POST /execute` runs a task, `GET /tasks`
/// lists registered names. Closes the registry first.
pub fn serve_worker(
    addr: SocketAddr,
    registry: Arc<TaskRegistry>,
    capacity: usize,
) -> Result<ServiceHandle, ServeError> {
    serve_worker_with(
        addr,
        registry,
        WorkerOptions {
            capacity,
            ..Default::default()
        },
    )
}

/// [`serve_worker`] with full options.
pub fn serve_worker_with(
    addr: SocketAddr,
    registry: Arc<TaskRegistry>,
    options: WorkerOptions,
) -> Result<ServiceHandle, ServeError> {
    registry.close();
    let core = Arc::new(WorkerCore::new(registry, options));
    let router = Router::new()
        .route("/execute", post(execute_endpoint))
        .route("/tasks", get(tasks_endpoint))
        .with_state(core);
    spawn_service(addr, router)
}

async fn execute_endpoint(
    State(core): State<Arc<WorkerCore>>,
    body: Result<Json<TaskRequest>, JsonRejection>,
) -> Result<Json<TaskResponse>, (StatusCode, String)> {
    let Json(req) = body.map_err(|e| (StatusCode::BAD_REQUEST, e.to_string()))?;
    let response = tokio::task::spawn_blocking(move || core.execute(&req))
        .await
        .map_err(|e| (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(Json(response))
}

async fn tasks_endpoint(State(core): State<Arc<WorkerCore>>) -> Json<Vec<String>> {
    Json(core.registry.names())
}
