//! Durable graph execution: journaling, retry, and replay.
//!
//! The orchestrator drives a validated graph to completion through an
//! executor — a gateway client, or an in-process worker for local runs.
//! Every attempt is journaled before its outcome is acted on, and every
//! request carries the node's full context including all origin entries.
//! Because each invocation is a pure function of (inputs, context), an
//! interrupted run replays to the same result: completed nodes whose
//! recorded input hash still matches are read back instead of re-executed.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

use crate::canon::{canonical_json, input_hash};
use crate::graph::{InputRef, NodeDecl, ValidatedGraph};
use crate::heartbeat::epoch_ms;
use crate::worker::{TaskOutcome, TaskRequest, TaskResponse, WorkerCore};

/// One journaled execution attempt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub seq: u64,
    pub node_id: String,
    pub attempt: u32,
    /// Content hash of (task, materialized inputs, serialized context);
    /// reproducible from the graph and prior outputs.
    pub input_hash: String,
    pub outcome: TaskOutcome,
    pub started_ms: i64,
    pub ended_ms: i64,
}

/// Retry schedule: delay before attempt k (k ≥ 2) is
/// `backoff_base_ms × backoff_factor^(k−2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
    pub backoff_factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            backoff_base_ms: 100,
            backoff_factor: 2.0,
        }
    }
}

impl RetryPolicy {
    /// Delay before the given attempt (1-based). Attempt 1 runs immediately.
    pub fn delay_before_ms(&self, attempt: u32) -> u64 {
        if attempt < 2 {
            return 0;
        }
        let factor = self.backoff_factor.powi(attempt as i32 - 2);
        (self.backoff_base_ms as f64 * factor) as u64
    }

    /// No delays; handy for tests and simulations.
    pub fn immediate(max_attempts: u32) -> Self {
        Self {
            max_attempts,
            backoff_base_ms: 0,
            backoff_factor: 1.0,
        }
    }
}

/// Final state of one node after a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", content = "detail", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NodeStatus {
    Completed,
    Failed(String),
    /// A condensed-graph ancestor exhausted its retries.
    Skipped,
}

/// Everything a run produced. `outputs` holds exactly the completed nodes;
/// `statuses` covers every node in the graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub outputs: BTreeMap<String, Value>,
    pub statuses: BTreeMap<String, NodeStatus>,
    pub journal: Vec<JournalEntry>,
    pub wall_ms: f64,
}

impl RunResult {
    /// True when every node completed.
    pub fn fully_completed(&self) -> bool {
        self.statuses.values().all(|s| matches!(s, NodeStatus::Completed))
    }
}

#[derive(Debug, Error)]
pub enum OrchestratorError {
    /// Durability cannot be guaranteed without the journal; the run aborts.
    #[error("journal write failed: {0}")]
    JournalWrite(String),
    #[error("journal read failed: {0}")]
    JournalRead(String),
    /// A recorded input hash disagrees with the recomputed one: the graph
    /// changed since the journal was written. Replay refuses to guess.
    #[error("journal mismatch at seq {seq} (node {node}): {detail}")]
    JournalMismatch {
        seq: u64,
        node: String,
        detail: String,
    },
    #[error("journal {0} is in use by another orchestrator")]
    JournalLocked(PathBuf),
    /// Guard against orchestrator bugs; unreachable when waves are honored.
    #[error("node {node} needs output of {referent}, which has not completed")]
    MissingDependency { node: String, referent: String },
}

// ---------------------------------------------------------------------------
// Executors
// ---------------------------------------------------------------------------

/// Where task requests go. The executor also owns the clock and the retry
/// sleep so simulations can run on virtual time.
pub trait Executor {
    /// Deliver one request. `Err` is a transport-level failure (counted
    /// like a failed attempt); application failures come back in the
    /// response outcome.
    fn execute(&self, req: &TaskRequest) -> Result<TaskResponse, String>;

    fn now_ms(&self) -> i64 {
        epoch_ms()
    }

    fn sleep_ms(&self, ms: u64) {
        if ms > 0 {
            std::thread::sleep(std::time::Duration::from_millis(ms));
        }
    }
}

/// Runs worker logic in-process — the full pipeline on one machine, no
/// sockets.
pub struct LocalExecutor {
    core: WorkerCore,
}

impl LocalExecutor {
    pub fn new(registry: std::sync::Arc<crate::worker::TaskRegistry>) -> Self {
        registry.close();
        Self {
            core: WorkerCore::new(registry, Default::default()),
        }
    }
}

impl Executor for LocalExecutor {
    fn execute(&self, req: &TaskRequest) -> Result<TaskResponse, String> {
        Ok(self.core.execute(req))
    }
}

/// Submits every request to a gateway's `/submit` endpoint.
pub struct GatewayExecutor {
    base_url: String,
    client: reqwest::blocking::Client,
}

impl GatewayExecutor {
    pub fn new(base_url: impl Into<String>, timeout_ms: u64) -> Result<Self, String> {
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_millis(timeout_ms))
            .build()
            .map_err(|e| e.to_string())?;
        Ok(Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            client,
        })
    }
}

impl Executor for GatewayExecutor {
    fn execute(&self, req: &TaskRequest) -> Result<TaskResponse, String> {
        let url = format!("{}/submit", self.base_url);
        let resp = self
            .client
            .post(&url)
            .json(req)
            .send()
            .map_err(|e| format!("gateway unreachable: {e}"))?;
        if !resp.status().is_success() {
            return Err(format!("gateway answered http {}", resp.status().as_u16()));
        }
        resp.json::<TaskResponse>()
            .map_err(|e| format!("gateway response malformed: {e}"))
    }
}

// ---------------------------------------------------------------------------
// Journal sinks
// ---------------------------------------------------------------------------

/// Write-ahead sink: `append` must make the entry durable before returning.
pub trait JournalSink {
    fn append(&mut self, entry: &JournalEntry) -> Result<(), OrchestratorError>;
}

/// In-memory journal for tests and simulations.
#[derive(Debug, Default)]
pub struct MemJournal {
    pub entries: Vec<JournalEntry>,
}

impl MemJournal {
    pub fn new() -> Self {
        Self::default()
    }
}

impl JournalSink for MemJournal {
    fn append(&mut self, entry: &JournalEntry) -> Result<(), OrchestratorError> {
        self.entries.push(entry.clone());
        Ok(())
    }
}

/// Append-only NDJSON journal file, one canonical-JSON entry per line.
/// Holds a `<path>.lock` marker while open: one orchestrator per journal.
pub struct FileJournal {
    file: File,
    path: PathBuf,
    lock_path: PathBuf,
}

impl FileJournal {
    /// Create a fresh journal (truncating any previous content) or open an
    /// existing one for appending.
    pub fn open(path: impl AsRef<Path>, truncate: bool) -> Result<Self, OrchestratorError> {
        let path = path.as_ref().to_path_buf();
        let lock_path = path.with_extension(format!(
            "{}.lock",
            path.extension().and_then(|e| e.to_str()).unwrap_or("journal")
        ));
        match OpenOptions::new().write(true).create_new(true).open(&lock_path) {
            Ok(_) => {}
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(OrchestratorError::JournalLocked(path));
            }
            Err(e) => return Err(OrchestratorError::JournalWrite(e.to_string())),
        }
        let file = OpenOptions::new()
            .create(true)
            .append(!truncate)
            .truncate(truncate)
            .write(true)
            .open(&path)
            .map_err(|e| {
                let _ = std::fs::remove_file(&lock_path);
                OrchestratorError::JournalWrite(e.to_string())
            })?;
        Ok(Self {
            file,
            path,
            lock_path,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl JournalSink for FileJournal {
    fn append(&mut self, entry: &JournalEntry) -> Result<(), OrchestratorError> {
        let line = canonical_json(entry);
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.write_all(b"\n"))
            .and_then(|_| self.file.flush())
            .map_err(|e| OrchestratorError::JournalWrite(e.to_string()))
    }
}

impl Drop for FileJournal {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.lock_path);
    }
}

/// Read a journal file back into entries.
pub fn read_journal(path: impl AsRef<Path>) -> Result<Vec<JournalEntry>, OrchestratorError> {
    let file = File::open(path.as_ref()).map_err(|e| OrchestratorError::JournalRead(e.to_string()))?;
    let mut entries = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| OrchestratorError::JournalRead(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        entries.push(
            serde_json::from_str(&line).map_err(|e| OrchestratorError::JournalRead(e.to_string()))?,
        );
    }
    Ok(entries)
}

// ---------------------------------------------------------------------------
// Input materialization
// ---------------------------------------------------------------------------

/// Resolve a node's parameter bindings: literals pass through, `output_of`
/// references are replaced by the referent's completed output. The result
/// is exactly the value set hashed into `input_hash`.
pub fn materialize_inputs(
    node: &NodeDecl,
    completed: &BTreeMap<String, Value>,
) -> Result<BTreeMap<String, Value>, OrchestratorError> {
    let mut out = BTreeMap::new();
    for (param, input) in &node.inputs {
        let value = match input {
            InputRef::Literal(v) => v.clone(),
            InputRef::OutputOf(referent) => completed
                .get(referent)
                .cloned()
                .ok_or_else(|| OrchestratorError::MissingDependency {
                    node: node.id.clone(),
                    referent: referent.clone(),
                })?,
        };
        out.insert(param.clone(), value);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Run and replay
// ---------------------------------------------------------------------------

/// Execute a validated graph to completion.
///
/// Supernodes run in wave order; members of a union node run sequentially
/// in declaration order sharing one context. A node that exhausts its
/// retries marks all condensed-graph descendants SKIPPED while independent
/// branches continue.
pub fn run_graph(
    g: &ValidatedGraph,
    executor: &dyn Executor,
    retry: &RetryPolicy,
    journal: &mut dyn JournalSink,
) -> Result<RunResult, OrchestratorError> {
    run_internal(g, executor, retry, journal, BTreeMap::new(), Vec::new())
}

/// Resume from a journal produced by a (possibly interrupted) run of the
/// same graph.
///
/// The recorded hash chain is verified first; any disagreement with the
/// recomputed hashes means the graph changed and replay refuses. Nodes
/// with a verified COMPLETED entry are read back, everything else executes
/// normally, and new entries continue the sequence in `journal`.
pub fn replay(
    prior: &[JournalEntry],
    g: &ValidatedGraph,
    executor: &dyn Executor,
    retry: &RetryPolicy,
    journal: &mut dyn JournalSink,
) -> Result<RunResult, OrchestratorError> {
    let memo = verify_journal(prior, g)?;
    run_internal(g, executor, retry, journal, memo, prior.to_vec())
}

/// Check a journal against a graph: hashes must reproduce from the graph
/// and prior outputs, sequence numbers must strictly increase, and no node
/// may complete twice. Returns the verified completed outputs.
pub fn verify_journal(
    entries: &[JournalEntry],
    g: &ValidatedGraph,
) -> Result<BTreeMap<String, Value>, OrchestratorError> {
    let mut completed: BTreeMap<String, Value> = BTreeMap::new();
    let mut last_seq: Option<u64> = None;
    for entry in entries {
        let mismatch = |detail: String| OrchestratorError::JournalMismatch {
            seq: entry.seq,
            node: entry.node_id.clone(),
            detail,
        };
        if let Some(prev) = last_seq {
            if entry.seq <= prev {
                return Err(mismatch(format!("seq not increasing (prev {prev})")));
            }
        }
        last_seq = Some(entry.seq);
        let node = g
            .spec
            .node(&entry.node_id)
            .ok_or_else(|| mismatch("node not in graph".to_string()))?;
        let inputs = materialize_inputs(node, &completed)
            .map_err(|e| mismatch(format!("inputs not reproducible: {e}")))?;
        let ctx = g
            .context_of(&entry.node_id)
            .ok_or_else(|| mismatch("node has no context".to_string()))?;
        let expected = input_hash(&node.task, &inputs, ctx);
        if expected != entry.input_hash {
            return Err(mismatch(format!(
                "input hash {} does not reproduce (expected {expected})",
                entry.input_hash
            )));
        }
        if let TaskOutcome::Completed(v) = &entry.outcome {
            if completed.contains_key(&entry.node_id) {
                return Err(mismatch("node completed twice".to_string()));
            }
            completed.insert(entry.node_id.clone(), v.clone());
        }
    }
    Ok(completed)
}

fn run_internal(
    g: &ValidatedGraph,
    executor: &dyn Executor,
    retry: &RetryPolicy,
    journal: &mut dyn JournalSink,
    memo: BTreeMap<String, Value>,
    prior_entries: Vec<JournalEntry>,
) -> Result<RunResult, OrchestratorError> {
    let wall_start = Instant::now();
    let mut seq = prior_entries.iter().map(|e| e.seq + 1).max().unwrap_or(0);
    let mut entries = prior_entries;
    let mut completed = memo;
    let mut statuses: BTreeMap<String, NodeStatus> = BTreeMap::new();
    let mut failed_supernodes: BTreeSet<String> = BTreeSet::new();

    for wave in &g.condensed.topo_waves {
        for super_id in wave {
            let supernode = g
                .condensed
                .supernodes
                .iter()
                .find(|s| &s.id == super_id)
                .expect("wave ids are supernodes");

            let blocked = g
                .condensed
                .ancestors_of(super_id)
                .iter()
                .any(|a| failed_supernodes.contains(a));
            if blocked {
                for member in &supernode.members {
                    statuses.insert(member.clone(), NodeStatus::Skipped);
                }
                continue;
            }

            for member in &supernode.members {
                if completed.contains_key(member) {
                    // memoized from a prior journal
                    statuses.insert(member.clone(), NodeStatus::Completed);
                    continue;
                }
                let node = g.spec.node(member).expect("members are declared nodes");
                let inputs = materialize_inputs(node, &completed)?;
                let ctx = g.context_of(member).expect("validated nodes have contexts");
                let hash = input_hash(&node.task, &inputs, ctx);

                let mut last_reason = String::new();
                let mut succeeded = false;
                for attempt in 1..=retry.max_attempts.max(1) {
                    executor.sleep_ms(retry.delay_before_ms(attempt));
                    let req = TaskRequest {
                        request_id: format!("{member}.{attempt}"),
                        node_id: member.clone(),
                        task: node.task.clone(),
                        inputs: inputs.clone(),
                        context: ctx.clone(),
                        attempt,
                    };
                    let started_ms = executor.now_ms();
                    let outcome = match executor.execute(&req) {
                        Ok(resp) => resp.outcome,
                        Err(transport) => TaskOutcome::Failed(format!("transport: {transport}")),
                    };
                    let ended_ms = executor.now_ms();

                    let entry = JournalEntry {
                        seq,
                        node_id: member.clone(),
                        attempt,
                        input_hash: hash.clone(),
                        outcome: outcome.clone(),
                        started_ms,
                        ended_ms,
                    };
                    // write-ahead: the entry is durable before the outcome
                    // drives anything
                    journal.append(&entry)?;
                    entries.push(entry);
                    seq += 1;

                    match outcome {
                        TaskOutcome::Completed(v) => {
                            completed.insert(member.clone(), v);
                            statuses.insert(member.clone(), NodeStatus::Completed);
                            succeeded = true;
                            break;
                        }
                        TaskOutcome::Refused(r) | TaskOutcome::Failed(r) => last_reason = r,
                    }
                }
                if !succeeded {
                    statuses.insert(member.clone(), NodeStatus::Failed(last_reason));
                    failed_supernodes.insert(super_id.clone());
                }
            }
        }
    }

    let outputs: BTreeMap<String, Value> = completed
        .into_iter()
        .filter(|(k, _)| statuses.contains_key(k))
        .collect();
    Ok(RunResult {
        outputs,
        statuses,
        journal: entries,
        wall_ms: wall_start.elapsed().as_secs_f64() * 1000.0,
    })
}

/// Zero out wall-clock fields so journals from different runs compare
/// byte-identically.
pub fn normalize_timestamps(entries: &[JournalEntry]) -> Vec<JournalEntry> {
    entries
        .iter()
        .map(|e| JournalEntry {
            started_ms: 0,
            ended_ms: 0,
            ..e.clone()
        })
        .collect()
}

/// Journal entries as NDJSON (canonical JSON, one entry per line).
pub fn journal_to_ndjson(entries: &[JournalEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        out.push_str(&canonical_json(e));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{validate_graph, GraphSpec};
    use crate::tasks::full_builtin_registry;
    use serde_json::json;
    use std::cell::RefCell;

    fn diamond() -> ValidatedGraph {
        // A doubles 3 -> 6; B doubles A -> 12; C doubles A -> 12;
        // D = B + C = 24
        let text = r#"{
            "origin_context": {},
            "nodes": [
                {"id": "A", "task": "double", "inputs": {"x": {"literal": 3}}},
                {"id": "B", "task": "double", "inputs": {"x": {"output_of": "A"}}},
                {"id": "C", "task": "double", "inputs": {"x": {"output_of": "A"}}},
                {"id": "D", "task": "add",
                 "inputs": {"a": {"output_of": "B"}, "b": {"output_of": "C"}}}
            ],
            "edges": [["A","B"],["A","C"],["B","D"],["C","D"]]
        }"#;
        validate_graph(&GraphSpec::from_json(text).unwrap()).unwrap()
    }

    fn local() -> LocalExecutor {
        LocalExecutor::new(full_builtin_registry())
    }

    #[test]
    fn diamond_composes_through_injected_outputs() {
        let g = diamond();
        let mut journal = MemJournal::new();
        let result = run_graph(&g, &local(), &RetryPolicy::immediate(3), &mut journal).unwrap();
        assert_eq!(result.outputs["A"], json!(6));
        assert_eq!(result.outputs["B"], json!(12));
        assert_eq!(result.outputs["C"], json!(12));
        assert_eq!(result.outputs["D"], json!(24));
        assert!(result.fully_completed());
        assert_eq!(result.journal.len(), 4);
    }

    fn failing_b_graph() -> ValidatedGraph {
        let text = r#"{
            "nodes": [
                {"id": "A", "task": "double", "inputs": {"x": {"literal": 1}}},
                {"id": "B", "task": "fail", "inputs": {"reason": {"literal": "scripted"}}},
                {"id": "C", "task": "double", "inputs": {"x": {"output_of": "A"}}},
                {"id": "D", "task": "identity", "inputs": {"x": {"output_of": "B"}}}
            ],
            "edges": [["A","B"],["A","C"],["B","D"]]
        }"#;
        validate_graph(&GraphSpec::from_json(text).unwrap()).unwrap()
    }

    #[test]
    fn exhausted_retries_skip_descendants_only() {
        let g = failing_b_graph();
        let mut journal = MemJournal::new();
        let result = run_graph(&g, &local(), &RetryPolicy::immediate(3), &mut journal).unwrap();
        let b_attempts = result
            .journal
            .iter()
            .filter(|e| e.node_id == "B")
            .count();
        assert_eq!(b_attempts, 3, "exactly max_attempts journal entries");
        assert_eq!(result.statuses["A"], NodeStatus::Completed);
        assert_eq!(result.statuses["C"], NodeStatus::Completed);
        assert!(matches!(result.statuses["B"], NodeStatus::Failed(_)));
        assert_eq!(result.statuses["D"], NodeStatus::Skipped);
        assert!(!result.outputs.contains_key("D"));
    }

    #[test]
    fn journals_are_deterministic_modulo_timestamps() {
        let g = diamond();
        let run = || {
            let mut j = MemJournal::new();
            run_graph(&g, &local(), &RetryPolicy::immediate(3), &mut j).unwrap();
            journal_to_ndjson(&normalize_timestamps(&j.entries))
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn materialize_passes_literals_and_resolves_references() {
        let node = NodeDecl {
            id: "N".into(),
            task: "t".into(),
            data: BTreeMap::new(),
            inputs: BTreeMap::from([
                ("x".to_string(), InputRef::Literal(json!(3))),
                ("y".to_string(), InputRef::OutputOf("A".to_string())),
            ]),
        };
        let completed = BTreeMap::from([("A".to_string(), json!(7))]);
        let inputs = materialize_inputs(&node, &completed).unwrap();
        assert_eq!(inputs["x"], json!(3));
        assert_eq!(inputs["y"], json!(7));
    }

    #[test]
    fn materialize_empty_inputs() {
        let node = NodeDecl {
            id: "N".into(),
            task: "t".into(),
            data: BTreeMap::new(),
            inputs: BTreeMap::new(),
        };
        assert!(materialize_inputs(&node, &BTreeMap::new()).unwrap().is_empty());
    }

    #[test]
    fn materialize_missing_dependency_errors() {
        let node = NodeDecl {
            id: "N".into(),
            task: "t".into(),
            data: BTreeMap::new(),
            inputs: BTreeMap::from([("y".to_string(), InputRef::OutputOf("A".to_string()))]),
        };
        assert!(matches!(
            materialize_inputs(&node, &BTreeMap::new()),
            Err(OrchestratorError::MissingDependency { .. })
        ));
    }

    /// Counts executions and optionally asserts the context each request
    /// carries.
    struct CountingExecutor {
        inner: LocalExecutor,
        seen: RefCell<Vec<String>>,
    }

    impl CountingExecutor {
        fn new() -> Self {
            Self {
                inner: local(),
                seen: RefCell::new(Vec::new()),
            }
        }
    }

    impl Executor for CountingExecutor {
        fn execute(&self, req: &TaskRequest) -> Result<TaskResponse, String> {
            self.seen.borrow_mut().push(req.node_id.clone());
            self.inner.execute(req)
        }
    }

    #[test]
    fn replay_of_interrupted_run_matches_uninterrupted() {
        let g = diamond();
        let mut full = MemJournal::new();
        let reference = run_graph(&g, &local(), &RetryPolicy::immediate(3), &mut full).unwrap();

        // interrupt after wave 1 (only A journaled)
        let prefix: Vec<JournalEntry> = full.entries[..1].to_vec();
        let exec = CountingExecutor::new();
        let mut resumed = MemJournal::new();
        let result = replay(&prefix, &g, &exec, &RetryPolicy::immediate(3), &mut resumed).unwrap();
        assert_eq!(result.outputs, reference.outputs);
        assert!(
            !exec.seen.borrow().contains(&"A".to_string()),
            "A must be memoized, not re-executed"
        );
    }

    #[test]
    fn replay_of_complete_journal_executes_nothing() {
        let g = diamond();
        let mut full = MemJournal::new();
        let reference = run_graph(&g, &local(), &RetryPolicy::immediate(3), &mut full).unwrap();
        let exec = CountingExecutor::new();
        let mut sink = MemJournal::new();
        let result = replay(
            &full.entries,
            &g,
            &exec,
            &RetryPolicy::immediate(3),
            &mut sink,
        )
        .unwrap();
        assert!(exec.seen.borrow().is_empty());
        assert_eq!(result.outputs, reference.outputs);
        assert!(sink.entries.is_empty());
        // at most one COMPLETED per node across run + replay
        for node in ["A", "B", "C", "D"] {
            let completions = result
                .journal
                .iter()
                .filter(|e| e.node_id == node && matches!(e.outcome, TaskOutcome::Completed(_)))
                .count();
            assert_eq!(completions, 1);
        }
    }

    #[test]
    fn edited_graph_fails_replay_with_mismatch() {
        let g = diamond();
        let mut full = MemJournal::new();
        run_graph(&g, &local(), &RetryPolicy::immediate(3), &mut full).unwrap();

        // change node A's inputs: recorded hashes no longer reproduce
        let mut spec = g.spec.clone();
        spec.nodes[0].inputs.insert("x".to_string(), InputRef::Literal(json!(4)));
        let edited = validate_graph(&spec).unwrap();
        let mut sink = MemJournal::new();
        let err = replay(
            &full.entries,
            &edited,
            &local(),
            &RetryPolicy::immediate(3),
            &mut sink,
        )
        .unwrap_err();
        assert!(matches!(err, OrchestratorError::JournalMismatch { .. }));
    }

    #[test]
    fn every_request_carries_the_full_node_context() {
        let text = r#"{
            "origin_context": {"env": "prod"},
            "nodes": [
                {"id": "A", "task": "double", "data": {"adata": 1},
                 "inputs": {"x": {"literal": 2}}},
                {"id": "B", "task": "ctx_get", "data": {"bdata": 2},
                 "inputs": {"key": {"literal": "env"}}}
            ],
            "edges": [["A","B"]]
        }"#;
        let g = validate_graph(&GraphSpec::from_json(text).unwrap()).unwrap();

        struct ContextAssertingExecutor {
            g: ValidatedGraph,
            inner: LocalExecutor,
        }
        impl Executor for ContextAssertingExecutor {
            fn execute(&self, req: &TaskRequest) -> Result<TaskResponse, String> {
                let expected = self.g.context_of(&req.node_id).unwrap();
                assert_eq!(&req.context, expected, "context totality for {}", req.node_id);
                assert!(req.context.get(crate::context::ORIGIN_ID, "env").is_some());
                self.inner.execute(req)
            }
        }
        let exec = ContextAssertingExecutor {
            g: g.clone(),
            inner: local(),
        };
        let result = run_graph(&g, &exec, &RetryPolicy::immediate(1), &mut MemJournal::new()).unwrap();
        assert_eq!(result.outputs["B"], json!("prod"));
    }

    #[test]
    fn backoff_delays_follow_the_schedule() {
        let retry = RetryPolicy {
            max_attempts: 4,
            backoff_base_ms: 100,
            backoff_factor: 2.0,
        };
        assert_eq!(retry.delay_before_ms(1), 0);
        assert_eq!(retry.delay_before_ms(2), 100);
        assert_eq!(retry.delay_before_ms(3), 200);
        assert_eq!(retry.delay_before_ms(4), 400);
    }

    #[test]
    fn file_journal_round_trips_and_locks() {
        let dir = std::env::temp_dir().join(format!("ctxgraph-j-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run1.journal.ndjson");
        let _ = std::fs::remove_file(&path);

        let g = diamond();
        {
            let mut journal = FileJournal::open(&path, true).unwrap();
            // second opener must be refused while the lock is held
            assert!(matches!(
                FileJournal::open(&path, false),
                Err(OrchestratorError::JournalLocked(_))
            ));
            run_graph(&g, &local(), &RetryPolicy::immediate(3), &mut journal).unwrap();
        }
        let entries = read_journal(&path).unwrap();
        assert_eq!(entries.len(), 4);
        verify_journal(&entries, &g).unwrap();
        // lock released on drop
        let again = FileJournal::open(&path, false).unwrap();
        drop(again);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
