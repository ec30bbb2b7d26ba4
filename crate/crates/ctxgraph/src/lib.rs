//! Context-propagating computational-graph execution.
//!
//! ctxgraph runs user-declared task graphs across a small fleet of worker
//! servers, carrying a provenance-tagged context from the graph's origin to
//! every node. The pieces fit together like this:
//!
//! ```text
//! ┌──────────┐   validate / condense   ┌──────────────┐
//! │ GraphSpec│ ───────────────────────▶│ValidatedGraph│
//! └──────────┘                         └──────┬───────┘
//!                                             │ run_graph
//!                                             ▼
//!  ┌────────────┐   POST /submit   ┌──────────────────┐
//!  │orchestrator│ ───────────────▶ │     gateway      │
//!  │ + journal  │ ◀─────────────── │ queue + policies │
//!  └────────────┘   TaskResponse   └───────┬──────────┘
//!                                          │ probe + dispatch
//!                              ┌───────────┴───────────┐
//!                              ▼                       ▼
//!                        ┌──────────┐            ┌──────────┐
//!                        │ worker 1 │            │ worker N │
//!                        │ app + hb │    ...     │ app + hb │
//!                        └──────────┘            └──────────┘
//! ```
//!
//! * [`context`] — the context algebra: provenance-tagged entries, set
//!   union, and flattening into a plain key/value view.
//! * [`graph`] — graph declaration, validation, condensation of codependent
//!   groups into union nodes, and context propagation.
//! * [`heartbeat`] — the per-server resource monitor, the probing client,
//!   and the system-vs-application error classifier.
//! * [`worker`] — the generic application server: task registry, capacity
//!   gate, and the `/execute` endpoint.
//! * [`gateway`] — the central allocator: routing table, task queue/silos,
//!   allocation policies with fallback, and dispatch.
//! * [`orchestrator`] — durable execution: journaling, retry, and replay
//!   with memoized re-runs.
//! * [`sim`] — a deterministic in-process simulation of a full deployment
//!   on a virtual clock with scripted fault injection.
//! * [`tasks`] — the built-in task library workers can expose.
//!
//! Everything on the wire is JSON over HTTP/1.1; see the guide's protocol
//! chapter for the exact schemas.

pub mod canon;
pub mod context;
pub mod gateway;
pub mod graph;
pub mod heartbeat;
pub mod orchestrator;
pub mod service;
pub mod sim;
pub mod tasks;
pub mod worker;

pub use context::{Context, ContextEntry, ORIGIN_ID};
pub use graph::{CondensedGraph, GraphSpec, NodeDecl, ValidatedGraph};
pub use heartbeat::{HeartbeatReport, ProbeOutcome, ProbeResult, ServerStatus};
pub use orchestrator::{JournalEntry, RetryPolicy, RunResult};
pub use worker::{TaskRequest, TaskResponse};
