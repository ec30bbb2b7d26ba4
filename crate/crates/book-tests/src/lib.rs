// mdbook cannot run a book's code blocks as tests against the workspace
// crates, so each chapter is included here as a module doc: rustdoc
// compiles and runs every fenced Rust block under `cargo test --doc`.
// One module per chapter keeps a failing snippet traceable to its file.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/graph-model.md")]
pub mod graph_model {}

#[doc = include_str!("../../../book/src/contexts.md")]
pub mod contexts {}

#[doc = include_str!("../../../book/src/failure-detection.md")]
pub mod failure_detection {}

#[doc = include_str!("../../../book/src/gateway.md")]
pub mod gateway {}

#[doc = include_str!("../../../book/src/durable-execution.md")]
pub mod durable_execution {}

#[doc = include_str!("../../../book/src/simulation.md")]
pub mod simulation {}

#[doc = include_str!("../../../book/src/operations.md")]
pub mod operations {}
