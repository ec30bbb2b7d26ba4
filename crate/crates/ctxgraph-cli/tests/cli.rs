//! End-to-end tests of the binary: exit codes, file outputs, resume, and
//! the long-running service commands.

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::Duration;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ctxgraph"))
}

const DIAMOND: &str = r#"{
  "origin_context": {"env": "cli-test"},
  "nodes": [
    {"id": "A", "task": "double", "inputs": {"x": {"literal": 3}}},
    {"id": "B", "task": "double", "inputs": {"x": {"output_of": "A"}}},
    {"id": "C", "task": "double", "inputs": {"x": {"output_of": "A"}}},
    {"id": "D", "task": "add", "inputs": {"a": {"output_of": "B"}, "b": {"output_of": "C"}}}
  ],
  "edges": [["A","B"],["A","C"],["B","D"],["C","D"]]
}"#;

const CYCLIC: &str = r#"{
  "nodes": [
    {"id": "A", "task": "identity"},
    {"id": "B", "task": "identity"}
  ],
  "edges": [["A","B"],["B","A"]]
}"#;

fn write(dir: &Path, name: &str, content: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, content).unwrap();
    path
}

#[test]
fn validate_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let diamond = write(dir.path(), "diamond.json", DIAMOND);
    let cyclic = write(dir.path(), "cyclic.json", CYCLIC);

    let out = bin().arg("validate").arg(&diamond).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "4 nodes, 3 waves");

    let out = bin().arg("validate").arg(&cyclic).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("cycle"), "stderr: {stderr}");

    let out = bin()
        .arg("validate")
        .arg(dir.path().join("missing.json"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn validate_json_mode_is_canonical() {
    let dir = tempfile::tempdir().unwrap();
    let diamond = write(dir.path(), "diamond.json", DIAMOND);
    let out = bin().arg("--json").arg("validate").arg(&diamond).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let v: serde_json::Value =
        serde_json::from_slice(&out.stdout).expect("stdout is one JSON document");
    assert_eq!(v["nodes"], serde_json::json!(4));
    assert_eq!(v["waves"], serde_json::json!(3));
}

#[test]
fn context_prints_canonical_json_and_rejects_unknown_nodes() {
    let dir = tempfile::tempdir().unwrap();
    let graph = write(
        dir.path(),
        "pair.json",
        r#"{
          "origin_context": {},
          "nodes": [
            {"id": "A", "task": "identity", "data": {"a": 1}},
            {"id": "B", "task": "identity", "data": {"b": 2}}
          ],
          "codependent_groups": [["A","B"]]
        }"#,
    );

    // codependent members print identical contexts
    let ctx_a = bin().arg("context").arg(&graph).arg("--node").arg("A").output().unwrap();
    let ctx_b = bin().arg("context").arg(&graph).arg("--node").arg("B").output().unwrap();
    assert_eq!(ctx_a.status.code(), Some(0));
    assert_eq!(ctx_a.stdout, ctx_b.stdout);
    let parsed: serde_json::Value = serde_json::from_slice(&ctx_a.stdout).unwrap();
    assert_eq!(parsed.as_array().unwrap().len(), 2);

    let unknown = bin().arg("context").arg(&graph).arg("--node").arg("Z").output().unwrap();
    assert_eq!(unknown.status.code(), Some(2));
}

#[test]
fn run_local_writes_result_and_journal() {
    let dir = tempfile::tempdir().unwrap();
    let diamond = write(dir.path(), "diamond.json", DIAMOND);
    let out_path = dir.path().join("result.json");
    let journal = dir.path().join("run.journal.ndjson");

    let out = bin()
        .arg("run")
        .arg(&diamond)
        .arg("--local")
        .arg("--out")
        .arg(&out_path)
        .arg("--journal")
        .arg(&journal)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));

    let result: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out_path).unwrap()).unwrap();
    let outputs = result["outputs"].as_object().unwrap();
    assert_eq!(outputs.len(), 4);
    assert_eq!(outputs["D"], serde_json::json!(24));
    assert_eq!(
        std::fs::read_to_string(&journal).unwrap().lines().count(),
        4
    );
}

#[test]
fn run_with_unreachable_gateway_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let diamond = write(dir.path(), "diamond.json", DIAMOND);
    let out = bin()
        .current_dir(dir.path())
        .arg("run")
        .arg(&diamond)
        .arg("--gateway")
        .arg("http://127.0.0.1:1")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gateway unreachable"));
}

#[test]
fn resume_after_interruption_reproduces_the_full_result() {
    let dir = tempfile::tempdir().unwrap();
    let diamond = write(dir.path(), "diamond.json", DIAMOND);
    let full_result = dir.path().join("full.json");
    let journal = dir.path().join("run.journal.ndjson");

    // uninterrupted reference run
    let out = bin()
        .arg("run").arg(&diamond).arg("--local")
        .arg("--out").arg(&full_result)
        .arg("--journal").arg(&journal)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));

    // simulate an interruption: keep only the first journaled attempt
    let text = std::fs::read_to_string(&journal).unwrap();
    let first_line = text.lines().next().unwrap().to_string();
    std::fs::write(&journal, format!("{first_line}\n")).unwrap();

    let resumed_result = dir.path().join("resumed.json");
    let out = bin()
        .arg("run").arg(&diamond).arg("--local")
        .arg("--resume").arg(&journal)
        .arg("--out").arg(&resumed_result)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));

    // outputs and statuses identical to the uninterrupted run
    let full: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&full_result).unwrap()).unwrap();
    let resumed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&resumed_result).unwrap()).unwrap();
    assert_eq!(full["outputs"], resumed["outputs"]);
    assert_eq!(full["statuses"], resumed["statuses"]);

    // the journal grew back to cover the remaining nodes
    assert_eq!(
        std::fs::read_to_string(&journal).unwrap().lines().count(),
        4
    );
}

#[test]
fn simulate_writes_a_deterministic_trace() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write(
        dir.path(),
        "scenario.json",
        r#"{
          "graph": {
            "nodes": [{"id": "A", "task": "double", "inputs": {"x": {"literal": 8}}}]
          },
          "servers": [{"server_id": "w1"}],
          "faults": [
            {"at_ms": 0, "target": "w1", "kind": "SYSTEM_DOWN"},
            {"at_ms": 500, "target": "w1", "kind": "SYSTEM_UP"}
          ],
          "seed": 3
        }"#,
    );
    let trace1 = dir.path().join("t1.ndjson");
    let trace2 = dir.path().join("t2.ndjson");
    for trace in [&trace1, &trace2] {
        let out = bin()
            .arg("simulate")
            .arg(&scenario)
            .arg("--trace")
            .arg(trace)
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    }
    let t1 = std::fs::read_to_string(&trace1).unwrap();
    let t2 = std::fs::read_to_string(&trace2).unwrap();
    assert!(!t1.is_empty());
    assert_eq!(t1, t2);
}

struct ChildGuard(Child);

impl Drop for ChildGuard {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

/// Start a service command and capture the addresses it announces.
fn spawn_service(mut cmd: Command, lines_wanted: usize) -> (ChildGuard, Vec<String>) {
    let mut child = cmd.stdout(Stdio::piped()).stderr(Stdio::null()).spawn().unwrap();
    let stdout = child.stdout.take().unwrap();
    let mut lines = Vec::new();
    let mut reader = BufReader::new(stdout);
    for _ in 0..lines_wanted {
        let mut line = String::new();
        reader.read_line(&mut line).unwrap();
        lines.push(line.trim().to_string());
    }
    (ChildGuard(child), lines)
}

fn free_port() -> u16 {
    std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port()
}

#[test]
fn worker_and_gateway_processes_serve_until_killed() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write(dir.path(), "tasks.json", r#"["double", "add"]"#);

    let (app_port, hb_port, gw_port) = (free_port(), free_port(), free_port());
    let mut cmd = bin();
    cmd.arg("worker")
        .arg("--port").arg(app_port.to_string())
        .arg("--hb-port").arg(hb_port.to_string())
        .arg("--tasks").arg(&manifest)
        .arg("--capacity").arg("2")
        .arg("--bind").arg("127.0.0.1")
        .arg("--server-id").arg("w-test");
    let (_worker, lines) = spawn_service(cmd, 2);
    assert!(lines[0].contains("w-test"), "{lines:?}");

    let client = reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(5))
        .build()
        .unwrap();
    let names: Vec<String> = client
        .get(format!("http://127.0.0.1:{app_port}/tasks"))
        .send()
        .unwrap()
        .json()
        .unwrap();
    assert_eq!(names, ["add", "double"]);
    let hb: serde_json::Value = client
        .get(format!("http://127.0.0.1:{hb_port}/heartbeat"))
        .send()
        .unwrap()
        .json()
        .unwrap();
    assert_eq!(hb["server_id"], serde_json::json!("w-test"));

    // gateway over this worker, end to end through POST /submit
    let servers = write(
        dir.path(),
        "servers.json",
        &format!(
            r#"[{{"server_id":"w-test","app_address":"127.0.0.1:{app_port}","hb_address":"127.0.0.1:{hb_port}"}}]"#
        ),
    );
    let mut cmd = bin();
    cmd.arg("gateway")
        .arg("--port").arg(gw_port.to_string())
        .arg("--servers").arg(&servers)
        .arg("--policy").arg("ROUND_ROBIN")
        .arg("--bind").arg("127.0.0.1")
        .arg("--multi-task");
    let (_gateway, lines) = spawn_service(cmd, 1);
    assert!(lines[0].contains("listening"), "{lines:?}");

    let req = serde_json::json!({
        "request_id": "cli-e2e-1",
        "node_id": "n",
        "task": "double",
        "inputs": {"x": 21},
        "context": [],
        "attempt": 1
    });
    let resp: serde_json::Value = client
        .post(format!("http://127.0.0.1:{gw_port}/submit"))
        .json(&req)
        .timeout(Duration::from_secs(20))
        .send()
        .unwrap()
        .json()
        .unwrap();
    assert_eq!(resp["outcome"]["status"], serde_json::json!("COMPLETED"));
    assert_eq!(resp["outcome"]["value"], serde_json::json!(42));
}
