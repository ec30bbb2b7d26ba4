//! Canonical JSON encoding.
//!
//! Determinism checks and content hashing both depend on one byte-exact
//! encoding: object keys sorted, no insignificant whitespace. Struct fields
//! serialize in declaration order (serde's default), so canonicalization
//! only has to normalize free-form [`Value`] maps.

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;

use crate::context::Context;

/// Encode a JSON value canonically: object keys in ascending byte order,
/// compact separators.
pub fn canonical_string(value: &Value) -> String {
    let mut out = String::new();
    write_value(&mut out, value);
    out
}

/// Serialize any value through [`Value`] and canonicalize it.
pub fn canonical_json<T: Serialize>(t: &T) -> String {
    let v = serde_json::to_value(t).expect("serializable value");
    canonical_string(&v)
}

fn write_value(out: &mut String, value: &Value) {
    match value {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => out.push_str(&n.to_string()),
        Value::String(s) => {
            out.push_str(&serde_json::to_string(s).expect("string encodes"));
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_value(out, item);
            }
            out.push(']');
        }
        Value::Object(map) => {
            // serde_json::Map already iterates in key order, but sort
            // explicitly so the encoding never depends on build features.
            let sorted: BTreeMap<&String, &Value> = map.iter().collect();
            out.push('{');
            for (i, (k, v)) in sorted.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(k).expect("string encodes"));
                out.push(':');
                write_value(out, v);
            }
            out.push('}');
        }
    }
}

/// Content hash of one task invocation: SHA-256 over the canonical encoding
/// of the task name, fully materialized inputs, and the serialized context.
///
/// Invariant under input-map and context-entry reordering, and independent
/// of wall-clock time, so replayed runs recompute the same hash.
pub fn input_hash(task: &str, inputs: &BTreeMap<String, Value>, context: &Context) -> String {
    let doc = serde_json::json!({
        "task": task,
        "inputs": inputs,
        "context": context,
    });
    let bytes = canonical_string(&doc);
    hex::encode(Sha256::digest(bytes.as_bytes()))
}
