//! Built-in task library.
//!
//! Task implementations live in the worker binary behind the registry —
//! nothing ships code over the wire. A worker's task manifest (a JSON array
//! of names) selects which of these to expose; embedders register their own
//! functions alongside or instead.
//!
//! Arithmetic stays in integers when every operand is an integer, so
//! results round-trip through JSON without picking up a fractional point.

use serde_json::{json, Value};
use std::sync::Arc;

use crate::worker::{RegistryError, TaskDescriptor, TaskRegistry};

/// Names of every built-in task, sorted.
pub fn builtin_names() -> Vec<&'static str> {
    vec![
        "add", "concat", "ctx_get", "double", "fail", "identity", "mul", "sleep_ms", "sum",
    ]
}

fn num(v: &Value, what: &str) -> Result<f64, String> {
    v.as_f64().ok_or_else(|| format!("{what} is not a number"))
}

fn arith(a: &Value, b: &Value, int_op: fn(i64, i64) -> i64, f_op: fn(f64, f64) -> f64) -> Result<Value, String> {
    if let (Some(x), Some(y)) = (a.as_i64(), b.as_i64()) {
        return Ok(json!(int_op(x, y)));
    }
    Ok(json!(f_op(num(a, "a")?, num(b, "b")?)))
}

fn descriptor_for(name: &str) -> Option<TaskDescriptor> {
    let d = match name {
        "identity" => TaskDescriptor::new(&["x"], true, |inv| {
            inv.inputs.get("x").cloned().ok_or_else(|| "missing input x".into())
        }),
        "double" => TaskDescriptor::new(&["x"], true, |inv| {
            let x = inv.inputs.get("x").ok_or("missing input x")?;
            if let Some(i) = x.as_i64() {
                Ok(json!(i * 2))
            } else {
                Ok(json!(num(x, "x")? * 2.0))
            }
        }),
        "add" => TaskDescriptor::new(&["a", "b"], true, |inv| {
            let a = inv.inputs.get("a").ok_or("missing input a")?;
            let b = inv.inputs.get("b").ok_or("missing input b")?;
            arith(a, b, |x, y| x + y, |x, y| x + y)
        }),
        "mul" => TaskDescriptor::new(&["a", "b"], true, |inv| {
            let a = inv.inputs.get("a").ok_or("missing input a")?;
            let b = inv.inputs.get("b").ok_or("missing input b")?;
            arith(a, b, |x, y| x * y, |x, y| x * y)
        }),
        "sum" => TaskDescriptor::new(&["xs"], true, |inv| {
            let xs = inv
                .inputs
                .get("xs")
                .and_then(Value::as_array)
                .ok_or("input xs is not an array")?;
            let mut acc = json!(0);
            for x in xs {
                acc = arith(&acc, x, |a, b| a + b, |a, b| a + b)?;
            }
            Ok(acc)
        }),
        "concat" => TaskDescriptor::new(&["a", "b"], true, |inv| {
            let a = inv.inputs.get("a").and_then(Value::as_str).ok_or("a is not a string")?;
            let b = inv.inputs.get("b").and_then(Value::as_str).ok_or("b is not a string")?;
            Ok(json!(format!("{a}{b}")))
        }),
        "ctx_get" => TaskDescriptor::new(&["key"], true, |inv| {
            let key = inv
                .inputs
                .get("key")
                .and_then(Value::as_str)
                .ok_or("key is not a string")?;
            inv.context_view
                .get(key)
                .cloned()
                .ok_or_else(|| format!("context has no key {key}"))
        }),
        "fail" => TaskDescriptor::new(&["reason"], true, |inv| {
            let reason = inv
                .inputs
                .get("reason")
                .and_then(Value::as_str)
                .unwrap_or("task failed");
            Err(reason.to_string())
        }),
        // not pure: duration depends on the host. Useful for capacity and
        // interruption tests.
        "sleep_ms" => TaskDescriptor::new(&["ms", "value"], false, |inv| {
            let ms = inv.inputs.get("ms").and_then(Value::as_u64).unwrap_or(0);
            std::thread::sleep(std::time::Duration::from_millis(ms));
            Ok(inv.inputs.get("value").cloned().unwrap_or(Value::Null))
        }),
        _ => return None,
    };
    Some(d)
}

/// Register the named built-ins into `registry`.
pub fn register_builtins(registry: &TaskRegistry, names: &[&str]) -> Result<(), RegistryError> {
    for name in names {
        let d = descriptor_for(name).ok_or_else(|| RegistryError::UnknownBuiltin(name.to_string()))?;
        registry.register(*name, d)?;
    }
    Ok(())
}

/// A fresh registry holding the named built-ins.
pub fn builtin_registry(names: &[&str]) -> Result<Arc<TaskRegistry>, RegistryError> {
    let registry = TaskRegistry::new();
    register_builtins(&registry, names)?;
    Ok(Arc::new(registry))
}

/// A registry with every built-in, for local runs and simulations.
pub fn full_builtin_registry() -> Arc<TaskRegistry> {
    builtin_registry(&builtin_names()).expect("built-ins register")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worker::{handle_execute, TaskOutcome, TaskRequest};
    use crate::Context;

    fn run(task: &str, inputs: &[(&str, Value)]) -> TaskOutcome {
        let registry = full_builtin_registry();
        let req = TaskRequest {
            request_id: "r".into(),
            node_id: "n".into(),
            task: task.into(),
            inputs: inputs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
            context: Context::new(),
            attempt: 1,
        };
        handle_execute(&req, &registry, 4).outcome
    }

    #[test]
    fn arithmetic_stays_integer() {
        assert_eq!(run("double", &[("x", json!(21))]), TaskOutcome::Completed(json!(42)));
        assert_eq!(
            run("add", &[("a", json!(2)), ("b", json!(3))]),
            TaskOutcome::Completed(json!(5))
        );
        assert_eq!(
            run("sum", &[("xs", json!([1, 2, 3, 4]))]),
            TaskOutcome::Completed(json!(10))
        );
    }

    #[test]
    fn arithmetic_widens_to_float_when_needed() {
        assert_eq!(
            run("add", &[("a", json!(1.5)), ("b", json!(2))]),
            TaskOutcome::Completed(json!(3.5))
        );
    }

    #[test]
    fn fail_always_fails() {
        assert_eq!(
            run("fail", &[("reason", json!("scripted"))]),
            TaskOutcome::Failed("scripted".into())
        );
    }

    #[test]
    fn unknown_builtin_is_an_error() {
        assert_eq!(
            builtin_registry(&["no_such_task"]).err(),
            Some(RegistryError::UnknownBuiltin("no_such_task".into()))
        );
    }

    #[test]
    fn builtins_are_deterministic_over_random_inputs() {
        // purity contract: same inputs, same outputs, across fresh registries
        let mut seed = 0x5eed_u64;
        let mut next = move || {
            seed ^= seed << 13;
            seed ^= seed >> 7;
            seed ^= seed << 17;
            (seed % 10_000) as i64 - 5_000
        };
        for _ in 0..100 {
            let (a, b) = (next(), next());
            let inputs = [("a", json!(a)), ("b", json!(b))];
            let first = run("add", &inputs);
            let second = run("add", &inputs);
            assert_eq!(first, second);
            assert_eq!(first, TaskOutcome::Completed(json!(a + b)));
        }
    }

    #[test]
    fn builtin_names_are_sorted_and_all_register() {
        let names = builtin_names();
        let mut sorted = names.clone();
        sorted.sort_unstable();
        assert_eq!(names, sorted);
        assert_eq!(full_builtin_registry().len(), names.len());
    }
}
