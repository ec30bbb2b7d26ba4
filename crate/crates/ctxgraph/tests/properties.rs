//! Property tests: the context union algebra, queue ordering against a
//! sort-then-FIFO oracle, and allocation safety over randomized tables.

use ctxgraph::context::Context;
use ctxgraph::gateway::{
    allocate, eligible_servers, parse_policy_chain, AllocationLimits, QueueMode, QueuedTask,
    RoutingTable, ServerRecord, TaskQueue,
};
use ctxgraph::heartbeat::{HeartbeatReport, ServerStatus};
use ctxgraph::worker::TaskRequest;
use proptest::prelude::*;
use serde_json::{json, Value};
use std::collections::BTreeMap;

fn entry_strategy() -> impl Strategy<Value = (String, String, Value)> {
    (
        prop_oneof![Just("ORIGIN".to_string()), "[a-d]", "[e-h]"],
        "[k-m]",
        prop_oneof![
            any::<i64>().prop_map(|n| json!(n)),
            any::<bool>().prop_map(|b| json!(b)),
            "[a-z]{0,4}".prop_map(|s| json!(s)),
        ],
    )
        .prop_map(|(o, k, v)| (o, k, v))
}

/// Entry sets drawn so the same (origin, key) always carries the same
/// value, as within one graph.
fn context_strategy() -> impl Strategy<Value = Context> {
    proptest::collection::vec(entry_strategy(), 0..8).prop_map(|entries| {
        let mut ctx = Context::new();
        for (o, k, v) in entries {
            // first writer wins: duplicates with equal values are fine
            if ctx.get(&o, &k).is_none() {
                ctx.insert(&o, &k, v).unwrap();
            }
        }
        ctx
    })
}

/// Union over a shared value universe: (origin, key) determines the value
/// globally, so unions never conflict.
fn compatible_contexts() -> impl Strategy<Value = (Context, Context, Context)> {
    proptest::collection::vec(entry_strategy(), 1..12).prop_flat_map(|universe| {
        let dedup: Vec<(String, String, Value)> = {
            let mut seen = BTreeMap::new();
            for (o, k, v) in universe {
                seen.entry((o, k)).or_insert(v);
            }
            seen.into_iter().map(|((o, k), v)| (o, k, v)).collect()
        };
        let n = dedup.len();
        let pick = move |mask: Vec<bool>, pool: &[(String, String, Value)]| {
            let mut ctx = Context::new();
            for (i, (o, k, v)) in pool.iter().enumerate() {
                if mask[i % mask.len()] {
                    ctx.insert(o, k, v.clone()).unwrap();
                }
            }
            ctx
        };
        (
            proptest::collection::vec(any::<bool>(), n..=n),
            proptest::collection::vec(any::<bool>(), n..=n),
            proptest::collection::vec(any::<bool>(), n..=n),
        )
            .prop_map(move |(ma, mb, mc)| {
                (
                    pick(ma, &dedup),
                    pick(mb, &dedup),
                    pick(mc, &dedup),
                )
            })
    })
}

proptest! {
    #[test]
    fn union_is_commutative((a, b, _) in compatible_contexts()) {
        prop_assert_eq!(a.union(&b).unwrap(), b.union(&a).unwrap());
    }

    #[test]
    fn union_is_associative((a, b, c) in compatible_contexts()) {
        let left = a.union(&b).unwrap().union(&c).unwrap();
        let right = a.union(&b.union(&c).unwrap()).unwrap();
        prop_assert_eq!(left, right);
    }

    #[test]
    fn union_is_idempotent_with_empty_identity(ctx in context_strategy()) {
        prop_assert_eq!(ctx.union(&ctx).unwrap(), ctx.clone());
        prop_assert_eq!(ctx.union(&Context::new()).unwrap(), ctx.clone());
        prop_assert_eq!(Context::new().union(&ctx).unwrap(), ctx);
    }

    #[test]
    fn serialized_contexts_are_sorted(ctx in context_strategy()) {
        let v = serde_json::to_value(&ctx).unwrap();
        let arr = v.as_array().unwrap();
        let keys: Vec<(String, String)> = arr
            .iter()
            .map(|e| {
                (
                    e["origin"].as_str().unwrap().to_string(),
                    e["key"].as_str().unwrap().to_string(),
                )
            })
            .collect();
        let mut sorted = keys.clone();
        sorted.sort();
        prop_assert_eq!(keys, sorted);
    }
}

// ---------------------------------------------------------------------------
// Queue ordering
// ---------------------------------------------------------------------------

fn request(id: usize, task: &str) -> TaskRequest {
    TaskRequest {
        request_id: format!("r{id}"),
        node_id: "n".to_string(),
        task: task.to_string(),
        inputs: BTreeMap::new(),
        context: Context::new(),
        attempt: 1,
    }
}

fn drain(queue: &mut TaskQueue) -> Vec<String> {
    let mut order = Vec::new();
    while let Some(best) = queue.peek_best().cloned() {
        order.push(best.task.request_id.clone());
        queue.remove(&best.task.request_id);
    }
    order
}

/// Exhaustive check on every priority assignment of 5 tasks: dequeue order
/// must equal the stable sort-then-FIFO oracle.
#[test]
fn queue_order_matches_sort_then_fifo_oracle_exhaustively() {
    let priorities = [0i64, 1, 2];
    let n = 5;
    let mut assignment = vec![0usize; n];
    loop {
        let mut queue = TaskQueue::new(QueueMode::SingleLevel, None);
        let mut oracle: Vec<(i64, usize, String)> = Vec::new();
        for (i, &p_idx) in assignment.iter().enumerate() {
            let p = priorities[p_idx];
            queue.enqueue(request(i, "t"), p, 0).unwrap();
            oracle.push((p, i, format!("r{i}")));
        }
        // oracle: stable sort by priority descending, admission order
        // ascending
        oracle.sort_by_key(|(p, i, _)| (std::cmp::Reverse(*p), *i));
        let expected: Vec<String> = oracle.into_iter().map(|(_, _, id)| id).collect();
        assert_eq!(drain(&mut queue), expected, "assignment {assignment:?}");

        // next assignment in base-3
        let mut i = 0;
        loop {
            if i == n {
                return;
            }
            assignment[i] += 1;
            if assignment[i] < priorities.len() {
                break;
            }
            assignment[i] = 0;
            i += 1;
        }
    }
}

proptest! {
    #[test]
    fn silo_queues_keep_fifo_within_priority(
        tasks in proptest::collection::vec(("[ab]", 0i64..3), 1..20)
    ) {
        let mut queue = TaskQueue::new(QueueMode::Silo, None);
        for (i, (name, priority)) in tasks.iter().enumerate() {
            queue.enqueue(request(i, name), *priority, 0).unwrap();
        }
        for silo in ["a", "b"] {
            let items = queue.silo_items(silo);
            // within the silo: priorities non-increasing, FIFO inside each
            for w in items.windows(2) {
                prop_assert!(w[0].priority >= w[1].priority);
                if w[0].priority == w[1].priority {
                    prop_assert!(w[0].seq < w[1].seq);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Allocation safety
// ---------------------------------------------------------------------------

fn record_strategy(id: usize) -> impl Strategy<Value = ServerRecord> {
    let statuses = prop_oneof![
        Just(ServerStatus::Healthy),
        Just(ServerStatus::ApplicationError),
        Just(ServerStatus::SystemError),
        Just(ServerStatus::Degraded),
    ];
    (
        statuses,
        0.0f64..100.0,
        0.0f64..100.0,
        0i64..20_000,
        any::<bool>(),
    )
        .prop_map(move |(status, cpu, mem, age, has_report)| ServerRecord {
            server_id: format!("w{id:02}"),
            app_address: format!("w{id}:1"),
            hb_address: format!("w{id}:2"),
            last_report: has_report.then(|| HeartbeatReport {
                server_id: format!("w{id:02}"),
                cpu_percent: cpu,
                memory_percent: mem,
                disk_percent: 0.0,
                gpu_percent: None,
                timestamp_ms: 0,
            }),
            status,
            last_refresh_ms: 20_000 - age,
        })
}

fn table_strategy() -> impl Strategy<Value = RoutingTable> {
    proptest::collection::vec(any::<u8>(), 1..8).prop_flat_map(|ids| {
        let records: Vec<_> = ids
            .iter()
            .enumerate()
            .map(|(i, _)| record_strategy(i))
            .collect();
        records.prop_map(|records| RoutingTable {
            records: records
                .into_iter()
                .map(|r| (r.server_id.clone(), r))
                .collect(),
            refresh_interval_ms: 2000,
            staleness_bound_ms: 5000,
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn allocate_only_returns_healthy_fresh_servers(
        table in table_strategy(),
        chain_spec in prop_oneof![
            Just("LEAST_CPU"),
            Just("LEAST_MEMORY"),
            Just("ROUND_ROBIN"),
            Just("RANDOM"),
            Just("LEAST_CPU,ROUND_ROBIN"),
            Just("LEAST_MEMORY,RANDOM,ROUND_ROBIN"),
        ],
        seed in any::<u64>(),
    ) {
        let now = 20_000i64;
        let limits = AllocationLimits::default();
        let mut chain = parse_policy_chain(chain_spec, seed).unwrap();
        let queued = QueuedTask {
            task: request(0, "t"),
            enqueue_time_ms: now,
            silo_key: None,
            priority: 0,
            seq: 0,
        };
        let decision = allocate(&queued, &table, &mut chain, &limits, now);
        let eligible = eligible_servers(&table, &limits, now);
        prop_assert_eq!(decision.eligible_count, eligible.len());
        match &decision.chosen {
            Some(id) => {
                let r = &table.records[id];
                prop_assert_eq!(r.status, ServerStatus::Healthy);
                prop_assert!(r.age_ms(now) <= table.staleness_bound_ms);
                if let Some(rep) = &r.last_report {
                    prop_assert!(rep.cpu_percent < limits.cpu_ceiling);
                    prop_assert!(rep.memory_percent < limits.mem_ceiling);
                }
            }
            None => {
                // built-in chains choose whenever anything is eligible,
                // except least-* chains facing only report-less servers
                let comparable = eligible.iter().any(|r| r.last_report.is_some());
                let has_unconditional =
                    chain_spec.contains("ROUND_ROBIN") || chain_spec.contains("RANDOM");
                if has_unconditional || comparable {
                    prop_assert_eq!(decision.eligible_count, 0);
                }
            }
        }
    }
}
