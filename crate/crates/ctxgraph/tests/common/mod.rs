//! Shared test support: seeded graph generation and independent oracles.

use ctxgraph::context::Context;
use ctxgraph::graph::{GraphSpec, NodeDecl};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use std::collections::{BTreeMap, BTreeSet, VecDeque};

pub fn data_node(id: &str, data_value: i64) -> NodeDecl {
    NodeDecl {
        id: id.to_string(),
        task: "identity".to_string(),
        data: BTreeMap::from([("d".to_string(), json!(data_value))]),
        inputs: BTreeMap::new(),
    }
}

/// Random DAG over indexed nodes with edges only from lower to higher
/// index. Codependent groups use adjacent indices so the quotient stays
/// acyclic by construction.
pub fn random_dag(seed: u64, max_nodes: usize, with_groups: bool) -> GraphSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=max_nodes.max(2));
    let ids: Vec<String> = (0..n).map(|i| format!("n{i:02}")).collect();
    let nodes: Vec<NodeDecl> = ids
        .iter()
        .enumerate()
        .map(|(i, id)| data_node(id, i as i64))
        .collect();

    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.random_bool(0.18) {
                edges.push((ids[i].clone(), ids[j].clone()));
            }
        }
    }

    let mut codependent_groups = Vec::new();
    if with_groups {
        let mut i = 0;
        while i + 1 < n {
            if rng.random_bool(0.2) {
                let size = if i + 2 < n && rng.random_bool(0.3) { 3 } else { 2 };
                codependent_groups.push(ids[i..i + size].to_vec());
                i += size;
            } else {
                i += 1;
            }
        }
    }

    GraphSpec {
        origin_context: BTreeMap::from([("seed".to_string(), json!(seed))]),
        nodes,
        edges,
        codependent_groups,
    }
}

/// Independent quotient construction: map each node onto its group (or
/// itself), drop intra-group edges, deduplicate.
pub fn quotient_oracle(
    spec: &GraphSpec,
) -> (BTreeMap<String, String>, BTreeSet<(String, String)>) {
    let mut assignment: BTreeMap<String, String> = BTreeMap::new();
    for group in &spec.codependent_groups {
        let members: Vec<&str> = spec
            .nodes
            .iter()
            .map(|n| n.id.as_str())
            .filter(|id| group.iter().any(|g| g == id))
            .collect();
        let super_id = members.join("+");
        for m in members {
            assignment.insert(m.to_string(), super_id.clone());
        }
    }
    for n in &spec.nodes {
        assignment.entry(n.id.clone()).or_insert_with(|| n.id.clone());
    }
    let mut edges = BTreeSet::new();
    for (from, to) in &spec.edges {
        let (sf, st) = (assignment[from].clone(), assignment[to].clone());
        if sf != st {
            edges.insert((sf, st));
        }
    }
    (assignment, edges)
}

/// Breadth-first ancestor closure over the quotient relation.
pub fn ancestors_oracle(super_id: &str, edges: &BTreeSet<(String, String)>) -> BTreeSet<String> {
    let mut parents: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (from, to) in edges {
        parents.entry(to).or_default().push(from);
    }
    let mut seen = BTreeSet::new();
    let mut queue: VecDeque<&str> = parents
        .get(super_id)
        .map(|p| p.iter().copied().collect())
        .unwrap_or_default();
    while let Some(p) = queue.pop_front() {
        if seen.insert(p.to_string()) {
            if let Some(gp) = parents.get(p) {
                queue.extend(gp.iter().copied());
            }
        }
    }
    seen
}

/// Reference context: origin ∪ Ψ over every node housed in an ancestor
/// supernode or in the node's own supernode. Independent of the wave
/// algorithm.
pub fn context_oracle(spec: &GraphSpec, node_id: &str) -> Context {
    let (assignment, edges) = quotient_oracle(spec);
    let own = assignment[node_id].clone();
    let mut relevant: BTreeSet<String> = ancestors_oracle(&own, &edges);
    relevant.insert(own);

    let mut ctx = Context::from_origin_data(&spec.origin_context);
    for n in &spec.nodes {
        if relevant.contains(&assignment[&n.id]) {
            let psi = Context::from_node_data(&n.id, &n.data);
            ctx = ctx
                .union(&psi)
                .expect("single-graph contexts cannot conflict");
        }
    }
    ctx
}
