//! Graph declaration, validation, and context propagation.
//!
//! A [`GraphSpec`] declares nodes, dependency edges, and codependent groups.
//! Validation condenses each group into one union node, checks that the
//! condensed relation is a DAG, layers it into topological waves, and
//! computes every node's context: the origin context unioned with the data
//! of all condensed-graph ancestors plus the node's own supernode members.
//!
//! Codependency is declared, never inferred: mutual edges would be a cycle,
//! so nodes that depend on each other are listed together in
//! `codependent_groups` and their union node carries the group's external
//! edges. Edges between two members of the same group are absorbed into the
//! supernode and do not count as cycles.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

use crate::context::{Context, ContextError, ORIGIN_ID};

/// How one task parameter is supplied: inline, or injected from an
/// ancestor's output at dispatch time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputRef {
    Literal(Value),
    OutputOf(String),
}

/// One declared node: a task name, the node's own data contribution, and
/// its parameter bindings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeDecl {
    pub id: String,
    pub task: String,
    #[serde(default)]
    pub data: BTreeMap<String, Value>,
    #[serde(default)]
    pub inputs: BTreeMap<String, InputRef>,
}

/// The user-declared graph, as read from a graph-spec file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GraphSpec {
    /// Facts available before any computation; every entry gets origin
    /// [`ORIGIN_ID`]. May be empty.
    #[serde(default)]
    pub origin_context: BTreeMap<String, Value>,
    pub nodes: Vec<NodeDecl>,
    #[serde(default)]
    pub edges: Vec<(String, String)>,
    #[serde(default)]
    pub codependent_groups: Vec<Vec<String>>,
}

/// One condensed node: a singleton, or a whole codependent group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuperNode {
    /// Singletons keep their node id; groups join member ids with `+`.
    pub id: String,
    /// Members in declaration order (the order they appear in the node
    /// list), which is also their execution order within one dispatch.
    pub members: Vec<String>,
}

/// The condensed execution relation: acyclic by construction once
/// validation succeeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondensedGraph {
    pub supernodes: Vec<SuperNode>,
    /// Deduplicated edges between supernode ids, sorted.
    pub superedges: Vec<(String, String)>,
    /// Topological layering: every supernode's parents sit in strictly
    /// earlier waves. Ids within a wave are sorted.
    pub topo_waves: Vec<Vec<String>>,
}

/// A validated graph: the original spec, its condensation, and the computed
/// per-node contexts. Serialization is byte-identical for identical specs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidatedGraph {
    pub spec: GraphSpec,
    pub condensed: CondensedGraph,
    pub contexts: BTreeMap<String, Context>,
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("duplicate node id {0}")]
    DuplicateNode(String),
    #[error("node id {0} is reserved")]
    ReservedNodeId(String),
    #[error("unknown node id {0}")]
    UnknownNode(String),
    #[error("self-edge on node {0}")]
    SelfEdge(String),
    #[error("node {node} appears in more than one codependent group")]
    OverlappingGroup { node: String },
    #[error("codependent group [{}] needs at least two distinct members", members.join(", "))]
    InvalidGroup { members: Vec<String> },
    #[error("cycle detected: {}", witness.join(" -> "))]
    Cycle { witness: Vec<String> },
    #[error("input {param} of node {node} references {referent}, which is not an ancestor")]
    DanglingInput {
        node: String,
        param: String,
        referent: String,
    },
    #[error(transparent)]
    Context(#[from] ContextError),
}

impl GraphSpec {
    /// Parse a graph-spec file (canonical JSON).
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// The origin context as a [`Context`].
    pub fn origin(&self) -> Context {
        Context::from_origin_data(&self.origin_context)
    }

    /// Per-node data contributions, keyed by node id.
    pub fn node_data(&self) -> BTreeMap<String, BTreeMap<String, Value>> {
        self.nodes
            .iter()
            .map(|n| (n.id.clone(), n.data.clone()))
            .collect()
    }

    pub fn node(&self, id: &str) -> Option<&NodeDecl> {
        self.nodes.iter().find(|n| n.id == id)
    }

    fn check_shape(&self) -> Result<(), GraphError> {
        let mut seen = BTreeSet::new();
        for n in &self.nodes {
            if n.id == ORIGIN_ID {
                return Err(GraphError::ReservedNodeId(n.id.clone()));
            }
            if !seen.insert(n.id.as_str()) {
                return Err(GraphError::DuplicateNode(n.id.clone()));
            }
        }
        for (from, to) in &self.edges {
            for end in [from, to] {
                if !seen.contains(end.as_str()) {
                    return Err(GraphError::UnknownNode(end.clone()));
                }
            }
            if from == to {
                return Err(GraphError::SelfEdge(from.clone()));
            }
        }
        let mut grouped = BTreeSet::new();
        for group in &self.codependent_groups {
            let distinct: BTreeSet<&str> = group.iter().map(String::as_str).collect();
            if distinct.len() < 2 || distinct.len() != group.len() {
                return Err(GraphError::InvalidGroup {
                    members: group.clone(),
                });
            }
            for member in group {
                if !seen.contains(member.as_str()) {
                    return Err(GraphError::UnknownNode(member.clone()));
                }
                if !grouped.insert(member.as_str()) {
                    return Err(GraphError::OverlappingGroup {
                        node: member.clone(),
                    });
                }
            }
        }
        Ok(())
    }
}

impl CondensedGraph {
    /// Supernode containing `node`, if any.
    pub fn supernode_of(&self, node: &str) -> Option<&SuperNode> {
        self.supernodes
            .iter()
            .find(|s| s.members.iter().any(|m| m == node))
    }

    /// Parent supernode ids, keyed by supernode id.
    pub fn parents(&self) -> BTreeMap<&str, BTreeSet<&str>> {
        let mut map: BTreeMap<&str, BTreeSet<&str>> = self
            .supernodes
            .iter()
            .map(|s| (s.id.as_str(), BTreeSet::new()))
            .collect();
        for (from, to) in &self.superedges {
            map.get_mut(to.as_str()).expect("edge endpoints exist").insert(from);
        }
        map
    }

    /// Topological depth of every original node: the wave index of its
    /// supernode. Feeds [`Context::flatten`].
    pub fn node_depths(&self) -> BTreeMap<String, i64> {
        let mut depths = BTreeMap::new();
        for (wave_idx, wave) in self.topo_waves.iter().enumerate() {
            for super_id in wave {
                if let Some(s) = self.supernodes.iter().find(|s| &s.id == super_id) {
                    for m in &s.members {
                        depths.insert(m.clone(), wave_idx as i64);
                    }
                }
            }
        }
        depths
    }

    /// All strict-ancestor supernode ids of `super_id`.
    pub fn ancestors_of(&self, super_id: &str) -> BTreeSet<String> {
        let parents = self.parents();
        let mut out = BTreeSet::new();
        let mut stack: Vec<&str> = parents
            .get(super_id)
            .map(|p| p.iter().copied().collect())
            .unwrap_or_default();
        while let Some(p) = stack.pop() {
            if out.insert(p.to_string()) {
                if let Some(gp) = parents.get(p) {
                    stack.extend(gp.iter().copied());
                }
            }
        }
        out
    }
}

/// Condense codependent groups into union nodes and layer the result.
///
/// Every group becomes one supernode; parents and children of any member
/// become parents and children of the supernode; intra-group edges are
/// absorbed; duplicate superedges are removed. Fails with a witness cycle
/// if the condensed relation is cyclic.
pub fn condense(spec: &GraphSpec) -> Result<CondensedGraph, GraphError> {
    spec.check_shape()?;

    // node id -> supernode id
    let mut assignment: BTreeMap<&str, String> = BTreeMap::new();
    let mut supernodes: Vec<SuperNode> = Vec::new();
    let declared: Vec<&str> = spec.nodes.iter().map(|n| n.id.as_str()).collect();
    let mut grouped: BTreeSet<&str> = BTreeSet::new();
    for group in &spec.codependent_groups {
        // member order follows the node list, not the group literal
        let members: Vec<String> = declared
            .iter()
            .filter(|id| group.iter().any(|g| g == **id))
            .map(|id| id.to_string())
            .collect();
        let id = members.join("+");
        for m in &members {
            grouped.insert(declared.iter().find(|d| *d == m).unwrap());
        }
        for m in &members {
            assignment.insert(
                declared.iter().find(|d| **d == m.as_str()).unwrap(),
                id.clone(),
            );
        }
        supernodes.push(SuperNode { id, members });
    }
    for n in &spec.nodes {
        if !grouped.contains(n.id.as_str()) {
            assignment.insert(n.id.as_str(), n.id.clone());
            supernodes.push(SuperNode {
                id: n.id.clone(),
                members: vec![n.id.clone()],
            });
        }
    }

    let mut superedges: BTreeSet<(String, String)> = BTreeSet::new();
    for (from, to) in &spec.edges {
        let sf = assignment[from.as_str()].clone();
        let st = assignment[to.as_str()].clone();
        if sf != st {
            superedges.insert((sf, st));
        }
    }

    let super_ids: Vec<&str> = supernodes.iter().map(|s| s.id.as_str()).collect();
    let mut children: BTreeMap<&str, BTreeSet<&str>> =
        super_ids.iter().map(|id| (*id, BTreeSet::new())).collect();
    for (from, to) in &superedges {
        children.get_mut(from.as_str()).unwrap().insert(to);
    }

    if let Some(witness) = find_cycle(&super_ids, &children) {
        return Err(GraphError::Cycle { witness });
    }

    let topo_waves = layer_waves(&super_ids, &superedges);

    Ok(CondensedGraph {
        supernodes,
        superedges: superedges.into_iter().collect(),
        topo_waves,
    })
}

/// Iterative three-color DFS; returns one witness cycle as a closed path of
/// supernode ids (`[a, b, a]`) when the relation is cyclic.
fn find_cycle(
    ids: &[&str],
    children: &BTreeMap<&str, BTreeSet<&str>>,
) -> Option<Vec<String>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Color {
        White,
        Gray,
        Black,
    }
    let mut color: BTreeMap<&str, Color> = ids.iter().map(|id| (*id, Color::White)).collect();
    for &root in ids {
        if color[root] != Color::White {
            continue;
        }
        // stack of (node, child iterator position) with an explicit path
        let mut path: Vec<&str> = vec![root];
        let mut iters: Vec<std::collections::btree_set::Iter<'_, &str>> =
            vec![children[root].iter()];
        color.insert(root, Color::Gray);
        while let Some(iter) = iters.last_mut() {
            match iter.next() {
                Some(&next) => match color[next] {
                    Color::Gray => {
                        let start = path.iter().position(|p| *p == next).unwrap();
                        let mut witness: Vec<String> =
                            path[start..].iter().map(|s| s.to_string()).collect();
                        witness.push(next.to_string());
                        return Some(witness);
                    }
                    Color::White => {
                        color.insert(next, Color::Gray);
                        path.push(next);
                        iters.push(children[next].iter());
                    }
                    Color::Black => {}
                },
                None => {
                    let done = path.pop().unwrap();
                    color.insert(done, Color::Black);
                    iters.pop();
                }
            }
        }
    }
    None
}

/// Kahn layering: wave k holds every supernode whose parents all sit in
/// waves < k. Requires an acyclic relation.
fn layer_waves(ids: &[&str], edges: &BTreeSet<(String, String)>) -> Vec<Vec<String>> {
    let mut indegree: BTreeMap<&str, usize> = ids.iter().map(|id| (*id, 0)).collect();
    let mut children: BTreeMap<&str, Vec<&str>> = ids.iter().map(|id| (*id, Vec::new())).collect();
    for (from, to) in edges {
        *indegree.get_mut(to.as_str()).unwrap() += 1;
        children.get_mut(from.as_str()).unwrap().push(to);
    }
    let mut waves = Vec::new();
    let mut current: Vec<&str> = indegree
        .iter()
        .filter(|(_, d)| **d == 0)
        .map(|(id, _)| *id)
        .collect();
    current.sort_unstable();
    while !current.is_empty() {
        waves.push(current.iter().map(|s| s.to_string()).collect());
        let mut next = Vec::new();
        for id in current {
            for child in &children[id] {
                let d = indegree.get_mut(*child).unwrap();
                *d -= 1;
                if *d == 0 {
                    next.push(*child);
                }
            }
        }
        next.sort_unstable();
        next.dedup();
        current = next;
    }
    waves
}

/// Propagate contexts through a condensed graph in wave order.
///
/// A parentless supernode inherits the origin context; every other
/// supernode inherits the union of its parents' contexts. The supernode's
/// context is the inherited context unioned with every member's own data,
/// and all members share it.
pub fn compute_contexts(
    condensed: &CondensedGraph,
    origin: &Context,
    data: &BTreeMap<String, BTreeMap<String, Value>>,
) -> Result<BTreeMap<String, Context>, ContextError> {
    let parents = condensed.parents();
    let empty = BTreeMap::new();
    let mut super_ctx: BTreeMap<String, Context> = BTreeMap::new();
    let mut out = BTreeMap::new();
    for wave in &condensed.topo_waves {
        for super_id in wave {
            let mut ctx = match parents.get(super_id.as_str()) {
                Some(ps) if !ps.is_empty() => {
                    let mut acc = Context::new();
                    for p in ps {
                        acc = acc.union(&super_ctx[*p])?;
                    }
                    acc
                }
                _ => origin.clone(),
            };
            let supernode = condensed
                .supernodes
                .iter()
                .find(|s| &s.id == super_id)
                .expect("wave ids come from supernodes");
            for member in &supernode.members {
                let psi = Context::from_node_data(member, data.get(member).unwrap_or(&empty));
                ctx = ctx.union(&psi)?;
            }
            for member in &supernode.members {
                out.insert(member.clone(), ctx.clone());
            }
            super_ctx.insert(super_id.clone(), ctx);
        }
    }
    Ok(out)
}

/// Validate a graph end to end: shape checks, condensation, acyclicity,
/// wave layering, context computation, and input-reference resolution.
pub fn validate_graph(spec: &GraphSpec) -> Result<ValidatedGraph, GraphError> {
    let condensed = condense(spec)?;
    let contexts = compute_contexts(&condensed, &spec.origin(), &spec.node_data())?;

    // every output_of must name a member of a strict condensed-graph ancestor
    for node in &spec.nodes {
        let own = condensed
            .supernode_of(&node.id)
            .expect("validated nodes are condensed")
            .id
            .clone();
        let ancestors = condensed.ancestors_of(&own);
        for (param, input) in &node.inputs {
            if let InputRef::OutputOf(referent) = input {
                let ok = condensed
                    .supernode_of(referent)
                    .map(|s| ancestors.contains(&s.id))
                    .unwrap_or(false);
                if !ok {
                    return Err(GraphError::DanglingInput {
                        node: node.id.clone(),
                        param: param.clone(),
                        referent: referent.clone(),
                    });
                }
            }
        }
    }

    Ok(ValidatedGraph {
        spec: spec.clone(),
        condensed,
        contexts,
    })
}

impl ValidatedGraph {
    /// Context of one node.
    pub fn context_of(&self, node: &str) -> Option<&Context> {
        self.contexts.get(node)
    }

    /// Topological depths for [`Context::flatten`].
    pub fn node_depths(&self) -> BTreeMap<String, i64> {
        self.condensed.node_depths()
    }
}
