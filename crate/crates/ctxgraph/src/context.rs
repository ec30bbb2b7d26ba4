//! Provenance-tagged execution contexts.
//!
//! A [`Context`] is the set of facts available to a node at execution time.
//! Every entry remembers its origin — the node whose data contributed it, or
//! [`ORIGIN_ID`] for facts supplied before any computation ran. Union is
//! plain set union, so combining contexts never destroys information;
//! [`Context::flatten`] derives a plain key→value view when a task needs
//! one.

use serde::de::{self, Deserializer, SeqAccess, Visitor};
use serde::ser::{SerializeSeq, Serializer};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::BTreeMap;
use std::fmt;
use thiserror::Error;

/// Origin marker for entries supplied before computation starts (the
/// graph-level origin context). Node ids may not collide with it.
pub const ORIGIN_ID: &str = "ORIGIN";

/// One provenance-tagged fact: `(origin, key) → value`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextEntry {
    /// Node id that contributed this entry, or [`ORIGIN_ID`].
    pub origin: String,
    pub key: String,
    pub value: Value,
}

/// Errors from context operations.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ContextError {
    /// The same (origin, key) carries two different values. Within one
    /// graph this cannot happen; it signals contexts from different graphs
    /// (or corrupted state) being mixed.
    #[error("conflicting values for ({origin}, {key}): {left} vs {right}")]
    Conflict {
        origin: String,
        key: String,
        left: Value,
        right: Value,
    },
    /// `flatten` was handed an entry whose origin has no known depth.
    #[error("no depth known for origin {origin}")]
    UnknownDepth { origin: String },
}

/// A set of [`ContextEntry`] values with unique (origin, key) pairs.
///
/// Serializes as an array of entries sorted by (origin, key) — the ordering
/// is part of the wire contract, so byte-level comparisons of serialized
/// contexts are meaningful.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Context {
    entries: BTreeMap<(String, String), Value>,
}

impl Context {
    /// The empty context. Also the identity element of [`Context::union`].
    pub fn new() -> Self {
        Self::default()
    }

    /// Build a context from raw origin-context data: every key of `data`
    /// becomes an entry with origin [`ORIGIN_ID`].
    pub fn from_origin_data(data: &BTreeMap<String, Value>) -> Self {
        let mut ctx = Self::new();
        for (k, v) in data {
            ctx.entries
                .insert((ORIGIN_ID.to_string(), k.clone()), v.clone());
        }
        ctx
    }

    /// Build a context from one node's own data: every key becomes an entry
    /// with that node as its origin.
    pub fn from_node_data(node_id: &str, data: &BTreeMap<String, Value>) -> Self {
        let mut ctx = Self::new();
        for (k, v) in data {
            ctx.entries
                .insert((node_id.to_string(), k.clone()), v.clone());
        }
        ctx
    }

    /// Insert a single entry. Returns an error if the (origin, key) pair is
    /// already present with a different value.
    pub fn insert(&mut self, origin: &str, key: &str, value: Value) -> Result<(), ContextError> {
        let slot = (origin.to_string(), key.to_string());
        if let Some(existing) = self.entries.get(&slot) {
            if *existing != value {
                return Err(ContextError::Conflict {
                    origin: origin.to_string(),
                    key: key.to_string(),
                    left: existing.clone(),
                    right: value,
                });
            }
            return Ok(());
        }
        self.entries.insert(slot, value);
        Ok(())
    }

    /// Set union of two contexts.
    ///
    /// Commutative, associative, and idempotent; the empty context is the
    /// identity. Fails only when both sides carry the same (origin, key)
    /// with different values, which signals mixed-graph contexts.
    pub fn union(&self, other: &Context) -> Result<Context, ContextError> {
        let mut out = self.clone();
        for ((origin, key), value) in &other.entries {
            out.insert(origin, key, value.clone())?;
        }
        Ok(out)
    }

    /// Collapse the context into a plain key→value map for task consumption.
    ///
    /// When several origins contribute the same key, the entry whose origin
    /// has the greatest topological depth wins; ties break toward the
    /// lexicographically greatest origin id. [`ORIGIN_ID`] has implicit
    /// depth −1, so node data always shadows origin-context data.
    pub fn flatten(
        &self,
        node_depths: &BTreeMap<String, i64>,
    ) -> Result<BTreeMap<String, Value>, ContextError> {
        let mut best: BTreeMap<&str, (i64, &str, &Value)> = BTreeMap::new();
        for ((origin, key), value) in &self.entries {
            let depth = if origin == ORIGIN_ID {
                -1
            } else {
                *node_depths
                    .get(origin)
                    .ok_or_else(|| ContextError::UnknownDepth {
                        origin: origin.clone(),
                    })?
            };
            match best.get(key.as_str()) {
                Some(&(d, o, _)) if (d, o) >= (depth, origin.as_str()) => {}
                _ => {
                    best.insert(key, (depth, origin, value));
                }
            }
        }
        Ok(best
            .into_iter()
            .map(|(k, (_, _, v))| (k.to_string(), v.clone()))
            .collect())
    }

    /// Iterate entries in (origin, key) order.
    pub fn iter(&self) -> impl Iterator<Item = ContextEntry> + '_ {
        self.entries.iter().map(|((origin, key), value)| ContextEntry {
            origin: origin.clone(),
            key: key.clone(),
            value: value.clone(),
        })
    }

    /// Look up one entry.
    pub fn get(&self, origin: &str, key: &str) -> Option<&Value> {
        self.entries.get(&(origin.to_string(), key.to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl FromIterator<ContextEntry> for Result<Context, ContextError> {
    fn from_iter<I: IntoIterator<Item = ContextEntry>>(iter: I) -> Self {
        let mut ctx = Context::new();
        for e in iter {
            ctx.insert(&e.origin, &e.key, e.value)?;
        }
        Ok(ctx)
    }
}

impl Serialize for Context {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        // BTreeMap iteration is already (origin, key)-sorted.
        let mut seq = serializer.serialize_seq(Some(self.entries.len()))?;
        for entry in self.iter() {
            seq.serialize_element(&entry)?;
        }
        seq.end()
    }
}

impl<'de> Deserialize<'de> for Context {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct CtxVisitor;
        impl<'de> Visitor<'de> for CtxVisitor {
            type Value = Context;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("an array of context entries")
            }

            fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> Result<Context, A::Error> {
                let mut ctx = Context::new();
                while let Some(entry) = seq.next_element::<ContextEntry>()? {
                    ctx.insert(&entry.origin, &entry.key, entry.value)
                        .map_err(de::Error::custom)?;
                }
                Ok(ctx)
            }
        }
        deserializer.deserialize_seq(CtxVisitor)
    }
}
