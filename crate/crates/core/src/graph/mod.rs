//! Agent graph: nodes, typed edges, the tool registry, shared memory and
//! the turn runtime.

mod memory;
mod runtime;
pub mod tools;

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::AgentProfile;

pub use memory::{
    Awaiting, Event, FlagKind, MemoryError, MemoryState, Recommendation, Resolution, SessionStatus, SharedMemory,
    TranscriptEntry,
};
pub use runtime::{Runtime, RuntimeConfig, RuntimeError, TurnOutcome, DEFAULT_MAX_ITERATIONS};
pub use tools::{ecp_registry, ToolEnv, ToolError, ToolFn, ToolRegistry};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("graph needs at least one agent")]
    Empty,
    #[error("agent `{0}` is defined twice")]
    DuplicateNode(String),
    #[error("edge {from} -> {to} names unknown agent `{missing}`")]
    UnknownEndpoint { from: String, to: String, missing: String },
    #[error("agent `{0}` is not reachable from the entry agent")]
    UnreachableNode(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    /// Taken only when the acting agent asks for it.
    Optional,
    /// Default route, also the return path after a handoff.
    Mandatory,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Edge {
    pub from: String,
    pub to: String,
    pub kind: EdgeKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Graph {
    pub nodes: Vec<String>,
    pub edges: Vec<Edge>,
    pub entry: String,
}

/// Validates the wiring. The first profile is the entry agent.
pub fn build_graph(profiles: &[AgentProfile], edges: &[Edge]) -> Result<Graph, GraphError> {
    let entry = profiles.first().ok_or(GraphError::Empty)?.id.clone();
    let mut nodes = Vec::new();
    for p in profiles {
        if nodes.contains(&p.id) {
            return Err(GraphError::DuplicateNode(p.id.clone()));
        }
        nodes.push(p.id.clone());
    }
    for e in edges {
        for end in [&e.from, &e.to] {
            if !nodes.contains(end) {
                return Err(GraphError::UnknownEndpoint {
                    from: e.from.clone(),
                    to: e.to.clone(),
                    missing: end.clone(),
                });
            }
        }
    }

    let mut seen = BTreeSet::from([entry.as_str()]);
    let mut queue = VecDeque::from([entry.as_str()]);
    while let Some(n) = queue.pop_front() {
        for e in edges.iter().filter(|e| e.from == n) {
            if seen.insert(e.to.as_str()) {
                queue.push_back(e.to.as_str());
            }
        }
    }
    if let Some(lost) = nodes.iter().find(|n| !seen.contains(n.as_str())) {
        return Err(GraphError::UnreachableNode(lost.clone()));
    }

    Ok(Graph {
        nodes,
        edges: edges.to_vec(),
        entry,
    })
}

impl Graph {
    pub fn edge(&self, from: &str, to: &str) -> Option<&Edge> {
        self.edges.iter().find(|e| e.from == from && e.to == to)
    }

    pub fn mandatory_successors(&self, from: &str) -> Vec<&str> {
        self.edges
            .iter()
            .filter(|e| e.from == from && e.kind == EdgeKind::Mandatory)
            .map(|e| e.to.as_str())
            .collect()
    }
}
