//! The interaction multigraph: users as nodes, one directed asker→answerer
//! edge per answer, with the symmetric pair weight `W` counting parallel
//! edges in either direction.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::{BufRead, Write};

use chrono::TimeDelta;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{InteractionRecord, UserId};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("duplicate edge key `{0}`")]
    DuplicateKey(String),
    #[error("self-edge on user {0}")]
    SelfEdge(UserId),
    #[error("edge `{key}` has negative latency")]
    NegativeLatency { key: String },
    #[error("pair weight is undefined for a user paired with itself ({0})")]
    SelfPair(UserId),
    #[error("member set is empty")]
    EmptyMembers,
    #[error("user {0} is not a node of the graph")]
    UnknownNode(UserId),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("edge list line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeAttributes {
    /// `"questionId/answerId"`.
    pub e_key: String,
    pub e_accepted: bool,
    /// Time from question to answer; never negative.
    pub e_time: TimeDelta,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphEdge {
    pub asker: UserId,
    pub answerer: UserId,
    pub attrs: EdgeAttributes,
}

/// Wire form of one edge in the JSONL edge list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeLine {
    pub asker: UserId,
    pub answerer: UserId,
    pub e_key: String,
    pub e_accepted: bool,
    pub e_time_seconds: f64,
}

impl From<&GraphEdge> for EdgeLine {
    fn from(e: &GraphEdge) -> Self {
        EdgeLine {
            asker: e.asker,
            answerer: e.answerer,
            e_key: e.attrs.e_key.clone(),
            e_accepted: e.attrs.e_accepted,
            e_time_seconds: e.attrs.e_time.num_milliseconds() as f64 / 1000.0,
        }
    }
}

impl From<EdgeLine> for GraphEdge {
    fn from(l: EdgeLine) -> Self {
        GraphEdge {
            asker: l.asker,
            answerer: l.answerer,
            attrs: EdgeAttributes {
                e_key: l.e_key,
                e_accepted: l.e_accepted,
                e_time: TimeDelta::milliseconds((l.e_time_seconds * 1000.0).round() as i64),
            },
        }
    }
}

fn ordered(a: u32, b: u32) -> (u32, u32) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Immutable after construction.
#[derive(Debug, Clone, Default)]
pub struct InteractionGraph {
    nodes: Vec<UserId>,
    index: HashMap<UserId, u32>,
    edges: Vec<GraphEdge>,
    endpoints: Vec<(u32, u32)>,
    incident: Vec<Vec<u32>>,
    weights: HashMap<(u32, u32), u64>,
}

impl InteractionGraph {
    /// One edge per interaction record, keyed `"question_id/answer_id"`.
    pub fn from_records(records: &[InteractionRecord]) -> Result<Self, GraphError> {
        let edges = records
            .iter()
            .map(|r| GraphEdge {
                asker: r.asker_id,
                answerer: r.answerer_id,
                attrs: EdgeAttributes {
                    e_key: format!("{}/{}", r.question_id, r.answer_id),
                    e_accepted: r.is_accepted,
                    e_time: r.answer_created_at - r.question_created_at,
                },
            })
            .collect();
        Self::from_edges(std::iter::empty(), edges)
    }

    /// Builds from explicit edges; `extra_nodes` adds users with no edges.
    pub fn from_edges<I>(extra_nodes: I, edges: Vec<GraphEdge>) -> Result<Self, GraphError>
    where
        I: IntoIterator<Item = UserId>,
    {
        let mut keys = HashSet::with_capacity(edges.len());
        let mut node_set: BTreeSet<UserId> = extra_nodes.into_iter().collect();
        for e in &edges {
            if e.asker == e.answerer {
                return Err(GraphError::SelfEdge(e.asker));
            }
            if e.attrs.e_time < TimeDelta::zero() {
                return Err(GraphError::NegativeLatency { key: e.attrs.e_key.clone() });
            }
            if !keys.insert(e.attrs.e_key.as_str()) {
                return Err(GraphError::DuplicateKey(e.attrs.e_key.clone()));
            }
            node_set.insert(e.asker);
            node_set.insert(e.answerer);
        }
        drop(keys);
        let nodes: Vec<UserId> = node_set.into_iter().collect();
        let index: HashMap<UserId, u32> = nodes.iter().enumerate().map(|(i, &u)| (u, i as u32)).collect();
        let mut incident = vec![Vec::new(); nodes.len()];
        let mut endpoints = Vec::with_capacity(edges.len());
        let mut weights: HashMap<(u32, u32), u64> = HashMap::new();
        for (k, e) in edges.iter().enumerate() {
            let a = index[&e.asker];
            let b = index[&e.answerer];
            endpoints.push((a, b));
            incident[a as usize].push(k as u32);
            incident[b as usize].push(k as u32);
            *weights.entry(ordered(a, b)).or_insert(0) += 1;
        }
        Ok(InteractionGraph { nodes, index, edges, endpoints, incident, weights })
    }

    /// Node ids, ascending.
    pub fn nodes(&self) -> &[UserId] {
        &self.nodes
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edges(&self) -> &[GraphEdge] {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn contains(&self, user: UserId) -> bool {
        self.index.contains_key(&user)
    }

    pub fn node_index(&self, user: UserId) -> Option<usize> {
        self.index.get(&user).map(|&i| i as usize)
    }

    /// Dense endpoint indices of edge `k`, in the order of `nodes()`.
    pub fn edge_endpoints(&self, k: usize) -> (usize, usize) {
        let (a, b) = self.endpoints[k];
        (a as usize, b as usize)
    }

    /// Edge indices touching the node at dense index `node`.
    pub fn incident_edges(&self, node: usize) -> &[u32] {
        &self.incident[node]
    }

    /// `W({i, j})`: number of parallel edges between two users, either direction.
    pub fn pair_weight(&self, i: UserId, j: UserId) -> Result<u64, GraphError> {
        if i == j {
            return Err(GraphError::SelfPair(i));
        }
        let (Some(&a), Some(&b)) = (self.index.get(&i), self.index.get(&j)) else {
            return Ok(0);
        };
        Ok(self.weights.get(&ordered(a, b)).copied().unwrap_or(0))
    }

    /// Unordered pairs with positive weight as dense indices `(low, high, W)`,
    /// sorted by index.
    pub fn weighted_pairs(&self) -> Vec<(usize, usize, u64)> {
        let mut pairs: Vec<_> =
            self.weights.iter().map(|(&(a, b), &w)| (a as usize, b as usize, w)).collect();
        pairs.sort_unstable();
        pairs
    }

    /// True iff no edge joins a member to a non-member.
    pub fn is_isolated(&self, members: &BTreeSet<UserId>) -> Result<bool, GraphError> {
        if members.is_empty() {
            return Err(GraphError::EmptyMembers);
        }
        let mut inside = HashSet::with_capacity(members.len());
        for &m in members {
            inside.insert(*self.index.get(&m).ok_or(GraphError::UnknownNode(m))?);
        }
        for &m in &inside {
            for &k in &self.incident[m as usize] {
                let (a, b) = self.endpoints[k as usize];
                if !inside.contains(&a) || !inside.contains(&b) {
                    return Ok(false);
                }
            }
        }
        Ok(true)
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<(), GraphError> {
        for e in &self.edges {
            serde_json::to_writer(&mut out, &EdgeLine::from(e)).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(source: R) -> Result<Self, GraphError> {
        let mut edges = Vec::new();
        for (idx, line) in source.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: EdgeLine = serde_json::from_str(&line)
                .map_err(|e| GraphError::Parse { line: idx + 1, message: e.to_string() })?;
            edges.push(GraphEdge::from(parsed));
        }
        Self::from_edges(std::iter::empty(), edges)
    }
}
