//! Entity graph construction and its normalized adjacency matrix.
//!
//! Nodes are entity mentions. Two mentions in the same sentence are linked
//! by an `inner` edge; mentions in different sentences are linked by an
//! `inter` edge when their normalized surfaces are literally similar.

use serde::Serialize;

use crate::entity::{literal_similarity, EntityMention};
use crate::tensor::Tensor;

pub const DEFAULT_EDGE_SIM_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    Inner,
    Inter,
}

/// Undirected edge between mention indices, stored with `a < b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub kind: EdgeKind,
}

#[derive(Debug, Clone)]
pub struct FactualGraph {
    pub mentions: Vec<EntityMention>,
    pub edges: Vec<Edge>,
}

impl FactualGraph {
    pub fn node_count(&self) -> usize {
        self.mentions.len()
    }

    /// Mention indices belonging to the given sentence, in order.
    pub fn sentence_nodes(&self, sentence: usize) -> Vec<usize> {
        self.mentions
            .iter()
            .enumerate()
            .filter(|(_, m)| m.sentence == sentence)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Builds the mention graph. Every unordered pair appears at most once:
/// same-sentence pairs become `inner` edges, cross-sentence pairs become
/// `inter` edges when similarity reaches `edge_sim_threshold`.
pub fn build_graph(mentions: Vec<EntityMention>, edge_sim_threshold: f64) -> FactualGraph {
    let mut edges = Vec::new();
    for a in 0..mentions.len() {
        for b in a + 1..mentions.len() {
            if mentions[a].sentence == mentions[b].sentence {
                edges.push(Edge {
                    a,
                    b,
                    kind: EdgeKind::Inner,
                });
            } else if literal_similarity(&mentions[a].normalized, &mentions[b].normalized)
                >= edge_sim_threshold
            {
                edges.push(Edge {
                    a,
                    b,
                    kind: EdgeKind::Inter,
                });
            }
        }
    }
    FactualGraph { mentions, edges }
}

/// Symmetrically normalized adjacency matrix.
///
/// With `self_loops`, computes `D^-1/2 (A + I) D^-1/2` where `D` counts the
/// loop; degrees are then always positive. Without loops it is
/// `D^-1/2 A D^-1/2` with isolated rows left at zero.
pub fn normalized_adjacency(graph: &FactualGraph, self_loops: bool) -> Tensor {
    let n = graph.node_count();
    let mut a = vec![0.0; n * n];
    for e in &graph.edges {
        a[e.a * n + e.b] = 1.0;
        a[e.b * n + e.a] = 1.0;
    }
    if self_loops {
        for i in 0..n {
            a[i * n + i] += 1.0;
        }
    }
    let mut inv_sqrt_deg = vec![0.0; n];
    for i in 0..n {
        let deg: f64 = a[i * n..(i + 1) * n].iter().sum();
        if deg > 0.0 {
            inv_sqrt_deg[i] = 1.0 / deg.sqrt();
        }
    }
    let mut out = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            out.set(i, j, inv_sqrt_deg[i] * a[i * n + j] * inv_sqrt_deg[j]);
        }
    }
    out
}

#[derive(Serialize)]
struct NodeOut<'a> {
    surface: &'a str,
    sentence: usize,
}

/// JSON view of a graph: `{"nodes": [{surface, sentence}...],
/// "edges": [[a, b, "inner"|"inter"]...]}`.
pub fn graph_to_json(graph: &FactualGraph) -> serde_json::Value {
    let nodes: Vec<NodeOut> = graph
        .mentions
        .iter()
        .map(|m| NodeOut {
            surface: &m.surface,
            sentence: m.sentence,
        })
        .collect();
    let edges: Vec<(usize, usize, EdgeKind)> =
        graph.edges.iter().map(|e| (e.a, e.b, e.kind)).collect();
    serde_json::json!({ "nodes": nodes, "edges": edges })
}
