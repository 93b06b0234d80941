//! Immutable dual incidence structure between visit hyperedges and code
//! nodes, plus the builders for the pretraining, finetuning, and inference
//! graphs.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::cohort::{Cohort, Group, Scenario, Split, Visit};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("no eligible visits to build a graph from")]
    EmptyGraph,
    #[error("finetuning requires both a basic-only and an extra group; {0} is empty")]
    EmptyGroup(&'static str),
    #[error("visit {visit_id} has no codes under the basic scenario")]
    EmptyAfterMask { visit_id: u64 },
    #[error("inference graphs are built for validation or test, got {0}")]
    NotAnEvalSplit(Split),
}

/// Dual incidence structure: `edge_nodes[e]` lists the node ids of edge
/// `e`, `node_edges[v]` the edge ids containing node `v`. Edges appended
/// for prediction only (inference graphs) come after `prediction_start`.
#[derive(Clone, Debug)]
pub struct Hypergraph {
    num_nodes: usize,
    edge_nodes: Vec<Vec<usize>>,
    node_edges: Vec<Vec<usize>>,
    edge_visit_ids: Vec<u64>,
    prediction_start: usize,
}

impl Hypergraph {
    /// Builds the dual structure from per-edge node lists, preserving the
    /// given node order within each edge. Builders pass sorted unique
    /// lists; a caller that re-orders them sees identical model output up
    /// to floating-point roundoff.
    pub fn from_edge_lists(
        num_nodes: usize,
        edge_nodes: Vec<Vec<usize>>,
        edge_visit_ids: Vec<u64>,
    ) -> Result<Self, GraphError> {
        assert_eq!(edge_nodes.len(), edge_visit_ids.len());
        if edge_nodes.is_empty() {
            return Err(GraphError::EmptyGraph);
        }
        let mut node_edges = vec![Vec::new(); num_nodes];
        for (e, nodes) in edge_nodes.iter().enumerate() {
            if nodes.is_empty() {
                return Err(GraphError::EmptyAfterMask {
                    visit_id: edge_visit_ids[e],
                });
            }
            let mut seen = BTreeSet::new();
            for &v in nodes {
                assert!(v < num_nodes, "node id {v} out of range");
                assert!(seen.insert(v), "duplicate node {v} in edge {e}");
                node_edges[v].push(e);
            }
        }
        let prediction_start = edge_nodes.len();
        Ok(Hypergraph {
            num_nodes,
            edge_nodes,
            node_edges,
            edge_visit_ids,
            prediction_start,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edge_nodes.len()
    }

    pub fn edge_nodes(&self, e: usize) -> &[usize] {
        &self.edge_nodes[e]
    }

    pub fn node_edges(&self, v: usize) -> &[usize] {
        &self.node_edges[v]
    }

    pub fn edge_visit_id(&self, e: usize) -> u64 {
        self.edge_visit_ids[e]
    }

    /// Nodes with no incident edge; they are carried through message
    /// passing unchanged.
    pub fn is_isolated(&self, v: usize) -> bool {
        self.node_edges[v].is_empty()
    }

    /// Edge indices appended for prediction only.
    pub fn prediction_edges(&self) -> std::ops::Range<usize> {
        self.prediction_start..self.num_edges()
    }

    pub fn base_edges(&self) -> std::ops::Range<usize> {
        0..self.prediction_start
    }

    /// Total incidence count; equals the sum over nodes of their edge
    /// degrees by dual consistency.
    pub fn num_incidences(&self) -> usize {
        self.edge_nodes.iter().map(Vec::len).sum()
    }
}

/// Pretraining graph: one hyperedge per training visit (pretrain and
/// finetune splits), nodes restricted to basic-tier codes.
pub fn build_basic_graph(cohort: &Cohort) -> Result<Hypergraph, GraphError> {
    let num_basic = cohort.num_basic();
    let mut edges = Vec::new();
    let mut visit_ids = Vec::new();
    for v in &cohort.visits {
        if matches!(v.split, Split::PretrainTrain | Split::FinetuneTrain) {
            let basic: Vec<usize> = v.codes.iter().copied().filter(|&c| c < num_basic).collect();
            if basic.is_empty() {
                return Err(GraphError::EmptyAfterMask {
                    visit_id: v.visit_id,
                });
            }
            edges.push(basic);
            visit_ids.push(v.visit_id);
        }
    }
    Hypergraph::from_edge_lists(num_basic, edges, visit_ids)
}

/// Finetuning graph over the full vocabulary: all extra-group finetune
/// visits (full code sets) plus the chosen basic-only subset (basic codes
/// by construction). Both groups must be non-empty.
pub fn build_finetune_graph(
    cohort: &Cohort,
    basic_subset: &[u64],
) -> Result<Hypergraph, GraphError> {
    let subset: BTreeSet<u64> = basic_subset.iter().copied().collect();
    let mut edges = Vec::new();
    let mut visit_ids = Vec::new();
    let mut extra_count = 0usize;
    let mut basic_count = 0usize;
    for v in cohort.visits_in(Split::FinetuneTrain) {
        match v.group {
            Group::Extra => {
                extra_count += 1;
                edges.push(v.codes.clone());
                visit_ids.push(v.visit_id);
            }
            Group::BasicOnly if subset.contains(&v.visit_id) => {
                basic_count += 1;
                edges.push(v.codes.clone());
                visit_ids.push(v.visit_id);
            }
            Group::BasicOnly => {}
        }
    }
    if extra_count == 0 {
        return Err(GraphError::EmptyGroup("extra"));
    }
    if basic_count == 0 {
        return Err(GraphError::EmptyGroup("basic"));
    }
    Hypergraph::from_edge_lists(cohort.num_codes(), edges, visit_ids)
}

/// Extends `base` with one prediction-only edge per visit of the given
/// evaluation split. The appended edges keep their full code sets in the
/// full scenario and are intersected with the basic tier in the basic
/// scenario; base edges are untouched. Appended edges join message passing
/// but never contribute to a loss.
pub fn build_inference_graph(
    base: &Hypergraph,
    cohort: &Cohort,
    split: Split,
    scenario: Scenario,
) -> Result<(Hypergraph, Vec<usize>), GraphError> {
    if !matches!(split, Split::Validation | Split::Test) {
        return Err(GraphError::NotAnEvalSplit(split));
    }
    let num_basic = cohort.num_basic();
    let mut edges = base.edge_nodes.clone();
    let mut visit_ids = base.edge_visit_ids.clone();
    let prediction_start = edges.len();
    let scenario_codes = |v: &Visit| -> Vec<usize> {
        match scenario {
            Scenario::Full => v.codes.clone(),
            Scenario::Basic => v.codes.iter().copied().filter(|&c| c < num_basic).collect(),
        }
    };
    for v in cohort.visits_in(split) {
        let codes = scenario_codes(v);
        if codes.is_empty() {
            return Err(GraphError::EmptyAfterMask {
                visit_id: v.visit_id,
            });
        }
        edges.push(codes);
        visit_ids.push(v.visit_id);
    }
    if edges.len() == prediction_start {
        return Err(GraphError::EmptyGraph);
    }
    let num_nodes = base.num_nodes;
    let mut graph = Hypergraph::from_edge_lists(num_nodes, edges, visit_ids)?;
    graph.prediction_start = prediction_start;
    let appended = graph.prediction_edges().collect();
    Ok((graph, appended))
}
