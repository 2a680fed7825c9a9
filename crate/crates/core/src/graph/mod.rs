//! Thresholded signed correlation graphs over neurons, standard and signed
//! modularity, and community detection.

mod control;
mod louvain;
mod spectral;

use std::fmt::Write as _;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use control::{group_clustering_test, ClusterMethod, GroupModularityResult, GroupTestConfig};
pub use louvain::{louvain, DEFAULT_RESTARTS};
pub use spectral::{kmeans, spectral_communities, DEFAULT_K_RANGE};

pub const DEFAULT_THRESHOLD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    /// Node indices (positions in `nodes`), `i < j`.
    pub i: usize,
    pub j: usize,
    pub weight: f64,
}

/// Undirected signed graph. Node `i` stands for neuron `nodes[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignedGraph {
    nodes: Vec<usize>,
    edges: Vec<Edge>,
    threshold: f64,
    k_pos: Vec<f64>,
    k_neg: Vec<f64>,
    m_pos: f64,
    m_neg: f64,
}

impl SignedGraph {
    /// Validates and stores an edge list: no self-loops or repeated pairs,
    /// every weight in `[-1, 1]` with magnitude above `threshold`.
    pub fn new(nodes: Vec<usize>, edges: Vec<Edge>, threshold: f64) -> Result<Self> {
        let n = nodes.len();
        let mut seen = std::collections::BTreeSet::new();
        let mut k_pos = vec![0.0; n];
        let mut k_neg = vec![0.0; n];
        let mut m_pos = 0.0;
        let mut m_neg = 0.0;
        let mut sorted = Vec::with_capacity(edges.len());
        for e in edges {
            let (i, j) = if e.i < e.j { (e.i, e.j) } else { (e.j, e.i) };
            if i == j {
                return Err(Error::invalid(format!("self-loop on node {i}")));
            }
            if j >= n {
                return Err(Error::invalid(format!("edge ({i}, {j}) references a missing node")));
            }
            if !e.weight.is_finite() || e.weight.abs() > 1.0 || e.weight.abs() <= threshold {
                return Err(Error::invalid(format!(
                    "edge ({i}, {j}) weight {} outside [-1, 1] or not above threshold {threshold}",
                    e.weight
                )));
            }
            if !seen.insert((i, j)) {
                return Err(Error::invalid(format!("edge ({i}, {j}) given twice")));
            }
            if e.weight > 0.0 {
                k_pos[i] += e.weight;
                k_pos[j] += e.weight;
                m_pos += e.weight;
            } else {
                k_neg[i] -= e.weight;
                k_neg[j] -= e.weight;
                m_neg -= e.weight;
            }
            sorted.push(Edge { i, j, weight: e.weight });
        }
        sorted.sort_by(|a, b| (a.i, a.j).cmp(&(b.i, b.j)));
        Ok(SignedGraph {
            nodes,
            edges: sorted,
            threshold,
            k_pos,
            k_neg,
            m_pos,
            m_neg,
        })
    }

    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    /// Positive weighted degree of each node.
    pub fn k_pos(&self) -> &[f64] {
        &self.k_pos
    }

    /// Magnitude of the negative weighted degree of each node.
    pub fn k_neg(&self) -> &[f64] {
        &self.k_neg
    }

    /// Degree on absolute weights.
    pub fn k_abs(&self, i: usize) -> f64 {
        self.k_pos[i] + self.k_neg[i]
    }

    pub fn m_pos(&self) -> f64 {
        self.m_pos
    }

    pub fn m_neg(&self) -> f64 {
        self.m_neg
    }

    pub fn m_abs(&self) -> f64 {
        self.m_pos + self.m_neg
    }

    pub fn is_isolated(&self, i: usize) -> bool {
        self.k_abs(i) == 0.0
    }

    /// Dense weight matrix, zero where there is no edge.
    pub fn weight_matrix(&self) -> DMatrix<f64> {
        let n = self.n_nodes();
        let mut w = DMatrix::zeros(n, n);
        for e in &self.edges {
            w[(e.i, e.j)] = e.weight;
            w[(e.j, e.i)] = e.weight;
        }
        w
    }

    /// `i,j,weight` rows using neuron ids.
    pub fn edges_csv(&self) -> String {
        let mut out = String::from("i,j,weight\n");
        for e in &self.edges {
            let _ = writeln!(out, "{},{},{}", self.nodes[e.i], self.nodes[e.j], e.weight);
        }
        out
    }
}

/// Pearson-correlation graph over the rows of `activations`
/// (`neurons x contexts`). `nodes[r]` names row `r`.
pub fn build_graph(activations: &DMatrix<f64>, nodes: &[usize], threshold: f64) -> Result<SignedGraph> {
    let (n, c) = activations.shape();
    if nodes.len() != n {
        return Err(Error::invalid(format!("{} node ids for {n} activation rows", nodes.len())));
    }
    if c < 2 {
        return Err(Error::invalid(format!("correlation needs at least 2 contexts, got {c}")));
    }
    if n < 2 {
        return Err(Error::invalid(format!("graph needs at least 2 neurons, got {n}")));
    }
    if activations.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite activation"));
    }
    if !(0.0..1.0).contains(&threshold) {
        return Err(Error::config(format!("edge threshold {threshold} outside [0, 1)")));
    }
    // Centered and unit-normalized rows; constant rows stay zero.
    let mut z = activations.clone();
    let mut constant = vec![false; n];
    for r in 0..n {
        let mut row = z.row_mut(r);
        let mean = row.sum() / c as f64;
        row.add_scalar_mut(-mean);
        let norm = row.norm();
        if norm <= 1e-12 * (mean.abs().max(1.0)) * (c as f64).sqrt() {
            row.fill(0.0);
            constant[r] = true;
        } else {
            row /= norm;
        }
    }
    let corr = &z * z.transpose();
    let mut edges = Vec::new();
    for i in 0..n {
        if constant[i] {
            continue;
        }
        for j in i + 1..n {
            if constant[j] {
                continue;
            }
            let w = corr[(i, j)].clamp(-1.0, 1.0);
            if w.abs() > threshold {
                edges.push(Edge { i, j, weight: w });
            }
        }
    }
    SignedGraph::new(nodes.to_vec(), edges, threshold)
}

/// Community assignment of every node, with both modularity scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub assignment: Vec<usize>,
    pub n_communities: usize,
    pub modularity: f64,
    pub signed_modularity: f64,
}

impl Partition {
    /// Relabels communities contiguously in order of first appearance and scores them.
    pub fn new(graph: &SignedGraph, assignment: &[usize]) -> Result<Partition> {
        if assignment.len() != graph.n_nodes() {
            return Err(Error::invalid(format!(
                "assignment covers {} nodes, graph has {}",
                assignment.len(),
                graph.n_nodes()
            )));
        }
        let assignment = relabel(assignment);
        let n_communities = assignment.iter().max().map_or(0, |m| m + 1);
        Ok(Partition {
            modularity: modularity(graph, &assignment)?,
            signed_modularity: signed_modularity(graph, &assignment)?,
            assignment,
            n_communities,
        })
    }

    /// `node,community` rows using neuron ids.
    pub fn to_csv(&self, graph: &SignedGraph) -> String {
        let mut out = String::from("node,community\n");
        for (i, c) in self.assignment.iter().enumerate() {
            let _ = writeln!(out, "{},{c}", graph.nodes()[i]);
        }
        out
    }
}

pub(crate) fn relabel(assignment: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    assignment
        .iter()
        .map(|c| {
            let next = map.len();
            *map.entry(*c).or_insert(next)
        })
        .collect()
}

fn check_assignment(graph: &SignedGraph, assignment: &[usize]) -> Result<usize> {
    if assignment.len() != graph.n_nodes() {
        return Err(Error::invalid(format!(
            "assignment covers {} nodes, graph has {}",
            assignment.len(),
            graph.n_nodes()
        )));
    }
    Ok(assignment.iter().max().map_or(0, |m| m + 1))
}

/// Modularity of one edge sign: `sum_c [W_c / m - (K_c / 2m)^2]`, with
/// `W_c` the within-community weight and `K_c` the summed degree.
fn term(graph: &SignedGraph, assignment: &[usize], n_comm: usize, positive: bool) -> f64 {
    let (k, m) = if positive {
        (graph.k_pos(), graph.m_pos())
    } else {
        (graph.k_neg(), graph.m_neg())
    };
    if m <= 0.0 {
        return 0.0;
    }
    let mut within = vec![0.0; n_comm];
    let mut total = vec![0.0; n_comm];
    for e in graph.edges() {
        if (e.weight > 0.0) == positive && assignment[e.i] == assignment[e.j] {
            within[assignment[e.i]] += e.weight.abs();
        }
    }
    for (i, c) in assignment.iter().enumerate() {
        total[*c] += k[i];
    }
    within
        .iter()
        .zip(&total)
        .map(|(w, t)| w / m - (t / (2.0 * m)).powi(2))
        .sum()
}

/// Standard modularity on absolute edge weights; 0 for an edgeless graph.
pub fn modularity(graph: &SignedGraph, assignment: &[usize]) -> Result<f64> {
    let n_comm = check_assignment(graph, assignment)?;
    let m = graph.m_abs();
    if m <= 0.0 {
        return Ok(0.0);
    }
    let mut within = vec![0.0; n_comm];
    let mut total = vec![0.0; n_comm];
    for e in graph.edges() {
        if assignment[e.i] == assignment[e.j] {
            within[assignment[e.i]] += e.weight.abs();
        }
    }
    for (i, c) in assignment.iter().enumerate() {
        total[*c] += graph.k_abs(i);
    }
    Ok(within
        .iter()
        .zip(&total)
        .map(|(w, t)| w / m - (t / (2.0 * m)).powi(2))
        .sum())
}

/// Positive-subgraph modularity minus negative-subgraph modularity, each
/// with its own degrees and total weight.
pub fn signed_modularity(graph: &SignedGraph, assignment: &[usize]) -> Result<f64> {
    let n_comm = check_assignment(graph, assignment)?;
    Ok(term(graph, assignment, n_comm, true) - term(graph, assignment, n_comm, false))
}
