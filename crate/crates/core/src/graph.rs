//! Undirected unit graph, treatment-restricted neighbourhoods and unit splits.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Undirected, unweighted graph over units `0..num_nodes`.
///
/// Self-edges are never stored; whether a unit attends to itself is decided
/// by the aggregators.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
}

impl Graph {
    /// Builds a graph from an edge list. Pairs are normalised to `(min, max)`;
    /// duplicates (in either orientation) and self-edges are rejected.
    pub fn new(num_nodes: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if num_nodes == 0 {
            return Err(Error::Validation("graph must have at least one node".into()));
        }
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for (a, b) in edges {
            if a >= num_nodes || b >= num_nodes {
                return Err(Error::Validation(format!(
                    "edge ({a}, {b}) references a node outside [0, {num_nodes})"
                )));
            }
            if a == b {
                return Err(Error::Validation(format!("self-edge on node {a}")));
            }
            let e = (a.min(b), a.max(b));
            if !seen.insert(e) {
                return Err(Error::Validation(format!("duplicate edge ({}, {})", e.0, e.1)));
            }
            out.push(e);
        }
        Ok(Self::from_unique(num_nodes, out))
    }

    /// Like [`Graph::new`] but silently drops duplicates and self-edges.
    pub fn from_edges_lossy(num_nodes: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut seen = BTreeSet::new();
        let out = edges
            .into_iter()
            .filter(|&(a, b)| a != b && a < num_nodes && b < num_nodes)
            .map(|(a, b)| (a.min(b), a.max(b)))
            .filter(|e| seen.insert(*e))
            .collect();
        Self::from_unique(num_nodes.max(1), out)
    }

    fn from_unique(num_nodes: usize, edges: Vec<(usize, usize)>) -> Self {
        let mut neighbors = vec![Vec::new(); num_nodes];
        for &(a, b) in &edges {
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }
        Self {
            num_nodes,
            edges,
            neighbors,
        }
    }

    /// Graph with no edges.
    pub fn empty(num_nodes: usize) -> Self {
        Self::from_unique(num_nodes.max(1), Vec::new())
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Edges in insertion order, each as `(min, max)`.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Sorted neighbours of `node`.
    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighbors[node]
    }

    pub fn neighbor_lists(&self) -> &[Vec<usize>] {
        &self.neighbors
    }

    pub fn degree(&self, node: usize) -> usize {
        self.neighbors[node].len()
    }

    pub fn edge_set(&self) -> BTreeSet<(usize, usize)> {
        self.edges.iter().copied().collect()
    }

    /// Relabels nodes: node `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let edges = self
            .edges
            .iter()
            .map(|&(a, b)| {
                let (x, y) = (perm[a], perm[b]);
                (x.min(y), x.max(y))
            })
            .collect();
        Self::from_unique(self.num_nodes, edges)
    }
}

/// Neighbourhoods of every node split by whether the neighbour shares the
/// node's treatment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreatmentSubgraphs {
    pub same_neighbors: Vec<Vec<usize>>,
    pub opp_neighbors: Vec<Vec<usize>>,
    pub has_opp: Vec<bool>,
}

pub fn treatment_subgraphs(graph: &Graph, treatments: &[u8]) -> Result<TreatmentSubgraphs> {
    let n = graph.num_nodes();
    if treatments.len() != n {
        return Err(Error::Validation(format!(
            "treatment vector has length {} but graph has {n} nodes",
            treatments.len()
        )));
    }
    if let Some(bad) = treatments.iter().find(|&&t| t > 1) {
        return Err(Error::Validation(format!("non-binary treatment value {bad}")));
    }
    let mut same_neighbors = Vec::with_capacity(n);
    let mut opp_neighbors = Vec::with_capacity(n);
    for i in 0..n {
        let (same, opp): (Vec<usize>, Vec<usize>) = graph
            .neighbors(i)
            .iter()
            .partition(|&&j| treatments[j] == treatments[i]);
        same_neighbors.push(same);
        opp_neighbors.push(opp);
    }
    let has_opp = opp_neighbors.iter().map(|l| !l.is_empty()).collect();
    Ok(TreatmentSubgraphs {
        same_neighbors,
        opp_neighbors,
        has_opp,
    })
}

/// Disjoint train/validation/test index lists, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndex {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitIndex {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Named partition of the units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Random train/val/test partition of `0..n`.
///
/// Train and validation sizes are `round(n * ratio)`; test receives the rest.
pub fn split_units(n: usize, ratios: (f64, f64, f64), seed: u64) -> Result<SplitIndex> {
    if n < 5 {
        return Err(Error::Argument(format!("need at least 5 units to split, got {n}")));
    }
    let (tr, va, te) = ratios;
    if !(tr > 0.0 && va > 0.0 && te > 0.0) {
        return Err(Error::Argument(format!("split ratios must be positive, got {ratios:?}")));
    }
    if ((tr + va + te) - 1.0).abs() > 1e-9 {
        return Err(Error::Argument(format!(
            "split ratios must sum to 1, got {}",
            tr + va + te
        )));
    }
    let n_train = (n as f64 * tr).round() as usize;
    let n_val = (n as f64 * va).round() as usize;
    if n_train + n_val >= n {
        return Err(Error::Argument(format!(
            "ratios {ratios:?} leave no test units for n = {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut train = order[..n_train].to_vec();
    let mut val = order[n_train..n_train + n_val].to_vec();
    let mut test = order[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(SplitIndex { train, val, test })
}
