//! Immutable undirected graphs with node features, labels and named splits.

mod csbm;
mod homophily;
mod io;
mod splits;
mod support;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{GnsnError, Result};
use crate::tensor::{Matrix, SparseMatrix, SparsePattern};

pub use csbm::{generate_csbm, CsbmParams};
pub use homophily::{adjusted_homophily, edge_homophily, local_homophily, node_homophily};
pub use io::{load_graph, EdgeListOptions, GraphFormat};
pub use splits::{make_splits, SplitFractions};
pub use support::{khop_support, SupportMask};

/// Disjoint train/valid/test node sets.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    fn validate(&self, name: &str, num_nodes: usize) -> Result<()> {
        let mut seen: BTreeMap<usize, &str> = BTreeMap::new();
        for (set, idx) in [("train", &self.train), ("valid", &self.valid), ("test", &self.test)] {
            for (k, &i) in idx.iter().enumerate() {
                if i >= num_nodes {
                    return Err(GnsnError::parse(
                        format!("splits.{name}.{set}[{k}]"),
                        format!("node index {i} >= num_nodes {num_nodes}"),
                    ));
                }
                if let Some(prev) = seen.insert(i, set) {
                    return Err(GnsnError::parse(
                        format!("splits.{name}.{set}[{k}]"),
                        format!("node {i} appears in both '{prev}' and '{set}'"),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Graph {
    num_nodes: usize,
    num_classes: usize,
    adjacency: SparseMatrix,
    features: Matrix,
    labels: Vec<usize>,
    splits: BTreeMap<String, Split>,
}

impl Graph {
    /// Builds and validates a graph from undirected `edges` given once each.
    /// Self-loops and repeated edges are rejected.
    pub fn new(
        num_classes: usize,
        features: Matrix,
        labels: Vec<usize>,
        edges: &[(usize, usize)],
        splits: BTreeMap<String, Split>,
    ) -> Result<Self> {
        let n = features.rows();
        if labels.len() != n {
            return Err(GnsnError::InvalidGraph(format!(
                "{} labels for {n} feature rows",
                labels.len()
            )));
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= num_classes) {
            return Err(GnsnError::InvalidGraph(format!(
                "label {y} of node {i} is out of range for {num_classes} classes"
            )));
        }
        if !features.is_finite() {
            return Err(GnsnError::InvalidGraph("feature matrix has non-finite entries".into()));
        }
        let mut seen = BTreeSet::new();
        let mut rows = vec![Vec::new(); n];
        for (k, &(u, v)) in edges.iter().enumerate() {
            if u >= n || v >= n {
                return Err(GnsnError::InvalidGraph(format!(
                    "edge {k} ({u}, {v}) references a node >= {n}"
                )));
            }
            if u == v {
                return Err(GnsnError::InvalidGraph(format!("edge {k} is a self-loop on node {u}")));
            }
            if !seen.insert((u.min(v), u.max(v))) {
                return Err(GnsnError::InvalidGraph(format!("edge {k} ({u}, {v}) is a duplicate")));
            }
            rows[u].push(v);
            rows[v].push(u);
        }
        let pattern = SparsePattern::from_rows(n, rows)?;
        let nnz = pattern.nnz();
        let adjacency = SparseMatrix::new(Arc::new(pattern), vec![1.0; nnz])?;
        for (name, s) in &splits {
            s.validate(name, n)?;
        }
        Ok(Graph {
            num_nodes: n,
            num_classes,
            adjacency,
            features,
            labels,
            splits,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    /// Number of undirected edges.
    pub fn num_edges(&self) -> usize {
        self.adjacency.pattern().nnz() / 2
    }

    pub fn adjacency(&self) -> &SparseMatrix {
        &self.adjacency
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        self.adjacency.pattern().row_cols(i)
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors(i).len()
    }

    /// Each undirected edge once, as `(u, v)` with `u < v`, in row order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        (0..self.num_nodes)
            .flat_map(|u| self.neighbors(u).iter().filter(move |&&v| v > u).map(move |&v| (u, v)))
            .collect()
    }

    pub fn splits(&self) -> &BTreeMap<String, Split> {
        &self.splits
    }

    pub fn split(&self, name: &str) -> Result<&Split> {
        self.splits
            .get(name)
            .ok_or_else(|| GnsnError::Config(format!("graph has no split named '{name}'")))
    }

    /// Copy of the graph with one more (validated) split.
    pub fn with_split(&self, name: impl Into<String>, split: Split) -> Result<Graph> {
        let name = name.into();
        split.validate(&name, self.num_nodes)?;
        let mut g = self.clone();
        g.splits.insert(name, split);
        Ok(g)
    }

    /// Copy with every split removed.
    pub fn without_splits(&self) -> Graph {
        let mut g = self.clone();
        g.splits.clear();
        g
    }
}

#[cfg(test)]
pub(crate) mod test_graphs {
    use super::*;

    pub fn from_edges(labels: &[usize], edges: &[(usize, usize)]) -> Graph {
        let n = labels.len();
        let c = labels.iter().max().map_or(1, |m| m + 1);
        Graph::new(c, Matrix::zeros(n, 1), labels.to_vec(), edges, BTreeMap::new()).unwrap()
    }

    pub fn triangle() -> Graph {
        from_edges(&[0, 0, 1], &[(0, 1), (1, 2), (0, 2)])
    }
}
