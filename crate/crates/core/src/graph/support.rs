use std::collections::VecDeque;
use std::sync::Arc;

use crate::error::{GnsnError, Result};
use crate::graph::Graph;
use crate::tensor::{SparseMatrix, SparsePattern};

/// Node pairs reachable within `eps` hops, with a prior weight per pair:
/// `self_loop_weight` on the diagonal, the adjacency weight on direct edges
/// and 1 on longer-range pairs.
#[derive(Clone, Debug)]
pub struct SupportMask {
    eps: usize,
    weights: SparseMatrix,
}

impl SupportMask {
    pub fn eps(&self) -> usize {
        self.eps
    }

    pub fn pattern(&self) -> &Arc<SparsePattern> {
        self.weights.pattern()
    }

    pub fn weights(&self) -> &SparseMatrix {
        &self.weights
    }

    /// Log prior weights for the attention softmax, or `None` when every
    /// weight is 1.
    pub fn log_weights(&self) -> Option<Vec<f64>> {
        let w = self.weights.values();
        if w.iter().all(|&x| x == 1.0) {
            None
        } else {
            Some(w.iter().map(|x| x.ln()).collect())
        }
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.pattern().contains(i, j)
    }
}

/// Breadth-first `eps`-hop reachability over the adjacency. Self pairs are
/// present exactly when `self_loop_weight > 0`.
pub fn khop_support(g: &Graph, eps: usize, self_loop_weight: f64) -> Result<SupportMask> {
    if eps == 0 {
        return Err(GnsnError::Config("adjacency order eps must be >= 1".into()));
    }
    if !self_loop_weight.is_finite() || self_loop_weight < 0.0 {
        return Err(GnsnError::Config(format!(
            "self-loop weight must be finite and >= 0, got {self_loop_weight}"
        )));
    }
    let n = g.num_nodes();
    let mut rows = Vec::with_capacity(n);
    let mut dist = vec![usize::MAX; n];
    let mut queue = VecDeque::new();
    for src in 0..n {
        let mut reached = Vec::new();
        dist[src] = 0;
        queue.push_back(src);
        while let Some(u) = queue.pop_front() {
            if u != src {
                reached.push(u);
            }
            if dist[u] == eps {
                continue;
            }
            for &v in g.neighbors(u) {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        for &u in &reached {
            dist[u] = usize::MAX;
        }
        dist[src] = usize::MAX;
        if self_loop_weight > 0.0 {
            reached.push(src);
        }
        rows.push(reached);
    }
    let pattern = Arc::new(SparsePattern::from_rows(n, rows)?);
    let adj = g.adjacency();
    let mut values = Vec::with_capacity(pattern.nnz());
    for r in 0..n {
        for &c in pattern.row_cols(r) {
            values.push(if r == c {
                self_loop_weight
            } else {
                match adj.pattern().find(r, c) {
                    Some(k) => adj.values()[k],
                    None => 1.0,
                }
            });
        }
    }
    Ok(SupportMask {
        eps,
        weights: SparseMatrix::new(pattern, values)?,
    })
}

#[cfg(test)]
mod tests {
    use super::super::test_graphs::from_edges;
    use super::*;

    fn pairs(m: &SupportMask) -> Vec<(usize, usize)> {
        let p = m.pattern();
        (0..p.n_rows())
            .flat_map(|r| p.row_cols(r).iter().map(move |&c| (r, c)))
            .collect()
    }

    #[test]
    fn path_one_and_two_hops() {
        let g = from_edges(&[0, 0, 0], &[(0, 1), (1, 2)]);
        let one = khop_support(&g, 1, 1.0).unwrap();
        assert_eq!(pairs(&one), vec![(0, 0), (0, 1), (1, 0), (1, 1), (1, 2), (2, 1), (2, 2)]);
        let two = khop_support(&g, 2, 1.0).unwrap();
        assert!(two.contains(0, 2) && two.contains(2, 0));
        assert_eq!(two.pattern().nnz(), 9);
        assert!(one.pattern().is_subset_of(two.pattern()));
    }

    #[test]
    fn complete_graph_is_all_pairs() {
        let edges: Vec<_> = (0..5).flat_map(|u| ((u + 1)..5).map(move |v| (u, v))).collect();
        let g = from_edges(&[0; 5], &edges);
        for eps in 1..4 {
            assert_eq!(khop_support(&g, eps, 1.0).unwrap().pattern().nnz(), 25);
        }
    }

    #[test]
    fn eps_zero_rejected() {
        let g = from_edges(&[0, 0], &[(0, 1)]);
        assert!(khop_support(&g, 0, 1.0).is_err());
    }

    #[test]
    fn self_loop_weights() {
        let g = from_edges(&[0, 0], &[(0, 1)]);
        let m = khop_support(&g, 1, 2.0).unwrap();
        assert_eq!(m.weights().get(0, 0), 2.0);
        assert_eq!(m.weights().get(0, 1), 1.0);
        assert!(m.log_weights().is_some());
        let bare = khop_support(&g, 1, 0.0).unwrap();
        assert!(!bare.contains(0, 0));
        assert!(khop_support(&g, 1, 1.0).unwrap().log_weights().is_none());
    }
}
