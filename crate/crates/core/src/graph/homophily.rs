use crate::error::{GnsnError, Result};
use crate::graph::Graph;

/// Fraction of same-label neighbors of each node; `None` for isolated nodes.
pub fn local_homophily(g: &Graph) -> Vec<Option<f64>> {
    let y = g.labels();
    (0..g.num_nodes())
        .map(|i| {
            let nb = g.neighbors(i);
            if nb.is_empty() {
                None
            } else {
                let same = nb.iter().filter(|&&j| y[j] == y[i]).count();
                Some(same as f64 / nb.len() as f64)
            }
        })
        .collect()
}

/// Average over non-isolated nodes of the same-label neighbor ratio.
pub fn node_homophily(g: &Graph) -> Result<f64> {
    let ratios: Vec<f64> = local_homophily(g).into_iter().flatten().collect();
    if ratios.is_empty() {
        return Err(GnsnError::Undefined("homophily undefined: graph has no edges".into()));
    }
    Ok(ratios.iter().sum::<f64>() / ratios.len() as f64)
}

/// Fraction of undirected edges joining same-label endpoints.
pub fn edge_homophily(g: &Graph) -> Result<f64> {
    let edges = g.edges();
    if edges.is_empty() {
        return Err(GnsnError::Undefined("edge homophily undefined: graph has no edges".into()));
    }
    let y = g.labels();
    let same = edges.iter().filter(|&&(u, v)| y[u] == y[v]).count();
    Ok(same as f64 / edges.len() as f64)
}

/// Edge homophily corrected by its expectation under a degree-preserving
/// null model.
pub fn adjusted_homophily(g: &Graph) -> Result<f64> {
    let h_edge = edge_homophily(g)?;
    let two_m = 2.0 * g.num_edges() as f64;
    let mut class_degree = vec![0.0; g.num_classes()];
    for (i, &y) in g.labels().iter().enumerate() {
        class_degree[y] += g.degree(i) as f64;
    }
    let expected: f64 = class_degree.iter().map(|d| (d / two_m).powi(2)).sum();
    let denom = 1.0 - expected;
    if denom.abs() < 1e-12 {
        return Err(GnsnError::Undefined(
            "adjusted homophily undefined: a single class holds all edge endpoints".into(),
        ));
    }
    Ok((h_edge - expected) / denom)
}
