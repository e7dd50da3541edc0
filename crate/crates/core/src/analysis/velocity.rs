use serde::Serialize;

use crate::error::{GnsnError, Result};
use crate::graph::{local_homophily, Graph};
use crate::tensor::Matrix;

/// Per-node velocities with summary statistics and each node's 1-hop
/// label-agreement ratio (`None` for isolated nodes).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VelocityReport {
    pub u: Vec<f64>,
    pub mean: f64,
    pub median: f64,
    pub max: f64,
    pub h_local: Vec<Option<f64>>,
    pub labels: Vec<usize>,
}

pub fn velocity_stats(u: &[f64], g: &Graph) -> Result<VelocityReport> {
    if u.len() != g.num_nodes() {
        return Err(GnsnError::shape(
            "velocity_stats",
            format!("{} velocities for {} nodes", u.len(), g.num_nodes()),
        ));
    }
    if u.is_empty() {
        return Err(GnsnError::Config("velocity report over an empty graph".into()));
    }
    if let Some(bad) = u.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(GnsnError::Numeric(format!("velocity {bad} is not a finite non-negative value")));
    }
    let mut sorted = u.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    Ok(VelocityReport {
        u: u.to_vec(),
        mean: u.iter().sum::<f64>() / n as f64,
        median,
        max: sorted[n - 1],
        h_local: local_homophily(g),
        labels: g.labels().to_vec(),
    })
}

impl VelocityReport {
    /// Spearman correlation between `u_i` and `h_local(i)` over non-isolated
    /// nodes.
    pub fn hc_correlation(&self) -> Result<f64> {
        let (u, h): (Vec<f64>, Vec<f64>) = self
            .u
            .iter()
            .zip(&self.h_local)
            .filter_map(|(&u, h)| h.map(|h| (u, h)))
            .unzip();
        spearman(&u, &h)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("node_id,u,h_local,label\n");
        for (i, u) in self.u.iter().enumerate() {
            let h = self.h_local[i].map(|h| h.to_string()).unwrap_or_default();
            out.push_str(&format!("{i},{u},{h},{}\n", self.labels[i]));
        }
        out
    }
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(GnsnError::shape("spearman", format!("{} vs {} values", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(GnsnError::Undefined("rank correlation needs at least two points".into()));
    }
    pearson(&average_ranks(x), &average_ranks(y))
        .ok_or_else(|| GnsnError::Undefined("rank correlation undefined for a constant series".into()))
}

/// Final node states as CSV (`node_id,label,h0,h1,...`) for external
/// embedding plots.
pub fn embedding_csv(h: &Matrix, labels: &[usize]) -> Result<String> {
    if h.rows() != labels.len() {
        return Err(GnsnError::shape("embedding_csv", format!("{} rows for {} labels", h.rows(), labels.len())));
    }
    let mut out = String::from("node_id,label");
    for c in 0..h.cols() {
        out.push_str(&format!(",h{c}"));
    }
    out.push('\n');
    for (i, &y) in labels.iter().enumerate() {
        out.push_str(&format!("{i},{y}"));
        for v in h.row(i) {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::test_graphs;

    #[test]
    fn summary_statistics() {
        let g = test_graphs::from_edges(&[0, 0, 1, 1], &[(0, 1), (1, 2)]);
        let r = velocity_stats(&[1.0, 4.0, 2.0, 3.0], &g).unwrap();
        assert_eq!((r.mean, r.median, r.max), (2.5, 2.5, 4.0));
        assert_eq!(r.h_local, vec![Some(1.0), Some(0.5), Some(0.0), None]);
        assert_eq!(r.to_csv().lines().nth(4).unwrap(), "3,3,,1");
        assert!(velocity_stats(&[1.0, -1.0, 0.0, 0.0], &g).is_err());
        assert!(velocity_stats(&[1.0], &g).is_err());
    }

    #[test]
    fn permutation_equivariant() {
        let g = test_graphs::from_edges(&[0, 1, 1], &[(0, 1), (1, 2)]);
        let p = test_graphs::from_edges(&[1, 1, 0], &[(2, 1), (1, 0)]);
        let a = velocity_stats(&[0.5, 1.5, 3.0], &g).unwrap();
        let b = velocity_stats(&[3.0, 1.5, 0.5], &p).unwrap();
        assert_eq!((a.mean, a.median, a.max), (b.mean, b.median, b.max));
        assert_eq!(a.h_local[0], b.h_local[2]);
    }

    #[test]
    fn ranks_with_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
    }

    #[test]
    fn spearman_examples() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert!((spearman(&x, &[1.0, 4.0, 9.0, 16.0, 25.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&x, &[5.0, 3.0, 2.0, 1.0, 0.0]).unwrap() + 1.0).abs() < 1e-12);
        // classic tied example: 1 - 6 sum d^2 / (n (n^2 - 1)) does not apply with ties;
        // Pearson on ranks [1,2,3,4] vs [1.5,1.5,3,4] = 0.9486833
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[7.0, 7.0, 8.0, 9.0]).unwrap();
        assert!((r - 0.9486832980505138).abs() < 1e-12);
        assert!(spearman(&x, &[1.0; 5]).is_err());
        assert!(spearman(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn embedding_rows() {
        let h = Matrix::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.0]]).unwrap();
        assert_eq!(embedding_csv(&h, &[1, 0]).unwrap(), "node_id,label,h0,h1\n0,1,0.5,-1\n1,0,2,0\n");
    }
}
