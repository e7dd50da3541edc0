use crate::error::Result;
use crate::graph::Graph;
use crate::tensor::{Matrix, Tape, Var};

/// Value of the homophily estimate before any predictions exist.
pub const HOMOPHILY_INIT: f64 = 0.5;

/// Differentiable homophily estimate from soft predictions:
/// `sigmoid(mean_i mean_{j in N(i) ∩ train} cos(y_i, y_j))` over train nodes
/// `i`. Train nodes without train neighbours are skipped; with no train edges
/// at all the result is the constant [`HOMOPHILY_INIT`].
pub fn learnable_homophily(tape: &mut Tape, soft_preds: Var, g: &Graph, train: &[usize]) -> Result<Var> {
    let mut in_train = vec![false; g.num_nodes()];
    for &i in train {
        in_train[i] = true;
    }
    let (mut src, mut dst, mut weight) = (Vec::new(), Vec::new(), Vec::new());
    let mut contributing = 0usize;
    for &i in train {
        let nbrs: Vec<usize> = g.neighbors(i).iter().copied().filter(|&j| in_train[j]).collect();
        if nbrs.is_empty() {
            continue;
        }
        contributing += 1;
        let w = 1.0 / nbrs.len() as f64;
        for j in nbrs {
            src.push(i);
            dst.push(j);
            weight.push(w);
        }
    }
    if contributing == 0 {
        return Ok(tape.constant(Matrix::scalar(HOMOPHILY_INIT)));
    }
    weight.iter_mut().for_each(|w| *w /= contributing as f64);
    let a = tape.gather_rows(soft_preds, &src)?;
    let b = tape.gather_rows(soft_preds, &dst)?;
    let cos = tape.row_cosine(a, b)?;
    let w = tape.constant(Matrix::column(&weight));
    let weighted = tape.mul(cos, w)?;
    let mean = tape.sum(weighted)?;
    tape.sigmoid(mean)
}

/// Untracked evaluation of [`learnable_homophily`].
pub fn homophily_estimate(soft_preds: &Matrix, g: &Graph, train: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(soft_preds.clone());
    let h = learnable_homophily(&mut tape, p, g, train)?;
    Ok(tape.value(h).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::test_graphs::{from_edges, triangle};
    use crate::tensor::finite_diff_check;

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn identical_predictions() {
        let g = triangle();
        let p = Matrix::from_rows(&vec![vec![0.2, 0.8]; 3]).unwrap();
        let h = homophily_estimate(&p, &g, &[0, 1, 2]).unwrap();
        assert!((h - sigmoid(1.0)).abs() < 1e-12);
        assert!((h - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn orthogonal_neighbours() {
        let g = from_edges(&[0, 1, 0, 1], &[(0, 1), (1, 2), (2, 3), (0, 3)]);
        let p = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(homophily_estimate(&p, &g, &[0, 1, 2, 3]).unwrap(), 0.5);
    }

    #[test]
    fn no_train_edges_falls_back() {
        let g = from_edges(&[0, 1, 0], &[(0, 1), (1, 2)]);
        let p = Matrix::filled(3, 2, 0.5);
        assert_eq!(homophily_estimate(&p, &g, &[0, 2]).unwrap(), HOMOPHILY_INIT);
    }

    #[test]
    fn isolated_train_nodes_are_skipped() {
        // node 3 has no train neighbour; nodes 0-1 agree fully
        let g = from_edges(&[0, 0, 1, 1], &[(0, 1), (2, 3)]);
        let p = Matrix::from_rows(&[vec![0.9, 0.1], vec![0.9, 0.1], vec![0.5, 0.5], vec![0.1, 0.9]]).unwrap();
        let h = homophily_estimate(&p, &g, &[0, 1, 3]).unwrap();
        assert!((h - sigmoid(1.0)).abs() < 1e-12);
    }

    #[test]
    fn differentiable_in_predictions() {
        let g = from_edges(&[0, 1, 0, 1], &[(0, 1), (1, 2), (2, 3), (0, 2)]);
        let p = Matrix::from_rows(&[vec![0.7, 0.3], vec![0.4, 0.6], vec![0.55, 0.45], vec![0.2, 0.8]]).unwrap();
        let f = |t: &mut Tape, v: &[Var]| learnable_homophily(t, v[0], &g, &[0, 1, 2, 3]);
        let r = finite_diff_check(f, &[p], 1e-6, 1e-5).unwrap();
        assert!(r.passed, "{r:?}");
    }
}
