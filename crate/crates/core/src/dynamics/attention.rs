use std::sync::Arc;

use crate::error::{GnsnError, Result};
use crate::graph::SupportMask;
use crate::tensor::{Matrix, SparseMatrix, SparsePattern, Tape, Var};

/// Row-softmax attention over the support mask:
/// `s_ij = (W_K h_i) . (W_Q h_j) / sqrt(d_K) + ln w_ij`, where `w_ij` is the
/// support's prior weight. Returns one value per stored entry (`nnz x 1`).
pub fn attention_matrix(tape: &mut Tape, h: Var, wk: Var, wq: Var, support: &SupportMask) -> Result<Var> {
    let d_k = tape.value(wk).cols();
    if d_k == 0 || tape.value(wq).cols() != d_k {
        return Err(GnsnError::shape(
            "attention_matrix",
            format!(
                "projections {:?} and {:?}",
                tape.value(wk).shape(),
                tape.value(wq).shape()
            ),
        ));
    }
    let keys = tape.matmul(h, wk)?;
    let queries = tape.matmul(h, wq)?;
    let pattern = support.pattern();
    let mut scores = tape.edge_scores(keys, queries, pattern, 1.0 / (d_k as f64).sqrt())?;
    if let Some(lw) = support.log_weights() {
        if lw.iter().any(|v| v.is_infinite()) {
            return Err(GnsnError::Config("support prior weights must be positive".into()));
        }
        let prior = tape.constant(Matrix::column(&lw));
        scores = tape.add(scores, prior)?;
    }
    tape.masked_softmax(scores, pattern)
}

/// Untracked evaluation of [`attention_matrix`].
pub fn attention_values(h: &Matrix, wk: &Matrix, wq: &Matrix, support: &SupportMask) -> Result<SparseMatrix> {
    let mut tape = Tape::new();
    let (hv, k, q) = (tape.constant(h.clone()), tape.constant(wk.clone()), tape.constant(wq.clone()));
    let a = attention_matrix(&mut tape, hv, k, q, support)?;
    SparseMatrix::new(Arc::clone(support.pattern()), tape.value(a).as_slice().to_vec())
}

/// `sum_j A_ij (h_j - h_i)`, which equals `(A - I) H` for row-stochastic `A`.
pub fn diffusion_rhs(tape: &mut Tape, h: Var, att: Var, pattern: &Arc<SparsePattern>) -> Result<Var> {
    let agg = tape.spmm(att, pattern, h)?;
    tape.sub(agg, h)
}

/// `u_i * sum_j A_ij h_j`, with `u` an `n x 1` column of velocities.
pub fn convection_rhs(tape: &mut Tape, h: Var, att: Var, pattern: &Arc<SparsePattern>, u: Var) -> Result<Var> {
    if let Some(bad) = tape.value(u).as_slice().iter().find(|&&v| !(v >= 0.0)) {
        return Err(GnsnError::Numeric(format!("velocity invariant violated: u = {bad}")));
    }
    let agg = tape.spmm(att, pattern, h)?;
    tape.row_scale(u, agg)
}
