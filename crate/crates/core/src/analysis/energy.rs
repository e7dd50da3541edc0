use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{GnsnError, Result};
use crate::graph::Graph;
use crate::model::{Model, ModelConfig};
use crate::ode::Trajectory;
use crate::tensor::{dot, Matrix, SparseMatrix, SparsePattern};

fn check_rows(op: &'static str, h: &Matrix, a: &SparseMatrix) -> Result<()> {
    if a.n_rows() != h.rows() || a.pattern().n_cols() != h.rows() {
        return Err(GnsnError::shape(
            op,
            format!("{} rows against a {}x{} operator", h.rows(), a.n_rows(), a.pattern().n_cols()),
        ));
    }
    Ok(())
}

/// `(1/N) sum_i sum_{j != i} A_ij |h_i - h_j|^2`. Every stored direction is
/// counted, so an undirected edge contributes twice.
pub fn dirichlet_energy(h: &Matrix, a: &SparseMatrix) -> Result<f64> {
    check_rows("dirichlet_energy", h, a)?;
    let n = h.rows();
    if n == 0 {
        return Ok(0.0);
    }
    let p = a.pattern();
    let mut total = 0.0;
    for i in 0..n {
        let hi = h.row(i);
        for k in p.row_range(i) {
            let j = p.col_indices()[k];
            if j == i {
                continue;
            }
            let d: f64 = hi.iter().zip(h.row(j)).map(|(x, y)| (x - y) * (x - y)).sum();
            total += a.values()[k] * d;
        }
    }
    Ok(total / n as f64)
}

/// `(1/N) tr(H^T (I - A) H)`.
pub fn laplacian_energy(h: &Matrix, a: &SparseMatrix) -> Result<f64> {
    check_rows("laplacian_energy", h, a)?;
    let ah = a.matmul_dense(h)?;
    let mut total = 0.0;
    for i in 0..h.rows() {
        let hi = h.row(i);
        total += dot(hi, hi) - dot(hi, ah.row(i));
    }
    Ok(total / h.rows().max(1) as f64)
}

/// Off-diagonal entries of a symmetric row-stochastic `A`, halved. For these
/// weights [`dirichlet_energy`] equals [`laplacian_energy`], the energy whose
/// time derivative [`energy_derivative_decomposition`] returns.
pub fn decomposition_weights(att: &SparseMatrix) -> Result<SparseMatrix> {
    let p = att.pattern();
    let mut rows = Vec::with_capacity(p.n_rows());
    let mut values = Vec::new();
    for i in 0..p.n_rows() {
        let mut cols = Vec::new();
        for k in p.row_range(i) {
            let j = p.col_indices()[k];
            if j != i {
                cols.push(j);
                values.push(0.5 * att.values()[k]);
            }
        }
        rows.push(cols);
    }
    SparseMatrix::new(Arc::new(SparsePattern::from_rows(p.n_cols(), rows)?), values)
}

/// Terms of the energy derivative under the dynamics
/// `dH/dt = (1 - H*) u ⊙ (A H) - H* (I - A) H`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EnergyDerivative {
    pub r_conv: f64,
    pub r_diff: f64,
    /// `(2/N) (r_conv - r_diff)`.
    pub de_dt: f64,
}

/// `R_diff = H* |L H|_F^2`, `R_conv = (1 - H*) sum_i u_i (A H)_i . (L H)_i`
/// with `L = I - A`.
pub fn energy_derivative_decomposition(h: &Matrix, att: &SparseMatrix, u: &[f64], h_star: f64) -> Result<EnergyDerivative> {
    check_rows("energy_derivative_decomposition", h, att)?;
    if u.len() != h.rows() {
        return Err(GnsnError::shape(
            "energy_derivative_decomposition",
            format!("{} velocities for {} nodes", u.len(), h.rows()),
        ));
    }
    let ah = att.matmul_dense(h)?;
    let lh = h.zip_map(&ah, |x, y| x - y);
    let r_diff = h_star * lh.frobenius_sq();
    let r_conv = (1.0 - h_star) * (0..h.rows()).map(|i| u[i] * dot(ah.row(i), lh.row(i))).sum::<f64>();
    let n = h.rows().max(1) as f64;
    Ok(EnergyDerivative {
        r_conv,
        r_diff,
        de_dt: 2.0 / n * (r_conv - r_diff),
    })
}

/// Energy over the recorded times of a trajectory.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnergyTrace {
    pub times: Vec<f64>,
    pub energy: Vec<f64>,
    pub r_conv: Option<Vec<f64>>,
    pub r_diff: Option<Vec<f64>>,
}

impl EnergyTrace {
    /// `E(t_k) / E(t_0)`; undefined when the initial energy is zero.
    pub fn final_ratio(&self) -> Result<f64> {
        let (first, last) = (self.energy[0], *self.energy.last().unwrap_or(&0.0));
        if first == 0.0 {
            return Err(GnsnError::Undefined("initial energy is zero".into()));
        }
        Ok(last / first)
    }

    pub fn with_components(mut self, parts: &[EnergyDerivative]) -> Result<Self> {
        if parts.len() != self.times.len() {
            return Err(GnsnError::shape(
                "EnergyTrace::with_components",
                format!("{} components for {} times", parts.len(), self.times.len()),
            ));
        }
        self.r_conv = Some(parts.iter().map(|p| p.r_conv).collect());
        self.r_diff = Some(parts.iter().map(|p| p.r_diff).collect());
        Ok(self)
    }

    /// Columns `t,E,R_conv,R_diff`; the last two are empty when absent.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,E,R_conv,R_diff\n");
        for k in 0..self.times.len() {
            let opt = |v: &Option<Vec<f64>>| v.as_ref().map(|x| x[k].to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{}\n",
                self.times[k],
                self.energy[k],
                opt(&self.r_conv),
                opt(&self.r_diff)
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| GnsnError::io(path, e))
    }
}

pub fn energy_trace(traj: &Trajectory, a: &SparseMatrix) -> Result<EnergyTrace> {
    if traj.snapshots.is_empty() {
        return Err(GnsnError::Config("trajectory was recorded without snapshots".into()));
    }
    let energy = traj
        .snapshots
        .iter()
        .map(|h| dirichlet_energy(h, a))
        .collect::<Result<Vec<_>>>()?;
    Ok(EnergyTrace {
        times: traj.times.clone(),
        energy,
        r_conv: None,
        r_diff: None,
    })
}

/// Energy along the trajectory of a freshly initialised model (seeded
/// weights, evaluation mode), i.e. the features' evolution under the
/// dynamics with no training.
pub fn model_energy_trace(g: &Graph, cfg: &ModelConfig, seed: u64) -> Result<EnergyTrace> {
    let mut cfg = cfg.clone();
    cfg.solver.record_trace = true;
    let model = Model::new(cfg, g)?;
    let params = model.init_params(&mut ChaCha8Rng::seed_from_u64(seed));
    let f = model.forward(&params, g, None)?;
    energy_trace(&f.trajectory, g.adjacency())
}
