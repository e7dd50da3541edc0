use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{GnsnError, Result};
use crate::graph::Graph;
use crate::tensor::Matrix;

/// Contextual stochastic block model parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsbmParams {
    pub num_nodes: usize,
    pub num_classes: usize,
    pub intra_p: f64,
    pub inter_p: f64,
    pub feature_dim: usize,
    /// Distance between class means (two classes) or the diameter of the
    /// circle the class means sit on.
    pub class_mean_separation: f64,
    pub seed: u64,
}

impl Default for CsbmParams {
    fn default() -> Self {
        CsbmParams {
            num_nodes: 100,
            num_classes: 2,
            intra_p: 0.9,
            inter_p: 0.9,
            feature_dim: 2,
            class_mean_separation: 2.0,
            seed: 0,
        }
    }
}

impl CsbmParams {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("intra_p", self.intra_p), ("inter_p", self.inter_p)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(GnsnError::Config(format!("{name} = {p} is not a probability")));
            }
        }
        if self.num_nodes < 2 {
            return Err(GnsnError::Config("cSBM needs at least 2 nodes".into()));
        }
        if self.num_classes == 0 || self.num_classes > self.num_nodes {
            return Err(GnsnError::Config(format!(
                "num_classes {} must be in [1, num_nodes]",
                self.num_classes
            )));
        }
        if self.feature_dim == 0 {
            return Err(GnsnError::Config("feature_dim must be positive".into()));
        }
        if !self.class_mean_separation.is_finite() || self.class_mean_separation < 0.0 {
            return Err(GnsnError::Config("class_mean_separation must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Mean of class `k`: spread on a circle in the first two coordinates, or
    /// evenly along the line when features are one-dimensional.
    fn class_mean(&self, k: usize) -> Vec<f64> {
        let mut m = vec![0.0; self.feature_dim];
        let s = self.class_mean_separation;
        if self.feature_dim == 1 {
            m[0] = s * (k as f64 - (self.num_classes as f64 - 1.0) / 2.0);
        } else {
            let angle = std::f64::consts::TAU * k as f64 / self.num_classes as f64;
            m[0] = 0.5 * s * angle.cos();
            m[1] = 0.5 * s * angle.sin();
        }
        m
    }
}

/// Samples a graph: classes are contiguous, near-equal blocks; every unordered
/// pair is connected independently; features are unit-variance Gaussians
/// around the class means.
pub fn generate_csbm(p: &CsbmParams) -> Result<Graph> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let n = p.num_nodes;
    let labels: Vec<usize> = (0..n).map(|i| i * p.num_classes / n).collect();

    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            let prob = if labels[u] == labels[v] { p.intra_p } else { p.inter_p };
            if rng.random::<f64>() < prob {
                edges.push((u, v));
            }
        }
    }

    let means: Vec<Vec<f64>> = (0..p.num_classes).map(|k| p.class_mean(k)).collect();
    let mut features = Matrix::zeros(n, p.feature_dim);
    for i in 0..n {
        for (f, &mu) in features.row_mut(i).iter_mut().zip(&means[labels[i]]) {
            let z: f64 = rng.sample(StandardNormal);
            *f = mu + z;
        }
    }
    Graph::new(p.num_classes, features, labels, &edges, BTreeMap::new())
}
