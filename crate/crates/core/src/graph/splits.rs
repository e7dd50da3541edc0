use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GnsnError, Result};
use crate::graph::{Graph, Split};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl SplitFractions {
    pub fn new(train: f64, valid: f64, test: f64) -> Result<Self> {
        let f = SplitFractions { train, valid, test };
        f.validate()?;
        Ok(f)
    }

    fn validate(&self) -> Result<()> {
        let parts = [self.train, self.valid, self.test];
        if parts.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
            return Err(GnsnError::Config(format!("split fractions must be positive: {parts:?}")));
        }
        if parts.iter().sum::<f64>() > 1.0 + 1e-12 {
            return Err(GnsnError::Config(format!("split fractions sum above 1: {parts:?}")));
        }
        Ok(())
    }

    /// Cumulative cut points over `n` items; rounding the running sums keeps
    /// the three sets disjoint.
    fn cuts(&self, n: usize) -> [usize; 3] {
        let cut = |x: f64| ((x * n as f64).round() as usize).min(n);
        [
            cut(self.train),
            cut(self.train + self.valid),
            cut(self.train + self.valid + self.test),
        ]
    }
}

fn carve(nodes: &[usize], f: &SplitFractions, out: &mut Split) -> [usize; 3] {
    let [a, b, c] = f.cuts(nodes.len());
    out.train.extend_from_slice(&nodes[..a]);
    out.valid.extend_from_slice(&nodes[a..b]);
    out.test.extend_from_slice(&nodes[b..c]);
    [a, b - a, c - b]
}

/// Random disjoint split, optionally stratified by class. Each set is sorted.
pub fn make_splits(g: &Graph, fractions: SplitFractions, seed: u64, per_class: bool) -> Result<Split> {
    fractions.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = Split::default();
    if per_class {
        for k in 0..g.num_classes() {
            let mut members: Vec<usize> = (0..g.num_nodes()).filter(|&i| g.labels()[i] == k).collect();
            if members.is_empty() {
                continue;
            }
            members.shuffle(&mut rng);
            let sizes = carve(&members, &fractions, &mut split);
            if sizes.contains(&0) {
                return Err(GnsnError::Config(format!(
                    "class {k} has {} nodes, too few for a stratified split with fractions {:?}",
                    members.len(),
                    [fractions.train, fractions.valid, fractions.test]
                )));
            }
        }
    } else {
        let mut nodes: Vec<usize> = (0..g.num_nodes()).collect();
        nodes.shuffle(&mut rng);
        carve(&nodes, &fractions, &mut split);
    }
    split.train.sort_unstable();
    split.valid.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::super::test_graphs::from_edges;
    use super::*;

    #[test]
    fn sizes_six_two_two() {
        let g = from_edges(&[0; 10], &[]);
        let s = make_splits(&g, SplitFractions::new(0.6, 0.2, 0.2).unwrap(), 1, false).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (6, 2, 2));
        assert!(g.with_split("s", s).is_ok());
    }

    #[test]
    fn stratified_counts() {
        let g = from_edges(&[0, 0, 0, 0, 0, 1, 1, 1, 1, 1], &[]);
        let s = make_splits(&g, SplitFractions::new(0.6, 0.2, 0.2).unwrap(), 3, true).unwrap();
        for k in 0..2 {
            assert_eq!(s.train.iter().filter(|&&i| g.labels()[i] == k).count(), 3);
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let g = from_edges(&[0; 50], &[]);
        let f = SplitFractions::new(0.48, 0.32, 0.2).unwrap();
        assert_eq!(make_splits(&g, f, 9, false).unwrap(), make_splits(&g, f, 9, false).unwrap());
        assert_ne!(make_splits(&g, f, 9, false).unwrap(), make_splits(&g, f, 10, false).unwrap());
    }

    #[test]
    fn too_small_class_is_an_error() {
        let g = from_edges(&[0, 0, 0, 0, 0, 1], &[]);
        let f = SplitFractions::new(0.6, 0.2, 0.2).unwrap();
        assert!(make_splits(&g, f, 0, true).is_err());
        assert!(make_splits(&g, f, 0, false).is_ok());
    }

    #[test]
    fn invalid_fractions() {
        assert!(SplitFractions::new(0.6, 0.5, 0.2).is_err());
        assert!(SplitFractions::new(0.0, 0.5, 0.2).is_err());
    }
}
