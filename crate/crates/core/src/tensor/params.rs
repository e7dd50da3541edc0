use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GnsnError, Result};
use crate::tensor::{Gradients, Matrix, Tape, Var};

/// Named trainable matrices. Iteration order is the lexicographic order of
/// names, which keeps optimizer updates and serialization deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    entries: BTreeMap<String, Matrix>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    shape: [usize; 2],
    values: Vec<f64>,
}

/// Tape handles for every parameter of a store, recorded as trainable leaves.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Handles recorded elsewhere, e.g. by a finite-difference probe.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        BoundParams {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| GnsnError::Config(format!("unknown parameter '{name}'")))
    }
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.entries
            .get(name)
            .ok_or_else(|| GnsnError::Config(format!("unknown parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Matrix)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(Matrix::len).sum()
    }

    /// Records every entry on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            vars: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), tape.param(v.clone())))
                .collect(),
        }
    }

    /// Records every entry as a constant (evaluation passes).
    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            vars: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
                .collect(),
        }
    }

    /// Gradients keyed by parameter name; zeros for unreachable entries.
    pub fn collect_grads(&self, bound: &BoundParams, grads: &Gradients) -> BTreeMap<String, Matrix> {
        bound
            .vars
            .iter()
            .map(|(k, &v)| (k.clone(), grads.wrt(v)))
            .collect()
    }

    pub fn to_json(&self) -> serde_json::Value {
        let map: BTreeMap<&String, Entry> = self
            .entries
            .iter()
            .map(|(k, m)| {
                (
                    k,
                    Entry {
                        shape: [m.rows(), m.cols()],
                        values: m.as_slice().to_vec(),
                    },
                )
            })
            .collect();
        serde_json::to_value(map).expect("parameter map serializes")
    }

    pub fn from_json(value: serde_json::Value) -> Result<Self> {
        let map: BTreeMap<String, Entry> = serde_json::from_value(value)?;
        let mut store = ParameterStore::new();
        for (k, e) in map {
            let m = Matrix::from_vec(e.shape[0], e.shape[1], e.values)
                .map_err(|err| GnsnError::parse(format!("parameter '{k}'"), err.to_string()))?;
            store.insert(k, m);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.to_json())?;
        std::fs::write(path, text).map_err(|e| GnsnError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GnsnError::io(path, e))?;
        Self::from_json(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_preserves_bits() {
        let mut s = ParameterStore::new();
        s.insert("w", Matrix::from_rows(&[vec![0.1, -1.0 / 3.0], vec![1e-300, 7.0]]).unwrap());
        s.insert("b", Matrix::zeros(1, 2));
        let back = ParameterStore::from_json(s.to_json()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn malformed_entry_is_rejected() {
        let v = serde_json::json!({"w": {"shape": [2, 2], "values": [1.0]}});
        assert!(ParameterStore::from_json(v).is_err());
    }
}
