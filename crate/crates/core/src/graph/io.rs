//! Canonical JSON and edge-list + CSV graph files.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GnsnError, Result};
use crate::graph::{Graph, Split};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub enum GraphFormat {
    /// Canonical JSON document.
    Json,
    /// Whitespace-separated edge list plus a features CSV whose last column
    /// is the label.
    EdgeListCsv {
        features: std::path::PathBuf,
        options: EdgeListOptions,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EdgeListOptions {
    /// Drop `u u` lines instead of rejecting them.
    pub drop_self_loops: bool,
    /// Require both `u v` and `v u` for every edge instead of symmetrizing.
    pub require_symmetric: bool,
}

#[derive(Serialize, Deserialize)]
struct GraphFile {
    num_nodes: usize,
    num_classes: usize,
    features: Vec<Vec<f64>>,
    labels: Vec<i64>,
    edges: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    splits: BTreeMap<String, Split>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<serde_json::Value>,
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| GnsnError::io(path, e))
}

pub fn load_graph(path: &Path, format: &GraphFormat) -> Result<Graph> {
    match format {
        GraphFormat::Json => Graph::from_json_str(&read(path)?)
            .map_err(|e| relocate(e, path)),
        GraphFormat::EdgeListCsv { features, options } => {
            let edges = read(path)?;
            let csv = read(features)?;
            Graph::from_edge_list(&edges, &csv, *options).map_err(|e| match e {
                GnsnError::Parse { location, message } if location.starts_with("edges") => {
                    GnsnError::parse(format!("{}:{location}", path.display()), message)
                }
                GnsnError::Parse { location, message } => {
                    GnsnError::parse(format!("{}:{location}", features.display()), message)
                }
                other => other,
            })
        }
    }
}

fn relocate(e: GnsnError, path: &Path) -> GnsnError {
    match e {
        GnsnError::Parse { location, message } => {
            GnsnError::parse(format!("{}:{location}", path.display()), message)
        }
        other => other,
    }
}

impl Graph {
    /// Parses and validates the canonical JSON document.
    pub fn from_json_str(text: &str) -> Result<Graph> {
        let file: GraphFile = serde_json::from_str(text).map_err(|e| {
            GnsnError::parse(format!("line {} column {}", e.line(), e.column()), e.to_string())
        })?;
        if file.features.len() != file.num_nodes {
            return Err(GnsnError::parse(
                "features",
                format!("{} rows for num_nodes {}", file.features.len(), file.num_nodes),
            ));
        }
        if file.labels.len() != file.num_nodes {
            return Err(GnsnError::parse(
                "labels",
                format!("{} labels for num_nodes {}", file.labels.len(), file.num_nodes),
            ));
        }
        let mut labels = Vec::with_capacity(file.num_nodes);
        for (i, &y) in file.labels.iter().enumerate() {
            if y < 0 || y as usize >= file.num_classes {
                return Err(GnsnError::parse(
                    format!("labels[{i}]"),
                    format!("label {y} out of range for num_classes {}", file.num_classes),
                ));
            }
            labels.push(y as usize);
        }
        let d = file.features.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(file.num_nodes * d);
        for (i, row) in file.features.iter().enumerate() {
            if row.len() != d {
                return Err(GnsnError::parse(
                    format!("features[{i}]"),
                    format!("{} columns, expected {d}", row.len()),
                ));
            }
            if let Some(k) = row.iter().position(|v| !v.is_finite()) {
                return Err(GnsnError::parse(format!("features[{i}][{k}]"), "non-finite value"));
            }
            data.extend_from_slice(row);
        }
        let features = Matrix::from_vec(file.num_nodes, d, data)?;
        let mut seen = BTreeSet::new();
        let mut edges = Vec::with_capacity(file.edges.len());
        for (k, &[u, v]) in file.edges.iter().enumerate() {
            if u >= file.num_nodes || v >= file.num_nodes {
                return Err(GnsnError::parse(
                    format!("edges[{k}]"),
                    format!("[{u}, {v}] references a node >= {}", file.num_nodes),
                ));
            }
            if u == v {
                return Err(GnsnError::parse(format!("edges[{k}]"), format!("self-loop on {u}")));
            }
            if u > v {
                return Err(GnsnError::parse(
                    format!("edges[{k}]"),
                    format!("[{u}, {v}] is not in canonical u < v order"),
                ));
            }
            if !seen.insert((u, v)) {
                return Err(GnsnError::parse(format!("edges[{k}]"), format!("duplicate edge [{u}, {v}]")));
            }
            edges.push((u, v));
        }
        for (name, s) in &file.splits {
            s.validate(name, file.num_nodes)?;
        }
        Graph::new(file.num_classes, features, labels, &edges, file.splits)
    }

    /// Parses an edge list (one whitespace-separated pair per line, `#`
    /// comments allowed) and a headerless features CSV whose last column is
    /// the integer label. Directed listings are symmetrized.
    pub fn from_edge_list(edges: &str, features_csv: &str, options: EdgeListOptions) -> Result<Graph> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(features_csv.as_bytes());
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| GnsnError::parse(format!("line {}", i + 1), e.to_string()))?;
            if rec.len() < 2 {
                return Err(GnsnError::parse(
                    format!("line {}", i + 1),
                    "need at least one feature column and a label column",
                ));
            }
            let mut row = Vec::with_capacity(rec.len() - 1);
            for (k, field) in rec.iter().take(rec.len() - 1).enumerate() {
                let v: f64 = field.parse().map_err(|_| {
                    GnsnError::parse(format!("line {} field {}", i + 1, k + 1), format!("not a number: '{field}'"))
                })?;
                if !v.is_finite() {
                    return Err(GnsnError::parse(format!("line {} field {}", i + 1, k + 1), "non-finite value"));
                }
                row.push(v);
            }
            let raw = &rec[rec.len() - 1];
            let y: usize = raw.parse().map_err(|_| {
                GnsnError::parse(format!("line {} field {}", i + 1, rec.len()), format!("label out of range: '{raw}'"))
            })?;
            rows.push(row);
            labels.push(y);
        }
        let n = rows.len();
        let features = Matrix::from_rows(&rows)
            .map_err(|e| GnsnError::parse("features", e.to_string()))?;
        let num_classes = labels.iter().max().map_or(0, |m| m + 1);

        let mut directed = BTreeSet::new();
        for (ln, line) in edges.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let loc = || format!("edges line {}", ln + 1);
            let mut it = line.split_whitespace();
            let (Some(a), Some(b), None) = (it.next(), it.next(), it.next()) else {
                return Err(GnsnError::parse(loc(), format!("expected two node ids, got '{line}'")));
            };
            let parse = |s: &str| -> Result<usize> {
                s.parse()
                    .map_err(|_| GnsnError::parse(loc(), format!("bad node id '{s}'")))
            };
            let (u, v) = (parse(a)?, parse(b)?);
            if u >= n || v >= n {
                return Err(GnsnError::parse(loc(), format!("node id out of range for {n} nodes")));
            }
            if u == v {
                if options.drop_self_loops {
                    continue;
                }
                return Err(GnsnError::parse(loc(), format!("self-loop on {u}")));
            }
            directed.insert((u, v));
        }
        if options.require_symmetric {
            if let Some(&(u, v)) = directed.iter().find(|&&(u, v)| !directed.contains(&(v, u))) {
                return Err(GnsnError::parse(
                    "edges",
                    format!("asymmetric edge list: ({u}, {v}) has no reverse"),
                ));
            }
        }
        let undirected: BTreeSet<(usize, usize)> =
            directed.into_iter().map(|(u, v)| (u.min(v), u.max(v))).collect();
        let edges: Vec<(usize, usize)> = undirected.into_iter().collect();
        Graph::new(num_classes, features, labels, &edges, BTreeMap::new())
    }

    /// Canonical JSON document; `meta` is carried verbatim (e.g. generator
    /// seeds).
    pub fn to_json_string(&self, meta: Option<serde_json::Value>) -> Result<String> {
        let file = GraphFile {
            num_nodes: self.num_nodes,
            num_classes: self.num_classes,
            features: (0..self.num_nodes).map(|i| self.features.row(i).to_vec()).collect(),
            labels: self.labels.iter().map(|&y| y as i64).collect(),
            edges: self.edges().into_iter().map(|(u, v)| [u, v]).collect(),
            splits: self.splits.clone(),
            meta,
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn save_json(&self, path: &Path, meta: Option<serde_json::Value>) -> Result<()> {
        std::fs::write(path, self.to_json_string(meta)?).map_err(|e| GnsnError::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TRIANGLE: &str = r#"{"num_nodes":3,"num_classes":2,
        "features":[[1.0],[0.0],[2.5]],"labels":[0,1,1],
        "edges":[[0,1],[1,2],[0,2]]}"#;

    #[test]
    fn triangle_json() {
        let g = Graph::from_json_str(TRIANGLE).unwrap();
        assert_eq!(g.num_nodes(), 3);
        assert_eq!(g.num_edges(), 3);
        let back = Graph::from_json_str(&g.to_json_string(None).unwrap()).unwrap();
        assert_eq!(back.edges(), g.edges());
        assert_eq!(back.features(), g.features());
    }

    #[test]
    fn json_errors_carry_locations() {
        let e = Graph::from_json_str(&TRIANGLE.replace("[0,1,1]", "[0,1,2]")).unwrap_err();
        assert!(e.to_string().contains("labels[2]"), "{e}");
        let e = Graph::from_json_str(&TRIANGLE.replace("[[0,1],", "[[1,0],")).unwrap_err();
        assert!(e.to_string().contains("edges[0]"), "{e}");
        let e = Graph::from_json_str("{\"num_nodes\": 3,\n \"x\": }").unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
        let overlap = TRIANGLE.replace(
            "\"edges\"",
            "\"splits\":{\"0\":{\"train\":[0,2],\"valid\":[1],\"test\":[2]}},\"edges\"",
        );
        let e = Graph::from_json_str(&overlap).unwrap_err();
        assert!(e.to_string().contains("node 2"), "{e}");
    }

    #[test]
    fn edge_list_is_symmetrized() {
        let csv = "0.5,1.0,0\n1.0,0.0,1\n0.0,0.0,1\n";
        let g = Graph::from_edge_list("0 1\n1 0\n# c\n\n2 1\n", csv, EdgeListOptions::default()).unwrap();
        assert_eq!(g.edges(), vec![(0, 1), (1, 2)]);
        assert_eq!(g.num_classes(), 2);
        assert!(g.adjacency().pattern().is_symmetric());

        let strict = EdgeListOptions {
            require_symmetric: true,
            ..Default::default()
        };
        let e = Graph::from_edge_list("0 1\n1 0\n2 1\n", csv, strict).unwrap_err();
        assert!(e.to_string().contains("asymmetric"), "{e}");

        assert!(Graph::from_edge_list("1 1\n", csv, EdgeListOptions::default()).is_err());
        let lenient = EdgeListOptions {
            drop_self_loops: true,
            ..Default::default()
        };
        assert_eq!(Graph::from_edge_list("1 1\n", csv, lenient).unwrap().num_edges(), 0);
    }

    #[test]
    fn csv_errors_carry_locations() {
        let e = Graph::from_edge_list("", "1.0,0\nx,1\n", EdgeListOptions::default()).unwrap_err();
        assert!(e.to_string().contains("line 2 field 1"), "{e}");
        let e = Graph::from_edge_list("", "1.0,0\n1.0,-1\n", EdgeListOptions::default()).unwrap_err();
        assert!(e.to_string().contains("label"), "{e}");
    }
}
