use rayon::prelude::*;
use serde::Serialize;

use crate::dynamics::Variant;
use crate::encoding::EncodingKind;
use crate::error::{GnsnError, Result};
use crate::graph::{Graph, Split};
use crate::model::{train, ModelConfig, TrainConfig};

/// One labelled configuration in a comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationArm {
    pub label: String,
    pub cfg: ModelConfig,
}

impl AblationArm {
    pub fn new(label: impl Into<String>, cfg: ModelConfig) -> Self {
        AblationArm {
            label: label.into(),
            cfg,
        }
    }

    /// `base` with the dynamics variant replaced.
    pub fn variant(base: &ModelConfig, v: Variant) -> Self {
        let mut cfg = base.clone();
        cfg.dynamics.variant = v;
        AblationArm::new(v.to_string(), cfg)
    }

    /// `base` with the encoding replaced, labelled `encoding=<kind>`.
    pub fn encoding(base: &ModelConfig, kind: EncodingKind) -> Self {
        let mut cfg = base.clone();
        cfg.encoding.kind = kind;
        AblationArm::new(format!("encoding={kind}"), cfg)
    }
}

/// One training run: a split and the seed for initialisation and dropout.
#[derive(Clone, Debug, PartialEq)]
pub struct RunPlan {
    pub split: Split,
    pub split_name: String,
    pub seed: u64,
}

impl RunPlan {
    /// `n` runs cycling through `splits`; run `k` uses split `k mod len` and
    /// seed `base_seed + k`.
    pub fn paired(splits: &[(String, Split)], n: usize, base_seed: u64) -> Vec<RunPlan> {
        if splits.is_empty() {
            return Vec::new();
        }
        (0..n)
            .map(|k| {
                let (name, split) = &splits[k % splits.len()];
                RunPlan {
                    split: split.clone(),
                    split_name: name.clone(),
                    seed: base_seed + k as u64,
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationCell {
    pub label: String,
    pub split: String,
    pub seed: u64,
    pub test_acc: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub n_runs: usize,
    pub n_failed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub cells: Vec<AblationCell>,
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,mean_acc,std_acc,n_runs\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.label, r.mean_acc, r.std_acc, r.n_runs));
        }
        out
    }
}

/// Mean and sample standard deviation (0 for a single value); `NaN`s for an
/// empty slice.
pub fn mean_std(x: &[f64]) -> (f64, f64) {
    if x.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    if x.len() == 1 {
        return (mean, 0.0);
    }
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Trains every arm on every planned run in parallel. Failed runs are
/// recorded in their cell and left out of the row statistics.
pub fn ablation_run(g: &Graph, arms: &[AblationArm], tc: &TrainConfig, plan: &[RunPlan]) -> Result<AblationTable> {
    if arms.is_empty() || plan.is_empty() {
        return Err(GnsnError::Config("ablation needs at least one arm and one run".into()));
    }
    tc.validate()?;
    let jobs: Vec<(usize, usize)> = (0..arms.len()).flat_map(|a| (0..plan.len()).map(move |r| (a, r))).collect();
    let cells: Vec<AblationCell> = jobs
        .par_iter()
        .map(|&(a, r)| {
            let run = &plan[r];
            let run_tc = TrainConfig {
                seed: run.seed,
                ..tc.clone()
            };
            let outcome = train(&arms[a].cfg, &run_tc, g, &run.split);
            AblationCell {
                label: arms[a].label.clone(),
                split: run.split_name.clone(),
                seed: run.seed,
                test_acc: outcome.as_ref().ok().map(|r| r.test_acc),
                error: outcome.err().map(|e| e.to_string()),
            }
        })
        .collect();

    let rows = arms
        .iter()
        .zip(cells.chunks(plan.len()))
        .map(|(arm, chunk)| {
            let accs: Vec<f64> = chunk.iter().filter_map(|c| c.test_acc).collect();
            let (mean_acc, std_acc) = mean_std(&accs);
            AblationRow {
                label: arm.label.clone(),
                mean_acc,
                std_acc,
                n_runs: accs.len(),
                n_failed: chunk.len() - accs.len(),
            }
        })
        .collect();
    Ok(AblationTable { rows, cells })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_csbm, make_splits, CsbmParams, SplitFractions};
    use crate::ode::SolverMethod;

    fn setup() -> (Graph, Vec<RunPlan>, ModelConfig) {
        let g = generate_csbm(&CsbmParams {
            num_nodes: 40,
            intra_p: 0.2,
            inter_p: 0.05,
            class_mean_separation: 3.0,
            seed: 1,
            ..Default::default()
        })
        .unwrap();
        let splits: Vec<(String, Split)> = (0..2)
            .map(|s| {
                let split = make_splits(&g, SplitFractions::new(0.5, 0.25, 0.25).unwrap(), s, true).unwrap();
                (s.to_string(), split)
            })
            .collect();
        let plan = RunPlan::paired(&splits, 2, 0);
        let mut cfg = ModelConfig {
            hidden_dim: 4,
            ..Default::default()
        };
        cfg.solver.method = SolverMethod::Euler;
        cfg.solver.step_size = 0.5;
        cfg.solver.horizon = 1.0;
        (g, plan, cfg)
    }

    fn tc() -> TrainConfig {
        TrainConfig {
            epochs: 5,
            ..Default::default()
        }
    }

    #[test]
    fn paired_plan_cycles_splits() {
        let s = |n: &str| (n.to_string(), Split::default());
        let plan = RunPlan::paired(&[s("a"), s("b")], 3, 10);
        let names: Vec<_> = plan.iter().map(|r| (r.split_name.as_str(), r.seed)).collect();
        assert_eq!(names, [("a", 10), ("b", 11), ("a", 12)]);
        assert!(RunPlan::paired(&[], 3, 0).is_empty());
    }

    #[test]
    fn mean_std_values() {
        assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
        assert!(mean_std(&[]).0.is_nan());
    }

    #[test]
    fn single_arm_gives_single_row() {
        let (g, plan, cfg) = setup();
        let t = ablation_run(&g, &[AblationArm::variant(&cfg, Variant::Adaptive)], &tc(), &plan).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.rows[0].n_runs, 2);
        assert_eq!(t.to_csv().lines().count(), 2);
    }

    #[test]
    fn duplicate_arms_give_identical_rows() {
        let (g, plan, cfg) = setup();
        let arm = AblationArm::variant(&cfg, Variant::PureConvection);
        let t = ablation_run(&g, &[arm.clone(), arm], &tc(), &plan).unwrap();
        assert_eq!(t.rows[0], t.rows[1]);
    }

    #[test]
    fn failures_are_recorded_per_cell() {
        let (g, mut plan, cfg) = setup();
        plan[1].split.valid.clear();
        let t = ablation_run(&g, &[AblationArm::encoding(&cfg, EncodingKind::None)], &tc(), &plan).unwrap();
        assert_eq!((t.rows[0].n_runs, t.rows[0].n_failed), (1, 1));
        assert!(t.cells[1].error.as_deref().unwrap().contains("valid"));
        assert_eq!(t.rows[0].label, "encoding=none");
    }

    #[test]
    fn empty_inputs_rejected() {
        let (g, plan, cfg) = setup();
        assert!(ablation_run(&g, &[], &tc(), &plan).is_err());
        assert!(ablation_run(&g, &[AblationArm::variant(&cfg, Variant::Adaptive)], &tc(), &[]).is_err());
    }
}
