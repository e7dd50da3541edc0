use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use gnsn_core::dynamics::Variant;
use gnsn_core::encoding::EncodingKind;
use gnsn_core::graph::{generate_csbm, load_graph, make_splits, CsbmParams, Graph, GraphFormat, Split, SplitFractions};
use gnsn_core::model::{ModelConfig, TrainConfig};
use gnsn_core::ode::SolverMethod;
use gnsn_core::{GnsnError, Result};

/// Splits to train on: the graph's stored splits when it has any, otherwise
/// `count` random ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitPlan {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
    pub count: usize,
    pub per_class: bool,
    pub seed: u64,
    /// Use at most this many stored splits.
    pub max_stored: Option<usize>,
}

impl Default for SplitPlan {
    fn default() -> Self {
        SplitPlan {
            train: 0.6,
            valid: 0.2,
            test: 0.2,
            count: 10,
            per_class: true,
            seed: 0,
            max_stored: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Canonical graph JSON; when absent a cSBM graph is generated.
    pub dataset: Option<PathBuf>,
    pub csbm: CsbmParams,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub splits: SplitPlan,
    /// Number of runs; run `k` uses split `k mod splits` and seed
    /// `train.seed + k`.
    pub seeds: usize,
    pub record_energy: bool,
    pub record_velocity: bool,
    pub output_dir: PathBuf,
    pub run_id: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: None,
            csbm: CsbmParams::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            splits: SplitPlan::default(),
            seeds: 1,
            record_energy: false,
            record_velocity: false,
            output_dir: PathBuf::from("runs"),
            run_id: "run".into(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GnsnError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| GnsnError::parse(path.display().to_string(), e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.seeds == 0 {
            return Err(GnsnError::Config("seeds must be >= 1".into()));
        }
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) {
            return Err(GnsnError::Config(format!("run_id '{}' is not a plain name", self.run_id)));
        }
        Ok(())
    }

    pub fn graph(&self) -> Result<Graph> {
        match &self.dataset {
            Some(path) => load_graph(path, &GraphFormat::Json),
            None => generate_csbm(&self.csbm),
        }
    }

    /// Named splits in a stable order: stored ones sorted numerically when
    /// their names are numbers, generated ones named `0..count`.
    pub fn resolve_splits(&self, g: &Graph) -> Result<Vec<(String, Split)>> {
        if !g.splits().is_empty() {
            let mut named: Vec<(String, Split)> = g.splits().iter().map(|(k, v)| (k.clone(), v.clone())).collect();
            named.sort_by(|a, b| match (a.0.parse::<u64>(), b.0.parse::<u64>()) {
                (Ok(x), Ok(y)) => x.cmp(&y),
                _ => a.0.cmp(&b.0),
            });
            if let Some(m) = self.splits.max_stored {
                named.truncate(m.max(1));
            }
            return Ok(named);
        }
        let p = &self.splits;
        if p.count == 0 {
            return Err(GnsnError::Config("graph has no stored splits and splits.count is 0".into()));
        }
        let fractions = SplitFractions::new(p.train, p.valid, p.test)?;
        (0..p.count)
            .map(|k| Ok((k.to_string(), make_splits(g, fractions, p.seed + k as u64, p.per_class)?)))
            .collect()
    }

    /// Directory for this run's outputs; `GNSN_OUTPUT_ROOT` replaces
    /// `output_dir`.
    pub fn output_path(&self) -> PathBuf {
        let root = std::env::var_os("GNSN_OUTPUT_ROOT")
            .map(PathBuf::from)
            .unwrap_or_else(|| self.output_dir.clone());
        root.join(&self.run_id)
    }
}

/// Command-line overrides applied on top of the config file.
#[derive(Args, Clone, Debug, Default)]
pub struct Overrides {
    /// Experiment config JSON; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Canonical graph JSON (defaults to a generated cSBM graph).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub run_id: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub input_dropout: Option<f64>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub attention_dim: Option<usize>,
    #[arg(long)]
    pub curvature: Option<f64>,
    #[arg(long)]
    pub self_loop_weight: Option<f64>,
    /// Hop order of the convection support.
    #[arg(long)]
    pub eps: Option<usize>,
    #[arg(long)]
    pub step_size: Option<f64>,
    /// Integration horizon T.
    #[arg(long)]
    pub time: Option<f64>,
    /// euler, rk4 or dopri5.
    #[arg(long)]
    pub solver: Option<String>,
    #[arg(long)]
    pub rtol: Option<f64>,
    #[arg(long)]
    pub atol: Option<f64>,
    /// adaptive, pure_diffusion, pure_convection, equal_weights or
    /// fixed_velocity=<v>.
    #[arg(long)]
    pub variant: Option<String>,
    /// poincare, lorentz, tangent or none.
    #[arg(long)]
    pub encoding: Option<String>,
    #[arg(long)]
    pub u_max: Option<f64>,
    #[arg(long)]
    pub u_init: Option<f64>,
    /// Velocity window temperature; 0 selects a hard window.
    #[arg(long)]
    pub kappa: Option<f64>,
    /// Number of runs.
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Base seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
}

impl Overrides {
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        self.apply(&mut cfg)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        fn set<T: Clone>(slot: &mut T, v: &Option<T>) {
            if let Some(v) = v {
                *slot = v.clone();
            }
        }
        if self.dataset.is_some() {
            cfg.dataset = self.dataset.clone();
        }
        set(&mut cfg.output_dir, &self.out);
        set(&mut cfg.run_id, &self.run_id);
        let m = &mut cfg.model;
        set(&mut m.dropout, &self.dropout);
        set(&mut m.input_dropout, &self.input_dropout);
        set(&mut m.hidden_dim, &self.hidden_dim);
        set(&mut m.dynamics.attention_dim, &self.attention_dim);
        set(&mut m.encoding.curvature, &self.curvature);
        set(&mut m.dynamics.self_loop_weight, &self.self_loop_weight);
        set(&mut m.dynamics.eps, &self.eps);
        set(&mut m.solver.step_size, &self.step_size);
        set(&mut m.solver.horizon, &self.time);
        set(&mut m.solver.rtol, &self.rtol);
        set(&mut m.solver.atol, &self.atol);
        set(&mut m.dynamics.velocity.u_max, &self.u_max);
        set(&mut m.dynamics.velocity.u_init, &self.u_init);
        if let Some(k) = self.kappa {
            m.dynamics.velocity.kappa = Some(k);
        }
        if let Some(s) = &self.solver {
            m.solver.method = s.parse::<SolverMethod>()?;
        }
        if let Some(v) = &self.variant {
            m.dynamics.variant = v.parse::<Variant>()?;
        }
        if let Some(e) = &self.encoding {
            m.encoding.kind = e.parse::<EncodingKind>()?;
        }
        let t = &mut cfg.train;
        set(&mut t.optimizer.learning_rate, &self.lr);
        set(&mut t.optimizer.weight_decay, &self.weight_decay);
        set(&mut t.seed, &self.seed);
        set(&mut t.epochs, &self.epochs);
        set(&mut t.patience, &self.patience);
        set(&mut cfg.seeds, &self.seeds);
        Ok(())
    }
}
