use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use gnsn_core::analysis::{
    ablation_run, embedding_csv, energy_trace, mean_std, model_energy_trace, velocity_stats, AblationArm,
    AblationTable, RunPlan,
};
use gnsn_core::dynamics::Variant;
use gnsn_core::encoding::EncodingKind;
use gnsn_core::graph::{generate_csbm, load_graph, make_splits, CsbmParams, EdgeListOptions, Graph, GraphFormat, SplitFractions};
use gnsn_core::model::{train, Model, ModelConfig, RunResult, TrainConfig};
use gnsn_core::ode::SolverMethod;
use gnsn_core::tensor::ParameterStore;
use gnsn_core::{GnsnError, Result};

use crate::config::{ExperimentConfig, Overrides};

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, text).map_err(|e| GnsnError::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write(path, text)
}

fn output_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.output_path();
    std::fs::create_dir_all(&dir).map_err(|e| GnsnError::io(&dir, e))?;
    Ok(dir)
}

fn dataset_summary(cfg: &ExperimentConfig, g: &Graph) -> Value {
    let source = match &cfg.dataset {
        Some(p) => json!(p.display().to_string()),
        None => json!("csbm"),
    };
    json!({
        "source": source,
        "num_nodes": g.num_nodes(),
        "num_edges": g.num_edges(),
        "num_classes": g.num_classes(),
        "num_features": g.num_features(),
    })
}

fn split_list(items: &str) -> Vec<&str> {
    items.split(',').map(str::trim).filter(|s| !s.is_empty()).collect()
}

/// Velocity report, state export and energy trace of one evaluation pass.
fn run_extras(cfg: &ExperimentConfig, g: &Graph, params: &ParameterStore, dir: &Path, tag: &str) -> Result<()> {
    let mut model_cfg = cfg.model.clone();
    model_cfg.solver.record_trace = cfg.record_energy;
    let model = Model::new(model_cfg, g)?;
    let f = model.forward(params, g, None)?;
    if cfg.record_velocity {
        if let Some(u) = f.velocity() {
            write(&dir.join(format!("velocity_{tag}.csv")), velocity_stats(u.as_slice(), g)?.to_csv())?;
        }
        write(&dir.join(format!("embedding_{tag}.csv")), embedding_csv(f.final_state(), g.labels())?)?;
    }
    if cfg.record_energy {
        energy_trace(&f.trajectory, g.adjacency())?.write_csv(&dir.join(format!("energy_{tag}.csv")))?;
    }
    Ok(())
}

fn run_summary(k: usize, split: &str, r: &RunResult) -> Value {
    let mut v = r.metrics_json();
    if let Some(obj) = v.as_object_mut() {
        obj.remove("curves");
        obj.insert("run".into(), json!(k));
        obj.insert("split".into(), json!(split));
    }
    v
}

pub fn cmd_train(o: &Overrides) -> Result<Value> {
    let cfg = o.resolve()?;
    let g = cfg.graph()?;
    let splits = cfg.resolve_splits(&g)?;
    let plan = RunPlan::paired(&splits, cfg.seeds, cfg.train.seed);
    let started = Instant::now();
    let results = plan
        .par_iter()
        .map(|run| {
            let tc = TrainConfig {
                seed: run.seed,
                ..cfg.train.clone()
            };
            train(&cfg.model, &tc, &g, &run.split)
        })
        .collect::<Result<Vec<_>>>()?;
    let total = started.elapsed().as_secs_f64();

    let dir = output_dir(&cfg)?;
    let params_dir = dir.join("params");
    std::fs::create_dir_all(&params_dir).map_err(|e| GnsnError::io(&params_dir, e))?;
    let mut curves = String::from("run,split,seed,epoch,train_loss,train_acc,valid_acc,valid_loss,h_star,mean_velocity\n");
    for (k, (run, r)) in plan.iter().zip(&results).enumerate() {
        for line in r.curves_csv().lines().skip(1) {
            curves.push_str(&format!("{k},{},{},{line}\n", run.split_name, run.seed));
        }
        r.best_params.save(&params_dir.join(format!("run_{k}.json")))?;
        if cfg.record_energy || cfg.record_velocity {
            run_extras(&cfg, &g, &r.best_params, &dir, &format!("run_{k}"))?;
        }
    }
    write(&dir.join("curves.csv"), curves)?;

    let accs: Vec<f64> = results.iter().map(|r| r.test_acc).collect();
    let (mean_acc, std_acc) = mean_std(&accs);
    let velocities: Vec<f64> = results.iter().filter_map(|r| r.final_mean_velocity).collect();
    let aggregate = json!({
        "n_runs": results.len(),
        "mean_test_acc": mean_acc,
        "std_test_acc": std_acc,
        "mean_valid_acc": mean_std(&results.iter().map(|r| r.best_valid_acc).collect::<Vec<_>>()).0,
        "mean_h_star": mean_std(&results.iter().map(|r| r.final_h_star).collect::<Vec<_>>()).0,
        "mean_velocity": if velocities.is_empty() { Value::Null } else { json!(mean_std(&velocities).0) },
    });
    let runs: Vec<Value> = plan
        .iter()
        .zip(&results)
        .enumerate()
        .map(|(k, (run, r))| run_summary(k, &run.split_name, r))
        .collect();
    write_json(&dir.join("config.json"), &cfg)?;
    write_json(
        &dir.join("metrics.json"),
        &json!({
            "command": "train",
            "config": cfg,
            "dataset": dataset_summary(&cfg, &g),
            "runs": runs,
            "aggregate": aggregate,
        }),
    )?;
    write_json(
        &dir.join("timing.json"),
        &json!({
            "total_seconds": total,
            "run_seconds": results.iter().map(|r| r.wall_clock_seconds).collect::<Vec<_>>(),
        }),
    )?;
    Ok(json!({ "output": dir.display().to_string(), "aggregate": aggregate }))
}

#[derive(Args, Debug)]
pub struct CsbmArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub nodes: usize,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    #[arg(long, default_value_t = 0.9)]
    pub intra_p: f64,
    #[arg(long, default_value_t = 0.9)]
    pub inter_p: f64,
    #[arg(long, default_value_t = 2)]
    pub feature_dim: usize,
    /// Distance between class means.
    #[arg(long, default_value_t = 2.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of random 60/20/20 splits stored in the file.
    #[arg(long, default_value_t = 0)]
    pub splits: usize,
}

fn store_splits(g: Graph, n: usize, seed: u64) -> Result<Graph> {
    let fractions = SplitFractions::new(0.6, 0.2, 0.2)?;
    let mut g = g;
    for k in 0..n {
        let split = make_splits(&g, fractions, seed + k as u64, true)?;
        g = g.with_split(k.to_string(), split)?;
    }
    Ok(g)
}

pub fn cmd_csbm(a: &CsbmArgs) -> Result<Value> {
    let params = CsbmParams {
        num_nodes: a.nodes,
        num_classes: a.classes,
        intra_p: a.intra_p,
        inter_p: a.inter_p,
        feature_dim: a.feature_dim,
        class_mean_separation: a.separation,
        seed: a.seed,
    };
    let g = store_splits(generate_csbm(&params)?, a.splits, a.seed)?;
    let meta = json!({ "generator": "csbm", "params": params, "seed": a.seed, "splits": a.splits });
    g.save_json(&a.out, Some(meta))?;
    Ok(json!({ "output": a.out.display().to_string(), "num_nodes": g.num_nodes(), "num_edges": g.num_edges() }))
}

#[derive(Args, Debug)]
pub struct EnergyArgs {
    #[command(flatten)]
    pub common: Overrides,
    /// Comma-separated dynamics variants.
    #[arg(long, default_value = "pure_diffusion,adaptive")]
    pub variants: String,
    /// Euler steps; each step has the configured step size.
    #[arg(long, default_value_t = 30)]
    pub steps: usize,
}

pub fn cmd_energy(a: &EnergyArgs) -> Result<Value> {
    let cfg = a.common.resolve()?;
    if a.steps == 0 {
        return Err(GnsnError::Config("steps must be >= 1".into()));
    }
    let variants = split_list(&a.variants)
        .into_iter()
        .map(str::parse::<Variant>)
        .collect::<Result<Vec<_>>>()?;
    let g = cfg.graph()?;
    let tau = cfg.model.solver.step_size;
    let dir = output_dir(&cfg)?;
    let mut rows = Vec::new();
    for v in variants {
        let mut m = cfg.model.clone();
        m.dynamics.variant = v;
        m.solver.method = SolverMethod::Euler;
        m.solver.horizon = tau * a.steps as f64;
        let trace = model_energy_trace(&g, &m, cfg.train.seed)?;
        trace.write_csv(&dir.join(format!("energy_{v}.csv")))?;
        rows.push(json!({
            "variant": v.to_string(),
            "final_ratio": trace.final_ratio()?,
            "times": trace.times,
            "energy": trace.energy,
        }));
    }
    let ratios: Vec<Value> = rows.iter().map(|r| json!({"variant": r["variant"], "final_ratio": r["final_ratio"]})).collect();
    write_json(
        &dir.join("energy.json"),
        &json!({
            "command": "energy",
            "config": cfg,
            "dataset": dataset_summary(&cfg, &g),
            "steps": a.steps,
            "step_size": tau,
            "variants": rows,
        }),
    )?;
    Ok(json!({ "output": dir.display().to_string(), "ratios": ratios }))
}

fn write_table(cfg: &ExperimentConfig, g: &Graph, name: &str, extra: Value, table: &AblationTable) -> Result<Value> {
    let dir = output_dir(cfg)?;
    write(&dir.join(format!("{name}.csv")), table.to_csv())?;
    write_json(
        &dir.join(format!("{name}.json")),
        &json!({
            "command": name,
            "config": cfg,
            "dataset": dataset_summary(cfg, g),
            "grid": extra,
            "table": table,
        }),
    )?;
    Ok(json!({ "output": dir.display().to_string(), "rows": table.rows }))
}

fn run_grid(cfg: &ExperimentConfig, g: &Graph, arms: &[AblationArm]) -> Result<AblationTable> {
    let splits = cfg.resolve_splits(g)?;
    let plan = RunPlan::paired(&splits, cfg.seeds, cfg.train.seed);
    ablation_run(g, arms, &cfg.train, &plan)
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Overrides,
    /// Comma-separated arms: a dynamics variant (`fixed_velocity=<v>`
    /// included) or `encoding=<kind>`.
    #[arg(long, default_value = "adaptive,pure_diffusion,pure_convection,equal_weights")]
    pub arms: String,
}

fn parse_arm(base: &ModelConfig, arm: &str) -> Result<AblationArm> {
    match arm.strip_prefix("encoding=") {
        Some(kind) => Ok(AblationArm::encoding(base, kind.parse::<EncodingKind>()?)),
        None => Ok(AblationArm::variant(base, arm.parse::<Variant>()?)),
    }
}

pub fn cmd_ablate(a: &AblateArgs) -> Result<Value> {
    let cfg = a.common.resolve()?;
    let arms = split_list(&a.arms)
        .into_iter()
        .map(|s| parse_arm(&cfg.model, s))
        .collect::<Result<Vec<_>>>()?;
    if arms.is_empty() {
        return Err(GnsnError::Config("no ablation arms given".into()));
    }
    let g = cfg.graph()?;
    let table = run_grid(&cfg, &g, &arms)?;
    let labels: Vec<&str> = arms.iter().map(|a| a.label.as_str()).collect();
    write_table(&cfg, &g, "ablation", json!({ "arms": labels }), &table)
}

#[derive(Args, Debug)]
pub struct SolversArgs {
    #[command(flatten)]
    pub common: Overrides,
    #[arg(long, default_value = "euler,rk4,dopri5")]
    pub solvers: String,
    /// Fixed step sizes; the adaptive solver uses them as its first trial
    /// step.
    #[arg(long, default_value = "1.0,0.5,0.25")]
    pub step_sizes: String,
}

pub fn cmd_solvers(a: &SolversArgs) -> Result<Value> {
    let cfg = a.common.resolve()?;
    let methods = split_list(&a.solvers)
        .into_iter()
        .map(str::parse::<SolverMethod>)
        .collect::<Result<Vec<_>>>()?;
    let steps = split_list(&a.step_sizes)
        .into_iter()
        .map(|s| s.parse::<f64>().map_err(|_| GnsnError::Config(format!("bad step size '{s}'"))))
        .collect::<Result<Vec<_>>>()?;
    if methods.is_empty() || steps.is_empty() {
        return Err(GnsnError::Config("solver grid is empty".into()));
    }
    let mut arms = Vec::new();
    for &m in &methods {
        for &tau in &steps {
            let mut model = cfg.model.clone();
            model.solver.method = m;
            model.solver.step_size = tau;
            if m == SolverMethod::Dopri5 {
                model.solver.initial_step = Some(tau);
            }
            model.validate()?;
            arms.push(AblationArm::new(format!("{m}:tau={tau}"), model));
        }
    }
    let g = cfg.graph()?;
    let table = run_grid(&cfg, &g, &arms)?;
    let names: Vec<String> = methods.iter().map(|m| m.to_string()).collect();
    write_table(&cfg, &g, "solvers", json!({ "solvers": names, "step_sizes": steps }), &table)
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[command(flatten)]
    pub common: Overrides,
    /// Parameter snapshot written by `train`.
    #[arg(long)]
    pub params: PathBuf,
}

pub fn cmd_stats(a: &StatsArgs) -> Result<Value> {
    let cfg = a.common.resolve()?;
    let g = cfg.graph()?;
    let params = ParameterStore::load(&a.params)?;
    let model = Model::new(cfg.model.clone(), &g)?;
    let f = model.forward(&params, &g, None)?;
    let u = f
        .velocity()
        .ok_or_else(|| GnsnError::Config(format!("variant {} has no velocity field", cfg.model.dynamics.variant)))?;
    let report = velocity_stats(u.as_slice(), &g)?;
    let dir = output_dir(&cfg)?;
    write(&dir.join("velocity.csv"), report.to_csv())?;
    write(&dir.join("embedding.csv"), embedding_csv(f.final_state(), g.labels())?)?;
    let summary = json!({
        "num_nodes": report.u.len(),
        "mean": report.mean,
        "median": report.median,
        "max": report.max,
        "spearman_u_h_local": report.hc_correlation().ok(),
    });
    write_json(
        &dir.join("stats.json"),
        &json!({
            "command": "stats",
            "config": cfg,
            "params": a.params.display().to_string(),
            "dataset": dataset_summary(&cfg, &g),
            "velocity": summary,
        }),
    )?;
    Ok(json!({ "output": dir.display().to_string(), "velocity": summary }))
}

#[derive(Args, Debug)]
pub struct ConvertArgs {
    /// Whitespace-separated edge list, one `u v` pair per line.
    #[arg(long)]
    pub edges: PathBuf,
    /// Features CSV without header; the last column is the integer label.
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub drop_self_loops: bool,
    #[arg(long)]
    pub require_symmetric: bool,
    /// Number of random 60/20/20 splits to store.
    #[arg(long, default_value_t = 0)]
    pub splits: usize,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
}

pub fn cmd_convert(a: &ConvertArgs) -> Result<Value> {
    let format = GraphFormat::EdgeListCsv {
        features: a.features.clone(),
        options: EdgeListOptions {
            drop_self_loops: a.drop_self_loops,
            require_symmetric: a.require_symmetric,
        },
    };
    let g = store_splits(load_graph(&a.edges, &format)?, a.splits, a.split_seed)?;
    g.save_json(&a.out, None)?;
    Ok(json!({ "output": a.out.display().to_string(), "num_nodes": g.num_nodes(), "num_edges": g.num_edges() }))
}
