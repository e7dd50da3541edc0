//! Fixed-step and adaptive integrators recorded on the tape, so gradients
//! flow through every solver stage.

mod dopri5;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::dirichlet_energy;
use crate::error::{GnsnError, Result};
use crate::tensor::{Matrix, SparseMatrix, Tape, Var};

pub use dopri5::dopri5_adaptive;

/// Context handed to [`Dynamics::begin_step`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepInfo {
    /// Index of the step being attempted (accepted steps so far).
    pub index: usize,
    pub t: f64,
    pub h: f64,
    pub solver: &'static str,
}

/// A right-hand side `dy/dt = f(y, t)` with optional per-step state.
pub trait Dynamics {
    /// Called with the pre-step state before the stages of every attempted
    /// step. Stateful dynamics stage their update here.
    fn begin_step(&mut self, _tape: &mut Tape, _state: Var, _step: &StepInfo) -> Result<()> {
        Ok(())
    }

    fn rhs(&mut self, tape: &mut Tape, state: Var, t: f64) -> Result<Var>;

    /// Called once the attempted step is accepted.
    fn commit_step(&mut self) {}

    /// Per-node velocity after the last committed step, if any.
    fn velocity(&self) -> Option<Var> {
        None
    }
}

/// Adapts a closure into [`Dynamics`].
pub struct FnDynamics<F>(pub F);

impl<F> Dynamics for FnDynamics<F>
where
    F: FnMut(&mut Tape, Var, f64) -> Result<Var>,
{
    fn rhs(&mut self, tape: &mut Tape, state: Var, t: f64) -> Result<Var> {
        (self.0)(tape, state, t)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMethod {
    Euler,
    #[default]
    Rk4,
    Dopri5,
}

impl SolverMethod {
    pub fn name(self) -> &'static str {
        match self {
            SolverMethod::Euler => "euler",
            SolverMethod::Rk4 => "rk4",
            SolverMethod::Dopri5 => "dopri5",
        }
    }
}

impl std::fmt::Display for SolverMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SolverMethod {
    type Err = GnsnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(SolverMethod::Euler),
            "rk4" => Ok(SolverMethod::Rk4),
            "dopri5" => Ok(SolverMethod::Dopri5),
            other => Err(GnsnError::Config(format!("unknown solver '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub method: SolverMethod,
    /// Fixed step size `tau`.
    pub step_size: f64,
    /// Integration horizon `T`.
    pub horizon: f64,
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
    /// Keep a value snapshot at every accepted time.
    pub record_trace: bool,
    /// First trial step for the adaptive solver; defaults to `T`.
    pub initial_step: Option<f64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            method: SolverMethod::Rk4,
            step_size: 1.0,
            horizon: 3.0,
            rtol: 1e-3,
            atol: 1e-4,
            max_steps: 10_000,
            record_trace: false,
            initial_step: None,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(GnsnError::Config(format!("{name} must be > 0, got {v}")))
            }
        };
        positive("step_size", self.step_size)?;
        if !(self.horizon >= 0.0) || !self.horizon.is_finite() {
            return Err(GnsnError::Config(format!("horizon must be >= 0, got {}", self.horizon)));
        }
        positive("rtol", self.rtol)?;
        positive("atol", self.atol)?;
        if let Some(h) = self.initial_step {
            positive("initial_step", h)?;
        }
        if self.max_steps == 0 {
            return Err(GnsnError::Config("max_steps must be >= 1".into()));
        }
        Ok(())
    }

    /// `ceil(T / tau)`, ignoring round-off just above an integer. Zero for
    /// a zero horizon.
    pub fn fixed_step_count(&self) -> usize {
        if self.horizon == 0.0 {
            return 0;
        }
        let ratio = self.horizon / self.step_size;
        let n = (ratio - 1e-9 * ratio.max(1.0)).ceil();
        (n as usize).max(1)
    }
}

/// Result of one integration.
#[derive(Clone, Debug)]
pub struct Trajectory {
    /// Accepted times, from 0 to `T`.
    pub times: Vec<f64>,
    pub final_state: Var,
    /// State values at every entry of `times` when tracing; otherwise empty.
    pub snapshots: Vec<Matrix>,
    /// Mean velocity at every entry of `times` when tracing and the dynamics
    /// carry a velocity; otherwise empty.
    pub mean_velocity: Vec<f64>,
    pub final_velocity: Option<Var>,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
}

/// One row of the trace export.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub t: f64,
    pub dirichlet_energy: f64,
    pub mean_velocity: Option<f64>,
}

impl Trajectory {
    fn start(tape: &Tape, dynamics: &dyn Dynamics, y0: Var, record: bool) -> Self {
        let mut traj = Trajectory {
            times: vec![0.0],
            final_state: y0,
            snapshots: Vec::new(),
            mean_velocity: Vec::new(),
            final_velocity: dynamics.velocity(),
            accepted_steps: 0,
            rejected_steps: 0,
        };
        if record {
            traj.record(tape, dynamics, y0);
        }
        traj
    }

    fn record(&mut self, tape: &Tape, dynamics: &dyn Dynamics, y: Var) {
        self.snapshots.push(tape.value(y).clone());
        if let Some(u) = dynamics.velocity() {
            let u = tape.value(u);
            self.mean_velocity.push(u.sum() / u.len().max(1) as f64);
        }
    }

    fn accept(&mut self, tape: &Tape, dynamics: &dyn Dynamics, y: Var, t: f64, record: bool) {
        self.times.push(t);
        self.final_state = y;
        self.final_velocity = dynamics.velocity();
        self.accepted_steps += 1;
        if record {
            self.record(tape, dynamics, y);
        }
    }

    /// Energy and velocity per recorded time.
    pub fn trace_rows(&self, adjacency: &SparseMatrix) -> Result<Vec<TraceRow>> {
        if self.snapshots.is_empty() {
            return Err(GnsnError::Config("trajectory was recorded without snapshots".into()));
        }
        self.snapshots
            .iter()
            .enumerate()
            .map(|(k, h)| {
                Ok(TraceRow {
                    t: self.times[k],
                    dirichlet_energy: dirichlet_energy(h, adjacency)?,
                    mean_velocity: self.mean_velocity.get(k).copied(),
                })
            })
            .collect()
    }

    /// Writes `t,dirichlet_energy,mean_velocity` rows.
    pub fn write_trace_csv(&self, path: &Path, adjacency: &SparseMatrix) -> Result<()> {
        let rows = self.trace_rows(adjacency)?;
        let mut out = String::from("t,dirichlet_energy,mean_velocity\n");
        for r in rows {
            let u = r.mean_velocity.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{}\n", r.t, r.dirichlet_energy, u));
        }
        let mut f = std::fs::File::create(path).map_err(|e| GnsnError::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| GnsnError::io(path, e))
    }
}

/// `y + sum_k c_k x_k`, skipping zero coefficients.
pub(crate) fn combine(tape: &mut Tape, y: Var, terms: &[(f64, Var)]) -> Result<Var> {
    let mut acc = y;
    for &(c, x) in terms {
        if c == 0.0 {
            continue;
        }
        let s = tape.scale(x, c)?;
        acc = tape.add(acc, s)?;
    }
    Ok(acc)
}

fn check_state(tape: &Tape, y: Var, step: usize, solver: &str) -> Result<()> {
    if tape.value(y).is_finite() {
        Ok(())
    } else {
        Err(GnsnError::Divergence {
            step,
            solver: solver.to_string(),
            term: "state".to_string(),
        })
    }
}

/// Integrates from `t = 0` to `T` with the configured method.
pub fn integrate(tape: &mut Tape, dynamics: &mut dyn Dynamics, y0: Var, cfg: &SolverConfig) -> Result<Trajectory> {
    cfg.validate()?;
    if !tape.value(y0).is_finite() {
        return Err(GnsnError::Numeric("initial state is not finite".into()));
    }
    match cfg.method {
        SolverMethod::Dopri5 => dopri5_adaptive(tape, dynamics, y0, cfg),
        method => fixed_step(tape, dynamics, y0, cfg, method),
    }
}

fn fixed_step(
    tape: &mut Tape,
    dynamics: &mut dyn Dynamics,
    y0: Var,
    cfg: &SolverConfig,
    method: SolverMethod,
) -> Result<Trajectory> {
    let n = cfg.fixed_step_count();
    let solver = method.name();
    if n > cfg.max_steps {
        return Err(GnsnError::Solver {
            solver: solver.into(),
            message: format!("{n} steps needed, max_steps is {}", cfg.max_steps),
        });
    }
    let mut traj = Trajectory::start(tape, dynamics, y0, cfg.record_trace);
    let mut y = y0;
    let mut t = 0.0;
    for k in 0..n {
        let t_next = if k + 1 == n { cfg.horizon } else { (k + 1) as f64 * cfg.step_size };
        let h = t_next - t;
        let info = StepInfo {
            index: k,
            t,
            h,
            solver,
        };
        dynamics.begin_step(tape, y, &info)?;
        y = match method {
            SolverMethod::Euler => {
                let f = dynamics.rhs(tape, y, t)?;
                combine(tape, y, &[(h, f)])?
            }
            _ => {
                let k1 = dynamics.rhs(tape, y, t)?;
                let y2 = combine(tape, y, &[(h / 2.0, k1)])?;
                let k2 = dynamics.rhs(tape, y2, t + h / 2.0)?;
                let y3 = combine(tape, y, &[(h / 2.0, k2)])?;
                let k3 = dynamics.rhs(tape, y3, t + h / 2.0)?;
                let y4 = combine(tape, y, &[(h, k3)])?;
                let k4 = dynamics.rhs(tape, y4, t + h)?;
                combine(tape, y, &[(h / 6.0, k1), (h / 3.0, k2), (h / 3.0, k3), (h / 6.0, k4)])?
            }
        };
        check_state(tape, y, k, solver)?;
        dynamics.commit_step();
        t = t_next;
        traj.accept(tape, dynamics, y, t, cfg.record_trace);
    }
    Ok(traj)
}

/// Empirical global order: least-squares slope of `log(error)` against
/// `log(tau)`. `make` builds fresh dynamics for every run; `reference` is the
/// exact final state, or a tight adaptive solve when absent.
pub fn convergence_order_probe<D: Dynamics>(
    mut make: impl FnMut() -> D,
    y0: &Matrix,
    horizon: f64,
    method: SolverMethod,
    taus: &[f64],
    reference: Option<&Matrix>,
) -> Result<f64> {
    if taus.len() < 3 {
        return Err(GnsnError::Config("order probe needs at least 3 step sizes".into()));
    }
    let ratio = taus[1] / taus[0];
    let geometric = taus
        .windows(2)
        .all(|w| w[0] > 0.0 && ((w[1] / w[0]) / ratio - 1.0).abs() < 1e-6);
    if !geometric || ratio == 1.0 {
        return Err(GnsnError::Config(format!("step sizes {taus:?} are not a geometric progression")));
    }
    let run = |cfg: SolverConfig, make: &mut dyn FnMut() -> D| -> Result<Matrix> {
        let mut tape = Tape::new();
        let y = tape.constant(y0.clone());
        let mut d = make();
        let traj = integrate(&mut tape, &mut d, y, &cfg)?;
        Ok(tape.value(traj.final_state).clone())
    };
    let exact = match reference {
        Some(r) => r.clone(),
        None => run(
            SolverConfig {
                method: SolverMethod::Dopri5,
                horizon,
                rtol: 1e-12,
                atol: 1e-12,
                max_steps: 1_000_000,
                ..Default::default()
            },
            &mut make,
        )?,
    };
    let mut points = Vec::with_capacity(taus.len());
    for &tau in taus {
        let cfg = SolverConfig {
            method,
            step_size: tau,
            horizon,
            max_steps: usize::MAX,
            ..Default::default()
        };
        let y = run(cfg, &mut make)?;
        let err = y.zip_map(&exact, |a, b| a - b).max_abs();
        if err == 0.0 {
            return Err(GnsnError::Undefined(
                "degenerate order probe: zero error at every step size".into(),
            ));
        }
        points.push((tau.ln(), err.ln()));
    }
    let m = points.len() as f64;
    let (sx, sy) = points.iter().fold((0.0, 0.0), |(a, b), p| (a + p.0, b + p.1));
    let (mx, my) = (sx / m, sy / m);
    let cov: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let var: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Ok(cov / var)
}
