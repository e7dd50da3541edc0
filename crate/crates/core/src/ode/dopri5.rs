use crate::error::{GnsnError, Result};
use crate::ode::{check_state, combine, Dynamics, SolverConfig, StepInfo, Trajectory};
use crate::tensor::{Tape, Var};

const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];

const A: [&[f64]; 7] = [
    &[],
    &[1.0 / 5.0],
    &[3.0 / 40.0, 9.0 / 40.0],
    &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
    &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
    &[9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0],
    &[35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];

const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];

const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 5.0;

/// Dormand–Prince 5(4) with step-size control. The fifth-order solution is
/// propagated; accepted step sizes are treated as constants by the tape.
pub fn dopri5_adaptive(tape: &mut Tape, dynamics: &mut dyn Dynamics, y0: Var, cfg: &SolverConfig) -> Result<Trajectory> {
    cfg.validate()?;
    let solver = "dopri5";
    let horizon = cfg.horizon;
    let h_min = horizon * 1e-10;
    let mut h = cfg.initial_step.unwrap_or(horizon).min(horizon);
    let mut traj = Trajectory::start(tape, dynamics, y0, cfg.record_trace);
    let mut y = y0;
    let mut t = 0.0;
    let mut attempts = 0usize;

    while t < horizon {
        if attempts >= cfg.max_steps {
            return Err(GnsnError::Solver {
                solver: solver.into(),
                message: format!("max_steps {} exceeded at t = {t}", cfg.max_steps),
            });
        }
        attempts += 1;
        let last = horizon - t <= h * (1.0 + 1e-12);
        if last {
            h = horizon - t;
        }
        let info = StepInfo {
            index: traj.accepted_steps,
            t,
            h,
            solver,
        };
        dynamics.begin_step(tape, y, &info)?;

        let mut k: Vec<Var> = Vec::with_capacity(7);
        for s in 0..7 {
            let terms: Vec<(f64, Var)> = A[s].iter().zip(&k).map(|(a, &kv)| (h * a, kv)).collect();
            let ys = combine(tape, y, &terms)?;
            k.push(dynamics.rhs(tape, ys, t + C[s] * h)?);
        }
        let terms: Vec<(f64, Var)> = B5.iter().zip(&k).map(|(b, &kv)| (h * b, kv)).collect();
        let y5 = combine(tape, y, &terms)?;

        let err = error_norm(tape, y, y5, &k, h, cfg);
        if err.is_finite() && err <= 1.0 {
            check_state(tape, y5, traj.accepted_steps, solver)?;
            dynamics.commit_step();
            t = if last { horizon } else { t + h };
            y = y5;
            traj.accept(tape, dynamics, y, t, cfg.record_trace);
            let factor = if err == 0.0 {
                MAX_FACTOR
            } else {
                (SAFETY * err.powf(-0.2)).clamp(MIN_FACTOR, MAX_FACTOR)
            };
            h *= factor;
        } else {
            traj.rejected_steps += 1;
            let factor = if err.is_finite() {
                (SAFETY * err.powf(-0.2)).clamp(MIN_FACTOR, 1.0)
            } else {
                MIN_FACTOR
            };
            h *= factor;
            if h < h_min {
                return Err(GnsnError::Solver {
                    solver: solver.into(),
                    message: format!(
                        "step size {h:e} fell below {h_min:e} at t = {t} (stiffness or divergence)"
                    ),
                });
            }
        }
    }
    Ok(traj)
}

/// RMS of `(y5 - y4)_i / (atol + rtol * max(|y_i|, |y5_i|))`.
fn error_norm(tape: &Tape, y: Var, y5: Var, k: &[Var], h: f64, cfg: &SolverConfig) -> f64 {
    let (yv, y5v) = (tape.value(y).as_slice(), tape.value(y5).as_slice());
    let ks: Vec<&[f64]> = k.iter().map(|&kv| tape.value(kv).as_slice()).collect();
    let mut acc = 0.0;
    for i in 0..yv.len() {
        let e: f64 = (0..7).map(|s| (B5[s] - B4[s]) * ks[s][i]).sum::<f64>() * h;
        let scale = cfg.atol + cfg.rtol * yv[i].abs().max(y5v[i].abs());
        acc += (e / scale).powi(2);
    }
    (acc / yv.len().max(1) as f64).sqrt()
}
