use serde::{Deserialize, Serialize};

use crate::error::{GnsnError, Result};
use crate::tensor::{Matrix, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VelocityConfig {
    /// Velocity at `t = 0`, before any flux has been accumulated.
    pub u_init: f64,
    /// Saturation bound.
    pub u_max: f64,
    /// Soft window temperature; `None` means `T / 20`, `Some(0.0)` a hard
    /// window.
    pub kappa: Option<f64>,
}

impl Default for VelocityConfig {
    fn default() -> Self {
        VelocityConfig {
            u_init: 1.0,
            u_max: 10.0,
            kappa: None,
        }
    }
}

impl VelocityConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.u_init.is_finite() || self.u_init < 0.0 {
            return Err(GnsnError::Config(format!("u_init must be >= 0, got {}", self.u_init)));
        }
        if !(self.u_max > 0.0) || !self.u_max.is_finite() {
            return Err(GnsnError::Config(format!("u_max must be > 0, got {}", self.u_max)));
        }
        if let Some(k) = self.kappa {
            if !k.is_finite() || k < 0.0 {
                return Err(GnsnError::Config(format!("kappa must be >= 0, got {k}")));
            }
        }
        Ok(())
    }

    pub fn kappa_for(&self, horizon: f64) -> f64 {
        self.kappa.unwrap_or(horizon / 20.0)
    }
}

/// Per-node running flux integral and the velocity derived from it. The
/// handles live on the tape of the forward pass that created them.
///
/// The integral starts at `u_init * T`, so `u = min(integral / T, u_max)`
/// equals `u_init` before the first step and never decreases.
#[derive(Clone, Copy, Debug)]
pub struct VelocityState {
    integral: Var,
    window: Var,
    velocity: Var,
    horizon: f64,
    kappa: f64,
    u_max: f64,
    steps: usize,
    fixed: bool,
}

impl VelocityState {
    /// Adaptive state with window times `t_i = T * sigmoid(theta_i)`.
    pub fn new(tape: &mut Tape, theta: Var, horizon: f64, cfg: &VelocityConfig) -> Result<Self> {
        cfg.validate()?;
        if !(horizon >= 0.0) || !horizon.is_finite() {
            return Err(GnsnError::Config(format!("horizon must be >= 0, got {horizon}")));
        }
        let n = tape.value(theta).rows();
        if tape.value(theta).cols() != 1 {
            return Err(GnsnError::shape("VelocityState::new", "theta must be an n x 1 column"));
        }
        let s = tape.sigmoid(theta)?;
        let window = tape.scale(s, horizon)?;
        let integral = tape.constant(Matrix::filled(n, 1, cfg.u_init * horizon));
        let velocity = tape.constant(Matrix::filled(n, 1, cfg.u_init.min(cfg.u_max)));
        Ok(VelocityState {
            integral,
            window,
            velocity,
            horizon,
            kappa: cfg.kappa_for(horizon),
            u_max: cfg.u_max,
            steps: 0,
            fixed: false,
        })
    }

    /// Constant velocity `v` on every node; updates only count steps.
    pub fn fixed(tape: &mut Tape, n: usize, v: f64, horizon: f64) -> Result<Self> {
        if !v.is_finite() || v < 0.0 {
            return Err(GnsnError::Config(format!("fixed velocity must be >= 0, got {v}")));
        }
        let velocity = tape.constant(Matrix::filled(n, 1, v));
        let window = tape.constant(Matrix::filled(n, 1, horizon));
        let integral = tape.constant(Matrix::filled(n, 1, v * horizon));
        Ok(VelocityState {
            integral,
            window,
            velocity,
            horizon,
            kappa: 0.0,
            u_max: v,
            steps: 0,
            fixed: true,
        })
    }

    pub fn velocity(&self) -> Var {
        self.velocity
    }

    pub fn integral(&self) -> Var {
        self.integral
    }

    /// Window times `t_i`.
    pub fn window(&self) -> Var {
        self.window
    }

    pub fn steps_elapsed(&self) -> usize {
        self.steps
    }

    pub fn u_max(&self) -> f64 {
        self.u_max
    }

    pub fn is_fixed(&self) -> bool {
        self.fixed
    }
}

/// Accumulates `w_i(t_now) * |flux_i| * tau` with the soft window
/// `w_i = sigmoid((t_i - t_now) / kappa)` (a hard indicator when
/// `kappa = 0`) and refreshes `u = min(integral / T, u_max)`.
pub fn update_velocity(tape: &mut Tape, vs: &VelocityState, flux: Var, t_now: f64, tau: f64) -> Result<VelocityState> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(GnsnError::Numeric(format!("velocity update with step {tau}")));
    }
    if !(vs.horizon > 0.0) {
        return Err(GnsnError::Numeric("velocity update on a zero horizon".into()));
    }
    let mut next = *vs;
    next.steps += 1;
    if vs.fixed {
        return Ok(next);
    }
    let norms = tape.row_norm(flux)?;
    if tape.value(norms).rows() != tape.value(vs.window).rows() {
        return Err(GnsnError::shape("update_velocity", "flux rows differ from node count"));
    }
    let weights = if vs.kappa > 0.0 {
        let shifted = tape.add_scalar(vs.window, -t_now)?;
        let z = tape.scale(shifted, 1.0 / vs.kappa)?;
        tape.sigmoid(z)?
    } else {
        let w = tape.value(vs.window).map(|ti| if t_now < ti { 1.0 } else { 0.0 });
        tape.constant(w)
    };
    let contrib = tape.mul(weights, norms)?;
    let contrib = tape.scale(contrib, tau)?;
    next.integral = tape.add(vs.integral, contrib)?;
    let avg = tape.scale(next.integral, 1.0 / vs.horizon)?;
    next.velocity = tape.clamp_max(avg, vs.u_max)?;
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hard(u_init: f64, u_max: f64) -> VelocityConfig {
        VelocityConfig {
            u_init,
            u_max,
            kappa: Some(0.0),
        }
    }

    /// Runs `steps` uniform updates with a constant per-node flux norm.
    fn accumulate(theta: &[f64], horizon: f64, steps: usize, f: f64, cfg: VelocityConfig) -> Vec<Vec<f64>> {
        let mut t = Tape::new();
        let th = t.constant(Matrix::column(theta));
        let mut vs = VelocityState::new(&mut t, th, horizon, &cfg).unwrap();
        let flux = t.constant(Matrix::filled(theta.len(), 2, f / 2f64.sqrt()));
        let tau = horizon / steps as f64;
        let mut history = vec![t.value(vs.velocity()).as_slice().to_vec()];
        for k in 0..steps {
            vs = update_velocity(&mut t, &vs, flux, k as f64 * tau, tau).unwrap();
            history.push(t.value(vs.velocity()).as_slice().to_vec());
        }
        history
    }

    #[test]
    fn zero_flux_gives_zero_velocity() {
        let h = accumulate(&[0.0, 1.0], 2.0, 10, 0.0, hard(0.0, 10.0));
        assert!(h.iter().flatten().all(|&u| u == 0.0));
    }

    #[test]
    fn constant_flux_full_window_averages_to_flux() {
        // sigmoid(40) rounds to 1 within 1e-17, so t_i = T
        let h = accumulate(&[40.0], 3.0, 30, 0.7, hard(0.0, 10.0));
        assert!((h.last().unwrap()[0] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn saturates_at_u_max() {
        let h = accumulate(&[40.0], 1.0, 10, 25.0, hard(0.0, 10.0));
        assert_eq!(h.last().unwrap()[0], 10.0);
        assert!(h.iter().flatten().all(|&u| (0.0..=10.0).contains(&u)));
    }

    #[test]
    fn monotone_and_window_ordered() {
        // theta = 0 puts t_i at T/2, theta = 1 later
        for cfg in [hard(0.0, 10.0), VelocityConfig { u_init: 0.5, ..Default::default() }] {
            let h = accumulate(&[0.0, 1.0], 2.0, 20, 1.3, cfg);
            for w in h.windows(2) {
                assert!(w[1][0] >= w[0][0] && w[1][1] >= w[0][1]);
            }
            let last = h.last().unwrap();
            assert!(last[0] <= last[1]);
        }
        let h = accumulate(&[0.0], 2.0, 20, 1.0, hard(0.0, 10.0));
        assert!((h.last().unwrap()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn warm_start_and_fixed() {
        let mut t = Tape::new();
        let th = t.constant(Matrix::zeros(3, 1));
        let vs = VelocityState::new(&mut t, th, 1.0, &VelocityConfig::default()).unwrap();
        assert_eq!(t.value(vs.velocity()).as_slice(), &[1.0; 3]);

        let vs = VelocityState::fixed(&mut t, 3, 2.5, 1.0).unwrap();
        let flux = t.constant(Matrix::filled(3, 1, 100.0));
        let next = update_velocity(&mut t, &vs, flux, 0.0, 0.1).unwrap();
        assert_eq!(t.value(next.velocity()).as_slice(), &[2.5; 3]);
        assert_eq!(next.steps_elapsed(), 1);
        assert!(update_velocity(&mut t, &vs, flux, 0.0, 0.0).is_err());
    }

    #[test]
    fn window_logits_receive_gradient() {
        let mut t = Tape::new();
        let th = t.param(Matrix::column(&[0.0, 0.3]));
        let vs = VelocityState::new(&mut t, th, 1.0, &VelocityConfig::default()).unwrap();
        let flux = t.constant(Matrix::filled(2, 2, 1.0));
        let vs = update_velocity(&mut t, &vs, flux, 0.0, 0.5).unwrap();
        let vs = update_velocity(&mut t, &vs, flux, 0.5, 0.5).unwrap();
        let loss = t.sum(vs.velocity()).unwrap();
        let g = t.backward(loss).unwrap();
        assert!(g.wrt(th).as_slice().iter().all(|&v| v > 0.0));
    }
}
