//! Central finite-difference check of tape gradients.

use crate::error::{GnsnError, Result};
use crate::tensor::{Matrix, Tape, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error over all coordinates.
    pub max_rel_error: f64,
    /// `(parameter index, flat coordinate)` of the largest error.
    pub worst: (usize, usize),
    pub coordinates: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is zero are judged on an absolute scale.
const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `backward` against central differences with step `h` for every
/// coordinate of every parameter. `f` must build a scalar on the tape it is
/// given, reading parameters only through the supplied handles.
pub fn finite_diff_check<F>(f: F, params: &[Matrix], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Matrix]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|m| tape.constant(m.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out).item();
        if !v.is_finite() {
            return Err(GnsnError::Numeric(format!("non-finite value {v} while probing")));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|m| tape.param(m.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Matrix> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let mut probe = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
        tolerance: tol,
        passed: true,
    };
    for p in 0..params.len() {
        for k in 0..params[p].len() {
            let orig = params[p].as_slice()[k];
            probe[p].as_mut_slice()[k] = orig + h;
            let up = eval(&probe)?;
            probe[p].as_mut_slice()[k] = orig - h;
            let down = eval(&probe)?;
            probe[p].as_mut_slice()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = relative_error(analytic[p].as_slice()[k], numeric);
            report.coordinates += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (p, k);
            }
        }
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_squared_norm() {
        let f = |t: &mut Tape, v: &[Var]| {
            let sq = t.mul(v[0], v[0])?;
            let s = t.sum(sq)?;
            t.scale(s, 0.5)
        };
        let x = Matrix::column(&[1.0, 2.0]);
        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let l = f(&mut tape, &[xv]).unwrap();
        assert_eq!(tape.backward(l).unwrap().wrt(xv).as_slice(), &[1.0, 2.0]);

        let report = finite_diff_check(f, &[x], 1e-4, 1e-8).unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn constant_function() {
        let f = |t: &mut Tape, _: &[Var]| Ok(t.constant(Matrix::scalar(3.0)));
        let report = finite_diff_check(f, &[Matrix::column(&[1.0, -1.0])], 1e-4, 1e-12).unwrap();
        assert!(report.passed);
        assert_eq!(report.max_rel_error, 0.0);
    }

    #[test]
    fn non_finite_probe_is_an_error() {
        // overflows to infinity
        let f = |t: &mut Tape, v: &[Var]| {
            let s = t.sum(v[0])?;
            let s = t.mul(s, s)?;
            let s = t.scale(s, 1e308)?;
            let s = t.scale(s, 1e308)?;
            Ok(s)
        };
        assert!(finite_diff_check(f, &[Matrix::scalar(1.0)], 1e-4, 1e-3).is_err());
    }
}
