//! Hyperbolic positional encodings applied to node features before the
//! dynamics.

use serde::{Deserialize, Serialize};

use crate::error::{GnsnError, Result};
use crate::tensor::{Matrix, Tape, Var};

/// Off-hyperboloid tolerance accepted by [`tangent_logmap`].
pub const HYPERBOLOID_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncodingKind {
    #[default]
    Poincare,
    Lorentz,
    Tangent,
    None,
}

impl std::fmt::Display for EncodingKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EncodingKind::Poincare => "poincare",
            EncodingKind::Lorentz => "lorentz",
            EncodingKind::Tangent => "tangent",
            EncodingKind::None => "none",
        })
    }
}

impl std::str::FromStr for EncodingKind {
    type Err = GnsnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "poincare" => Ok(EncodingKind::Poincare),
            "lorentz" => Ok(EncodingKind::Lorentz),
            "tangent" => Ok(EncodingKind::Tangent),
            "none" => Ok(EncodingKind::None),
            other => Err(GnsnError::Config(format!("unknown encoding '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncodingConfig {
    pub kind: EncodingKind,
    /// Poincaré curvature `c >= 0`; ignored by the other encodings.
    pub curvature: f64,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        EncodingConfig {
            kind: EncodingKind::Poincare,
            curvature: 0.1,
        }
    }
}

impl EncodingConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.curvature.is_finite() || self.curvature < 0.0 {
            return Err(GnsnError::Config(format!(
                "curvature must be finite and >= 0, got {}",
                self.curvature
            )));
        }
        Ok(())
    }

    /// Width of the encoded features for `d` input columns.
    pub fn output_dim(&self, d: usize) -> usize {
        match self.kind {
            EncodingKind::None => d,
            EncodingKind::Poincare | EncodingKind::Tangent => 2 * d,
            EncodingKind::Lorentz => 2 * d + 1,
        }
    }
}

fn finite(op: &str, x: &Matrix) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(GnsnError::Numeric(format!("{op}: non-finite input")))
    }
}

fn with_tape(x: &Matrix, f: impl FnOnce(&mut Tape, Var) -> Result<Var>) -> Result<Matrix> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = f(&mut tape, v)?;
    Ok(tape.value(out).clone())
}

/// Row-wise `x / (|x| (1 + sqrt(1 + c |x|^2)))`; zero rows stay zero.
pub fn poincare_project(x: &Matrix, curvature: f64) -> Result<Matrix> {
    finite("poincare_project", x)?;
    with_tape(x, |t, v| t.poincare(v, curvature))
}

/// Row-wise `[sqrt(1 + |x|^2) | x]`.
pub fn lorentz_project(x: &Matrix) -> Result<Matrix> {
    finite("lorentz_project", x)?;
    with_tape(x, |t, v| t.lorentz(v))
}

/// Minkowski inner product with signature `(-, +, ..., +)`.
pub fn lorentz_inner(a: &[f64], b: &[f64]) -> f64 {
    -a[0] * b[0] + a[1..].iter().zip(&b[1..]).map(|(x, y)| x * y).sum::<f64>()
}

/// Logarithmic map at the origin `o = [1, 0, ..., 0]`, returning the spatial
/// coordinates (the time coordinate of the result is identically zero).
pub fn tangent_logmap(xl: &Matrix) -> Result<Matrix> {
    finite("tangent_logmap", xl)?;
    if xl.cols() < 2 {
        return Err(GnsnError::shape("tangent_logmap", "need at least two columns"));
    }
    for r in 0..xl.rows() {
        let row = xl.row(r);
        let q = lorentz_inner(row, row);
        if (q + 1.0).abs() > HYPERBOLOID_TOL || row[0] <= 0.0 {
            return Err(GnsnError::Numeric(format!(
                "tangent_logmap: row {r} is off the hyperboloid (<x,x> = {q})"
            )));
        }
    }
    with_tape(xl, |t, v| t.tangent_log(v))
}

/// Column concatenation `[x | x_enc]`.
pub fn concat_encoding(x: &Matrix, encoded: &Matrix) -> Result<Matrix> {
    Matrix::hconcat(&[x, encoded])
}

/// Recorded encoding of `x`: the identity for `none`, otherwise `x`
/// concatenated with its hyperbolic image.
pub fn encode(tape: &mut Tape, x: Var, cfg: &EncodingConfig) -> Result<Var> {
    let enc = match cfg.kind {
        EncodingKind::None => return Ok(x),
        EncodingKind::Poincare => tape.poincare(x, cfg.curvature)?,
        EncodingKind::Lorentz => tape.lorentz(x)?,
        EncodingKind::Tangent => {
            let l = tape.lorentz(x)?;
            tape.tangent_log(l)?
        }
    };
    tape.concat(&[x, enc])
}
