//! Right-hand side of the convection-diffusion dynamics:
//! `dH/dt = (1 - H*) [u ⊙ (Ã^ε H)] + H* (Ã - I) H`.

mod attention;
mod homophily;
mod velocity;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{GnsnError, Result};
use crate::graph::{khop_support, Graph, SupportMask};
use crate::ode::{Dynamics, StepInfo};
use crate::tensor::{Tape, Var};

pub use attention::{attention_matrix, attention_values, convection_rhs, diffusion_rhs};
pub use homophily::{homophily_estimate, learnable_homophily, HOMOPHILY_INIT};
pub use velocity::{update_velocity, VelocityConfig, VelocityState};

/// Which terms of the dynamics are active and how they are weighted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Adaptive,
    PureDiffusion,
    PureConvection,
    EqualWeights,
    FixedVelocity(f64),
}

impl Variant {
    pub fn uses_convection(&self) -> bool {
        !matches!(self, Variant::PureDiffusion)
    }

    pub fn uses_diffusion(&self) -> bool {
        !matches!(self, Variant::PureConvection)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Adaptive => f.write_str("adaptive"),
            Variant::PureDiffusion => f.write_str("pure_diffusion"),
            Variant::PureConvection => f.write_str("pure_convection"),
            Variant::EqualWeights => f.write_str("equal_weights"),
            Variant::FixedVelocity(v) => write!(f, "fixed_velocity={v}"),
        }
    }
}

impl FromStr for Variant {
    type Err = GnsnError;

    /// Accepts the snake_case names; the fixed variant is written
    /// `fixed_velocity=2.5` (or with `:` as separator).
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" => return Ok(Variant::Adaptive),
            "pure_diffusion" => return Ok(Variant::PureDiffusion),
            "pure_convection" => return Ok(Variant::PureConvection),
            "equal_weights" => return Ok(Variant::EqualWeights),
            _ => {}
        }
        if let Some(rest) = s.strip_prefix("fixed_velocity") {
            let v = rest
                .strip_prefix('=')
                .or_else(|| rest.strip_prefix(':'))
                .and_then(|x| x.parse::<f64>().ok());
            if let Some(v) = v.filter(|v| v.is_finite() && *v >= 0.0) {
                return Ok(Variant::FixedVelocity(v));
            }
        }
        Err(GnsnError::Config(format!(
            "unknown variant '{s}' (expected adaptive, pure_diffusion, pure_convection, equal_weights or fixed_velocity=<v>)"
        )))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DynamicsParams {
    /// Hop order of the convection support.
    pub eps: usize,
    pub self_loop_weight: f64,
    pub variant: Variant,
    /// Attention projection width `d_K`.
    pub attention_dim: usize,
    pub velocity: VelocityConfig,
}

impl Default for DynamicsParams {
    fn default() -> Self {
        DynamicsParams {
            eps: 1,
            self_loop_weight: 1.0,
            variant: Variant::Adaptive,
            attention_dim: 16,
            velocity: VelocityConfig::default(),
        }
    }
}

impl DynamicsParams {
    pub fn validate(&self) -> Result<()> {
        if self.eps == 0 {
            return Err(GnsnError::Config("eps must be >= 1".into()));
        }
        if self.attention_dim == 0 {
            return Err(GnsnError::Config("attention_dim must be >= 1".into()));
        }
        if !self.self_loop_weight.is_finite() || self.self_loop_weight <= 0.0 {
            return Err(GnsnError::Config(format!(
                "self_loop_weight must be > 0 so every attention row is non-empty, got {}",
                self.self_loop_weight
            )));
        }
        self.velocity.validate()
    }
}

/// Attention supports for the two terms: one hop for diffusion and `eps`
/// hops for convection (shared when `eps = 1`).
#[derive(Clone, Debug)]
pub struct Supports {
    diffusion: SupportMask,
    convection: Option<SupportMask>,
}

impl Supports {
    pub fn new(g: &Graph, params: &DynamicsParams) -> Result<Self> {
        params.validate()?;
        let diffusion = khop_support(g, 1, params.self_loop_weight)?;
        let convection = if params.eps > 1 {
            Some(khop_support(g, params.eps, params.self_loop_weight)?)
        } else {
            None
        };
        Ok(Supports { diffusion, convection })
    }

    pub fn diffusion(&self) -> &SupportMask {
        &self.diffusion
    }

    pub fn convection(&self) -> &SupportMask {
        self.convection.as_ref().unwrap_or(&self.diffusion)
    }
}

/// Attention and aggregation recorded for one state.
#[derive(Clone, Copy)]
struct StateCache {
    state: Var,
    att_diff: Option<Var>,
    conv_agg: Option<Var>,
}

/// Recorded dynamics for one forward pass. Velocity is accumulated once per
/// step from the pre-step state and committed when the solver accepts the
/// step.
pub struct GnsnDynamics<'a> {
    params: &'a DynamicsParams,
    supports: &'a Supports,
    wk: Var,
    wq: Var,
    h_star: Var,
    velocity: VelocityState,
    pending: Option<VelocityState>,
    step: StepInfo,
    cache: Option<StateCache>,
}

impl<'a> GnsnDynamics<'a> {
    /// `h_star` is a `1 x 1` value in (0, 1); `velocity` the initial state.
    pub fn new(
        params: &'a DynamicsParams,
        supports: &'a Supports,
        tape: &Tape,
        wk: Var,
        wq: Var,
        h_star: Var,
        velocity: VelocityState,
    ) -> Result<Self> {
        let hs = tape.value(h_star);
        if hs.shape() != (1, 1) || !(hs.item() > 0.0 && hs.item() < 1.0) {
            return Err(GnsnError::Config(format!(
                "homophily weight must be a scalar in (0, 1), got {:?}",
                hs.as_slice()
            )));
        }
        Ok(GnsnDynamics {
            params,
            supports,
            wk,
            wq,
            h_star,
            velocity,
            pending: None,
            step: StepInfo::default(),
            cache: None,
        })
    }

    /// Velocity state after the last committed step.
    pub fn velocity_state(&self) -> &VelocityState {
        &self.velocity
    }

    fn current_velocity(&self) -> &VelocityState {
        self.pending.as_ref().unwrap_or(&self.velocity)
    }

    fn shares_support(&self) -> bool {
        self.params.eps == 1
    }

    fn prepare(&mut self, tape: &mut Tape, state: Var) -> Result<StateCache> {
        if let Some(c) = self.cache.filter(|c| c.state == state) {
            return Ok(c);
        }
        let variant = self.params.variant;
        let att_diff = if variant.uses_diffusion() || self.shares_support() {
            Some(attention_matrix(tape, state, self.wk, self.wq, self.supports.diffusion())?)
        } else {
            None
        };
        let att_conv = if self.shares_support() {
            att_diff
        } else {
            Some(attention_matrix(tape, state, self.wk, self.wq, self.supports.convection())?)
        };
        let conv_agg = match att_conv {
            Some(a) => Some(tape.spmm(a, self.supports.convection().pattern(), state)?),
            None => None,
        };
        let c = StateCache {
            state,
            att_diff,
            conv_agg,
        };
        self.cache = Some(c);
        Ok(c)
    }

    fn check(&self, tape: &Tape, v: Var, term: &str) -> Result<()> {
        if tape.value(v).is_finite() {
            Ok(())
        } else {
            Err(GnsnError::Divergence {
                step: self.step.index,
                solver: self.step.solver.to_string(),
                term: term.to_string(),
            })
        }
    }

    /// `(convection, diffusion)` coefficients.
    fn coefficients(&self, tape: &mut Tape) -> Result<(Coef, Coef)> {
        Ok(match self.params.variant {
            Variant::PureDiffusion => (Coef::Const(0.0), Coef::Const(1.0)),
            Variant::PureConvection => (Coef::Const(1.0), Coef::Const(0.0)),
            Variant::EqualWeights => (Coef::Const(0.5), Coef::Const(0.5)),
            Variant::Adaptive | Variant::FixedVelocity(_) => {
                let neg = tape.scale(self.h_star, -1.0)?;
                let conv = tape.add_scalar(neg, 1.0)?;
                (Coef::Var(conv), Coef::Var(self.h_star))
            }
        })
    }
}

#[derive(Clone, Copy)]
enum Coef {
    Const(f64),
    Var(Var),
}

impl Coef {
    fn apply(self, tape: &mut Tape, x: Var) -> Result<Option<Var>> {
        match self {
            Coef::Const(0.0) => Ok(None),
            Coef::Const(1.0) => Ok(Some(x)),
            Coef::Const(c) => tape.scale(x, c).map(Some),
            Coef::Var(v) => tape.scalar_mul(v, x).map(Some),
        }
    }
}

impl Dynamics for GnsnDynamics<'_> {
    fn begin_step(&mut self, tape: &mut Tape, state: Var, step: &StepInfo) -> Result<()> {
        self.step = *step;
        self.pending = None;
        if !self.params.variant.uses_convection() {
            return Ok(());
        }
        if self.velocity.is_fixed() {
            self.pending = Some(update_velocity(tape, &self.velocity, state, step.t, step.h)?);
            return Ok(());
        }
        let cache = self.prepare(tape, state)?;
        let flux = cache.conv_agg.expect("convection aggregation is always prepared");
        self.check(tape, flux, "flux")?;
        self.pending = Some(update_velocity(tape, &self.velocity, flux, step.t, step.h)?);
        Ok(())
    }

    fn rhs(&mut self, tape: &mut Tape, state: Var, _t: f64) -> Result<Var> {
        let cache = self.prepare(tape, state)?;
        let (c_conv, c_diff) = self.coefficients(tape)?;
        let conv = match (self.params.variant.uses_convection(), cache.conv_agg) {
            (true, Some(agg)) => {
                let u = self.current_velocity().velocity();
                let term = convection_rhs_from_agg(tape, agg, u)?;
                self.check(tape, term, "convection")?;
                c_conv.apply(tape, term)?
            }
            _ => None,
        };
        let diff = match (self.params.variant.uses_diffusion(), cache.att_diff) {
            (true, Some(att)) => {
                let term = diffusion_rhs(tape, state, att, self.supports.diffusion().pattern())?;
                self.check(tape, term, "diffusion")?;
                c_diff.apply(tape, term)?
            }
            _ => None,
        };
        match (conv, diff) {
            (Some(a), Some(b)) => tape.add(a, b),
            (Some(a), None) | (None, Some(a)) => Ok(a),
            (None, None) => tape.scale(state, 0.0),
        }
    }

    fn commit_step(&mut self) {
        if let Some(p) = self.pending.take() {
            self.velocity = p;
        }
    }

    /// `None` when the variant has no convection term.
    fn velocity(&self) -> Option<Var> {
        self.params.variant.uses_convection().then(|| self.velocity.velocity())
    }
}

/// Convection from a precomputed aggregation `Ã^ε H`.
fn convection_rhs_from_agg(tape: &mut Tape, agg: Var, u: Var) -> Result<Var> {
    if let Some(bad) = tape.value(u).as_slice().iter().find(|&&v| !(v >= 0.0)) {
        return Err(GnsnError::Numeric(format!("velocity invariant violated: u = {bad}")));
    }
    tape.row_scale(u, agg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::test_graphs::from_edges;
    use crate::tensor::Matrix;

    fn variant(s: &str) -> Variant {
        s.parse().unwrap()
    }

    #[test]
    fn variant_parsing() {
        assert_eq!(variant("pure_diffusion"), Variant::PureDiffusion);
        assert_eq!(variant("fixed_velocity=2.5"), Variant::FixedVelocity(2.5));
        assert_eq!(variant("fixed_velocity:0"), Variant::FixedVelocity(0.0));
        assert!("fixed_velocity=-1".parse::<Variant>().is_err());
        assert!("nope".parse::<Variant>().is_err());
        for v in ["adaptive", "equal_weights", "fixed_velocity=3"] {
            assert_eq!(variant(v).to_string(), v);
        }
        let json = serde_json::to_string(&Variant::FixedVelocity(1.5)).unwrap();
        assert_eq!(serde_json::from_str::<Variant>(&json).unwrap(), Variant::FixedVelocity(1.5));
    }

    struct Setup {
        g: Graph,
        h: Matrix,
        wk: Matrix,
        wq: Matrix,
    }

    fn setup() -> Setup {
        let mut g = from_edges(&[0, 1, 0], &[(0, 1), (1, 2)]);
        g = Graph::new(
            2,
            Matrix::from_rows(&[vec![0.3, -0.2], vec![1.0, 0.5], vec![-0.6, 0.9]]).unwrap(),
            g.labels().to_vec(),
            &g.edges(),
            Default::default(),
        )
        .unwrap();
        Setup {
            h: g.features().clone(),
            g,
            wk: Matrix::from_rows(&[vec![0.8, -0.1], vec![0.3, 0.6]]).unwrap(),
            wq: Matrix::from_rows(&[vec![-0.4, 0.2], vec![0.5, 1.1]]).unwrap(),
        }
    }

    /// One rhs evaluation at t = 0 after beginning a step of size `tau`.
    fn eval(s: &Setup, params: &DynamicsParams, h_star: f64, tau: f64) -> (Matrix, Matrix) {
        let supports = Supports::new(&s.g, params).unwrap();
        let mut t = Tape::new();
        let (wk, wq) = (t.constant(s.wk.clone()), t.constant(s.wq.clone()));
        let hs = t.constant(Matrix::scalar(h_star));
        let theta = t.constant(Matrix::zeros(3, 1));
        let vs = match params.variant {
            Variant::FixedVelocity(v) => VelocityState::fixed(&mut t, 3, v, 1.0).unwrap(),
            _ => VelocityState::new(&mut t, theta, 1.0, &params.velocity).unwrap(),
        };
        let mut dynamics = GnsnDynamics::new(params, &supports, &t, wk, wq, hs, vs).unwrap();
        let h = t.constant(s.h.clone());
        let info = StepInfo {
            index: 0,
            t: 0.0,
            h: tau,
            solver: "test",
        };
        dynamics.begin_step(&mut t, h, &info).unwrap();
        let out = dynamics.rhs(&mut t, h, 0.0).unwrap();
        let u = t.value(dynamics.current_velocity().velocity()).clone();
        (t.value(out).clone(), u)
    }

    fn independent_terms(s: &Setup, params: &DynamicsParams, u: &Matrix) -> (Matrix, Matrix) {
        let sup = Supports::new(&s.g, params).unwrap();
        let a1 = attention_values(&s.h, &s.wk, &s.wq, sup.diffusion()).unwrap().to_dense();
        let ae = attention_values(&s.h, &s.wk, &s.wq, sup.convection()).unwrap().to_dense();
        let diff = a1.matmul(&s.h).unwrap().zip_map(&s.h, |a, b| a - b);
        let mut conv = ae.matmul(&s.h).unwrap();
        for r in 0..3 {
            let ur = u.get(r, 0);
            conv.row_mut(r).iter_mut().for_each(|v| *v *= ur);
        }
        (conv, diff)
    }

    #[test]
    fn mixed_is_weighted_sum_of_terms() {
        let s = setup();
        for eps in [1, 2] {
            let params = DynamicsParams {
                eps,
                ..Default::default()
            };
            let (out, u) = eval(&s, &params, 0.3, 0.25);
            let (conv, diff) = independent_terms(&s, &params, &u);
            for k in 0..out.len() {
                let expect = 0.7 * conv.as_slice()[k] + 0.3 * diff.as_slice()[k];
                assert!((out.as_slice()[k] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn variant_overrides() {
        let s = setup();
        let run = |v: Variant| {
            let p = DynamicsParams {
                variant: v,
                ..Default::default()
            };
            let (out, u) = eval(&s, &p, 0.3, 0.25);
            let (conv, diff) = independent_terms(&s, &p, &u);
            (out, conv, diff)
        };
        let (out, _, diff) = run(Variant::PureDiffusion);
        assert_eq!(out, diff);
        let (out, conv, _) = run(Variant::PureConvection);
        assert_eq!(out, conv);
        let (out, conv, diff) = run(Variant::EqualWeights);
        let expect = conv.zip_map(&diff, |a, b| 0.5 * a + 0.5 * b);
        assert!(out.zip_map(&expect, |a, b| a - b).max_abs() < 1e-12);
        let (out, conv, diff) = run(Variant::FixedVelocity(2.0));
        let expect = conv.zip_map(&diff, |a, b| 0.7 * a + 0.3 * b);
        assert!(out.zip_map(&expect, |a, b| a - b).max_abs() < 1e-12);
    }

    #[test]
    fn fixed_points() {
        let mut s = setup();
        s.h = Matrix::filled(3, 2, 0.4);
        let p = DynamicsParams {
            variant: Variant::PureDiffusion,
            ..Default::default()
        };
        assert!(eval(&s, &p, 0.5, 0.1).0.max_abs() < 1e-15);

        let s = setup();
        let p = DynamicsParams {
            variant: Variant::PureConvection,
            velocity: VelocityConfig {
                u_init: 0.0,
                ..Default::default()
            },
            ..Default::default()
        };
        // u = 0 before any flux; a zero-length window keeps it there
        let supports = Supports::new(&s.g, &p).unwrap();
        let mut t = Tape::new();
        let (wk, wq) = (t.constant(s.wk.clone()), t.constant(s.wq.clone()));
        let hs = t.constant(Matrix::scalar(0.5));
        let vs = VelocityState::fixed(&mut t, 3, 0.0, 1.0).unwrap();
        let mut d = GnsnDynamics::new(&p, &supports, &t, wk, wq, hs, vs).unwrap();
        let h = t.constant(s.h.clone());
        let out = d.rhs(&mut t, h, 0.0).unwrap();
        assert_eq!(t.value(out).max_abs(), 0.0);
    }

    #[test]
    fn pure_diffusion_zero_iff_constant_per_component() {
        // two components: {0,1,2} path and {3,4} edge
        let base = from_edges(&[0, 0, 0, 1, 1], &[(0, 1), (1, 2), (3, 4)]);
        let p = DynamicsParams {
            variant: Variant::PureDiffusion,
            ..Default::default()
        };
        let cases = [
            (vec![1.0, 1.0, 1.0, -2.0, -2.0], true),
            (vec![1.0, 1.0, 1.0, -2.0, -1.0], false),
            (vec![0.0, 1.0, 1.0, 3.0, 3.0], false),
        ];
        for (vals, zero) in cases {
            let g = Graph::new(2, Matrix::column(&vals), base.labels().to_vec(), &base.edges(), Default::default()).unwrap();
            let s = Setup {
                h: g.features().clone(),
                g,
                wk: Matrix::scalar(0.7),
                wq: Matrix::scalar(-0.4),
            };
            let supports = Supports::new(&s.g, &p).unwrap();
            let mut t = Tape::new();
            let (wk, wq) = (t.constant(s.wk.clone()), t.constant(s.wq.clone()));
            let hs = t.constant(Matrix::scalar(0.5));
            let theta = t.constant(Matrix::zeros(5, 1));
            let vs = VelocityState::new(&mut t, theta, 1.0, &p.velocity).unwrap();
            let mut d = GnsnDynamics::new(&p, &supports, &t, wk, wq, hs, vs).unwrap();
            let h = t.constant(s.h.clone());
            let out = d.rhs(&mut t, h, 0.0).unwrap();
            assert_eq!(t.value(out).max_abs() < 1e-15, zero, "{vals:?}");
        }
    }

    #[test]
    fn divergence_names_step_and_term() {
        let mut s = setup();
        s.h.set(1, 0, f64::NAN);
        let p = DynamicsParams::default();
        let supports = Supports::new(&s.g, &p).unwrap();
        let mut t = Tape::new();
        let (wk, wq) = (t.constant(s.wk.clone()), t.constant(s.wq.clone()));
        let hs = t.constant(Matrix::scalar(0.5));
        let vs = VelocityState::fixed(&mut t, 3, 1.0, 1.0).unwrap();
        let mut d = GnsnDynamics::new(&p, &supports, &t, wk, wq, hs, vs).unwrap();
        d.step.index = 7;
        let h = t.constant(s.h.clone());
        match d.rhs(&mut t, h, 0.0) {
            Err(GnsnError::Divergence { step, term, .. }) => {
                assert_eq!(step, 7);
                assert_eq!(term, "convection");
            }
            other => panic!("expected divergence, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn invalid_params() {
        let bad = [
            DynamicsParams { eps: 0, ..Default::default() },
            DynamicsParams { self_loop_weight: 0.0, ..Default::default() },
            DynamicsParams { attention_dim: 0, ..Default::default() },
        ];
        for p in bad {
            assert!(p.validate().is_err());
        }
        let s = setup();
        let p = DynamicsParams::default();
        let sup = Supports::new(&s.g, &p).unwrap();
        let mut t = Tape::new();
        let w = t.constant(s.wk.clone());
        let hs = t.constant(Matrix::scalar(1.0));
        let vs = VelocityState::fixed(&mut t, 3, 1.0, 1.0).unwrap();
        assert!(GnsnDynamics::new(&p, &sup, &t, w, w, hs, vs).is_err());
    }
}
