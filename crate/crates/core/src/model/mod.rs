//! Encoder, ODE block and decoder assembled into a node classifier, with the
//! optimizer and the early-stopping training loop.

mod optim;
mod train;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::dynamics::{DynamicsParams, GnsnDynamics, Supports, Variant, VelocityState, HOMOPHILY_INIT};
use crate::encoding::{encode, EncodingConfig, EncodingKind};
use crate::error::{GnsnError, Result};
use crate::graph::Graph;
use crate::ode::{integrate, SolverConfig, Trajectory};
use crate::tensor::{BoundParams, Matrix, ParameterStore, Tape, Var};

pub use optim::{AdamW, AdamWConfig};
pub use train::{accuracy, evaluate, train, EpochRecord, RunResult, TrainConfig};

/// Name of the stored homophily weight; it is part of every snapshot but the
/// optimizer never steps it.
pub const H_STAR: &str = "h_star";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub input_dropout: f64,
    pub dropout: f64,
    pub encoding: EncodingConfig,
    pub dynamics: DynamicsParams,
    pub solver: SolverConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dim: 64,
            input_dropout: 0.5,
            dropout: 0.2,
            encoding: EncodingConfig::default(),
            dynamics: DynamicsParams::default(),
            solver: SolverConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 {
            return Err(GnsnError::Config("hidden_dim must be >= 1".into()));
        }
        for (name, r) in [("input_dropout", self.input_dropout), ("dropout", self.dropout)] {
            if !(0.0..1.0).contains(&r) {
                return Err(GnsnError::Config(format!("{name} must be in [0, 1), got {r}")));
            }
        }
        self.encoding.validate()?;
        self.dynamics.validate()?;
        self.solver.validate()
    }
}

/// A configuration bound to one graph: supports are computed once.
#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    supports: Supports,
    num_nodes: usize,
    num_features: usize,
    num_classes: usize,
}

/// Everything recorded by one forward pass.
pub struct Forward {
    pub tape: Tape,
    pub params: BoundParams,
    pub logits: Var,
    pub trajectory: Trajectory,
}

impl Forward {
    pub fn logits(&self) -> &Matrix {
        self.tape.value(self.logits)
    }

    /// Per-node velocity after integration, when the variant tracks one.
    pub fn velocity(&self) -> Option<&Matrix> {
        self.trajectory.final_velocity.map(|v| self.tape.value(v))
    }

    pub fn final_state(&self) -> &Matrix {
        self.tape.value(self.trajectory.final_state)
    }
}

fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a).expect("finite bounds");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Matrix::from_vec(rows, cols, data).expect("sizes agree")
}

impl Model {
    pub fn new(cfg: ModelConfig, g: &Graph) -> Result<Self> {
        cfg.validate()?;
        let supports = Supports::new(g, &cfg.dynamics)?;
        Ok(Model {
            cfg,
            supports,
            num_nodes: g.num_nodes(),
            num_features: g.num_features(),
            num_classes: g.num_classes(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn supports(&self) -> &Supports {
        &self.supports
    }

    fn check_graph(&self, g: &Graph) -> Result<()> {
        if (g.num_nodes(), g.num_features(), g.num_classes()) != (self.num_nodes, self.num_features, self.num_classes) {
            return Err(GnsnError::shape(
                "Model",
                format!(
                    "model built for {} nodes / {} features / {} classes, graph has {} / {} / {}",
                    self.num_nodes,
                    self.num_features,
                    self.num_classes,
                    g.num_nodes(),
                    g.num_features(),
                    g.num_classes()
                ),
            ));
        }
        Ok(())
    }

    /// Expected parameter shapes by name.
    pub fn parameter_shapes(&self) -> Vec<(&'static str, (usize, usize))> {
        let hd = self.cfg.hidden_dim;
        let dk = self.cfg.dynamics.attention_dim;
        let mut shapes = vec![("lift_w", (self.num_features, hd)), ("lift_b", (1, hd))];
        if self.cfg.encoding.kind != EncodingKind::None {
            shapes.push(("fuse_w", (self.cfg.encoding.output_dim(hd), hd)));
            shapes.push(("fuse_b", (1, hd)));
        }
        shapes.extend([
            ("wk", (hd, dk)),
            ("wq", (hd, dk)),
            ("time_logits", (self.num_nodes, 1)),
            ("dec_w", (hd, self.num_classes)),
            ("dec_b", (1, self.num_classes)),
            (H_STAR, (1, 1)),
        ]);
        shapes
    }

    /// Glorot-uniform weights, zero biases and window logits, `H* = 0.5`.
    pub fn init_params(&self, rng: &mut impl Rng) -> ParameterStore {
        let mut store = ParameterStore::new();
        for (name, (r, c)) in self.parameter_shapes() {
            let value = match name {
                "lift_w" | "fuse_w" | "wk" | "wq" | "dec_w" => glorot(r, c, rng),
                H_STAR => Matrix::scalar(HOMOPHILY_INIT),
                _ => Matrix::zeros(r, c),
            };
            store.insert(name, value);
        }
        store
    }

    pub fn check_params(&self, params: &ParameterStore) -> Result<()> {
        for (name, shape) in self.parameter_shapes() {
            let m = params.get(name)?;
            if m.shape() != shape {
                return Err(GnsnError::shape(
                    "Model::check_params",
                    format!("{name} is {:?}, expected {shape:?}", m.shape()),
                ));
            }
        }
        Ok(())
    }

    /// Input dropout, affine lift, encoding and fuse, integration, dropout,
    /// affine decode. Dropout is active only when `rng` is given.
    pub fn forward(&self, params: &ParameterStore, g: &Graph, rng: Option<&mut ChaCha8Rng>) -> Result<Forward> {
        self.check_params(params)?;
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        let (logits, trajectory) = self.forward_on(&mut tape, &p, g, rng)?;
        Ok(Forward {
            tape,
            params: p,
            logits,
            trajectory,
        })
    }

    /// [`Model::forward`] on an existing tape with parameters already bound.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        g: &Graph,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, Trajectory)> {
        self.check_graph(g)?;
        let x = tape.constant(g.features().clone());
        let x = match rng.as_deref_mut() {
            Some(r) => tape.dropout(x, self.cfg.input_dropout, r)?,
            None => x,
        };
        let lifted = tape.matmul(x, p.get("lift_w")?)?;
        let lifted = tape.add_row_bias(lifted, p.get("lift_b")?)?;
        let h0 = if self.cfg.encoding.kind == EncodingKind::None {
            lifted
        } else {
            let enc = encode(tape, lifted, &self.cfg.encoding)?;
            let fused = tape.matmul(enc, p.get("fuse_w")?)?;
            tape.add_row_bias(fused, p.get("fuse_b")?)?
        };

        let horizon = self.cfg.solver.horizon;
        let velocity = match self.cfg.dynamics.variant {
            Variant::FixedVelocity(v) => VelocityState::fixed(tape, g.num_nodes(), v, horizon)?,
            _ => VelocityState::new(tape, p.get("time_logits")?, horizon, &self.cfg.dynamics.velocity)?,
        };
        let trajectory = {
            let mut dynamics = GnsnDynamics::new(
                &self.cfg.dynamics,
                &self.supports,
                tape,
                p.get("wk")?,
                p.get("wq")?,
                p.get(H_STAR)?,
                velocity,
            )?;
            integrate(tape, &mut dynamics, h0, &self.cfg.solver)?
        };

        let mut h = trajectory.final_state;
        if let Some(r) = rng {
            h = tape.dropout(h, self.cfg.dropout, r)?;
        }
        let logits = tape.matmul(h, p.get("dec_w")?)?;
        let logits = tape.add_row_bias(logits, p.get("dec_b")?)?;
        if !tape.value(logits).is_finite() {
            return Err(GnsnError::Numeric("non-finite logits".into()));
        }
        Ok((logits, trajectory))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::test_graphs::from_edges;
    use crate::ode::SolverMethod;
    use rand::SeedableRng;

    fn five_nodes() -> Graph {
        let base = from_edges(&[0, 1, 0, 1, 0], &[(0, 1), (1, 2), (2, 3), (3, 4), (0, 4), (1, 3)]);
        let x = Matrix::from_rows(&[
            vec![1.0, 0.0, 0.5],
            vec![0.0, 1.0, -0.5],
            vec![0.8, 0.1, 0.3],
            vec![-0.2, 0.9, 0.0],
            vec![0.6, -0.3, 1.0],
        ])
        .unwrap();
        Graph::new(2, x, base.labels().to_vec(), &base.edges(), Default::default()).unwrap()
    }

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            hidden_dim: 4,
            input_dropout: 0.0,
            dropout: 0.0,
            dynamics: DynamicsParams {
                attention_dim: 3,
                ..Default::default()
            },
            solver: SolverConfig {
                method: SolverMethod::Rk4,
                step_size: 0.5,
                horizon: 1.0,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let g = five_nodes();
        let m = Model::new(small_cfg(), &g).unwrap();
        let p = m.init_params(&mut ChaCha8Rng::seed_from_u64(3));
        let a = m.forward(&p, &g, None).unwrap();
        let b = m.forward(&p, &g, None).unwrap();
        assert_eq!(a.logits(), b.logits());
        assert_eq!(a.logits().shape(), (5, 2));
    }

    #[test]
    fn zero_horizon_skips_the_ode() {
        let g = five_nodes();
        let mut cfg = small_cfg();
        cfg.solver.horizon = 0.0;
        let m = Model::new(cfg, &g).unwrap();
        let p = m.init_params(&mut ChaCha8Rng::seed_from_u64(1));
        let f = m.forward(&p, &g, None).unwrap();

        // decoder(fuse(encode(lift(X)))) evaluated by hand
        let lift = g.features().matmul(p.get("lift_w").unwrap()).unwrap();
        let lift = add_bias(&lift, p.get("lift_b").unwrap());
        let enc = crate::encoding::poincare_project(&lift, 0.1).unwrap();
        let cat = Matrix::hconcat(&[&lift, &enc]).unwrap();
        let fused = add_bias(&cat.matmul(p.get("fuse_w").unwrap()).unwrap(), p.get("fuse_b").unwrap());
        let logits = add_bias(&fused.matmul(p.get("dec_w").unwrap()).unwrap(), p.get("dec_b").unwrap());
        assert!(f.logits().zip_map(&logits, |a, b| a - b).max_abs() < 1e-12);
    }

    fn add_bias(x: &Matrix, b: &Matrix) -> Matrix {
        let mut out = x.clone();
        for r in 0..out.rows() {
            for (v, bb) in out.row_mut(r).iter_mut().zip(b.as_slice()) {
                *v += bb;
            }
        }
        out
    }

    #[test]
    fn gradients_reach_every_dynamics_parameter() {
        let g = five_nodes();
        let m = Model::new(small_cfg(), &g).unwrap();
        let p = m.init_params(&mut ChaCha8Rng::seed_from_u64(5));
        let mut f = m.forward(&p, &g, None).unwrap();
        let loss = f.tape.cross_entropy(f.logits, g.labels(), &[0, 1, 2, 3, 4]).unwrap();
        let grads = f.tape.backward(loss).unwrap();
        let named = p.collect_grads(&f.params, &grads);
        for name in ["wk", "wq", "time_logits", H_STAR, "lift_w", "fuse_w", "dec_w"] {
            assert!(named[name].max_abs() > 0.0, "{name} has zero gradient");
        }
    }

    #[test]
    fn parameter_layout_follows_encoding() {
        let g = five_nodes();
        let mut cfg = small_cfg();
        cfg.encoding.kind = EncodingKind::None;
        let m = Model::new(cfg, &g).unwrap();
        let p = m.init_params(&mut ChaCha8Rng::seed_from_u64(0));
        assert!(p.get("fuse_w").is_err());
        assert!(m.forward(&p, &g, None).is_ok());

        let mut cfg = small_cfg();
        cfg.encoding.kind = EncodingKind::Lorentz;
        let m = Model::new(cfg, &g).unwrap();
        let p = m.init_params(&mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(p.get("fuse_w").unwrap().shape(), (9, 4));
    }

    #[test]
    fn rejects_mismatched_params() {
        let g = five_nodes();
        let m = Model::new(small_cfg(), &g).unwrap();
        let mut p = m.init_params(&mut ChaCha8Rng::seed_from_u64(0));
        p.insert("wk", Matrix::zeros(2, 2));
        assert!(m.forward(&p, &g, None).is_err());
        let bad = ModelConfig {
            dropout: 1.0,
            ..small_cfg()
        };
        assert!(Model::new(bad, &g).is_err());
    }
}
