use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::homophily_estimate;
use crate::error::{GnsnError, Result};
use crate::graph::{Graph, Split};
use crate::model::{AdamW, AdamWConfig, Model, ModelConfig, H_STAR};
use crate::tensor::{softmax_in_place, Matrix, ParameterStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            patience: 100,
            seed: 0,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(GnsnError::Config("epochs must be >= 1".into()));
        }
        if self.patience == 0 {
            return Err(GnsnError::Config("patience must be >= 1".into()));
        }
        self.optimizer.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub valid_acc: f64,
    pub valid_loss: f64,
    pub h_star: f64,
    pub mean_velocity: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunResult {
    pub seed: u64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_valid_acc: f64,
    pub test_acc: f64,
    /// `H*` stored with the best parameters.
    pub final_h_star: f64,
    /// Mean velocity of the best parameters' evaluation pass.
    pub final_mean_velocity: Option<f64>,
    pub curves: Vec<EpochRecord>,
    pub wall_clock_seconds: f64,
    #[serde(skip)]
    pub best_params: ParameterStore,
    #[serde(skip)]
    pub last_params: ParameterStore,
}

impl RunResult {
    /// Serialized result without the timing field.
    pub fn metrics_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("plain data serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("wall_clock_seconds");
        }
        v
    }

    /// Learning curves as CSV.
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_acc,valid_acc,valid_loss,h_star,mean_velocity\n");
        for r in &self.curves {
            let u = r.mean_velocity.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.epoch, r.train_loss, r.train_acc, r.valid_acc, r.valid_loss, r.h_star, u
            ));
        }
        out
    }
}

/// Fraction of `mask` whose lowest-index argmax equals the label.
pub fn accuracy(logits: &Matrix, labels: &[usize], mask: &[usize]) -> Result<f64> {
    if mask.is_empty() {
        return Err(GnsnError::Config("accuracy over an empty node set".into()));
    }
    let pred = logits.argmax_rows();
    let hits = mask.iter().filter(|&&i| pred[i] == labels[i]).count();
    Ok(hits as f64 / mask.len() as f64)
}

pub fn evaluate(model: &Model, params: &ParameterStore, g: &Graph, mask: &[usize]) -> Result<f64> {
    let f = model.forward(params, g, None)?;
    accuracy(f.logits(), g.labels(), mask)
}

fn mean_ce(logits: &Matrix, labels: &[usize], rows: &[usize]) -> f64 {
    let total: f64 = rows
        .iter()
        .map(|&r| {
            let row = logits.row(r);
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - row[labels[r]]
        })
        .sum();
    total / rows.len() as f64
}

fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut p = logits.clone();
    for r in 0..p.rows() {
        softmax_in_place(p.row_mut(r));
    }
    p
}

/// Full-graph training with early stopping on validation accuracy (ties go
/// to the lower validation loss). The returned test accuracy is that of the
/// best snapshot.
pub fn train(cfg: &ModelConfig, tc: &TrainConfig, g: &Graph, split: &Split) -> Result<RunResult> {
    tc.validate()?;
    for (name, set) in [("train", &split.train), ("valid", &split.valid), ("test", &split.test)] {
        if set.is_empty() {
            return Err(GnsnError::Config(format!("{name} set is empty")));
        }
    }
    let started = Instant::now();
    let model = Model::new(cfg.clone(), g)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut params = model.init_params(&mut init_rng);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(tc.seed);
    dropout_rng.set_stream(1);
    let mut opt = AdamW::new(tc.optimizer)?;

    let mut curves = Vec::with_capacity(tc.epochs);
    let mut best: Option<(usize, f64, f64, ParameterStore)> = None;
    let mut since_best = 0usize;

    for epoch in 0..tc.epochs {
        let mut f = model.forward(&params, g, Some(&mut dropout_rng))?;
        let loss = f.tape.cross_entropy(f.logits, g.labels(), &split.train)?;
        let train_loss = f.tape.value(loss).item();
        if !train_loss.is_finite() {
            return Err(GnsnError::Numeric(format!("non-finite training loss at epoch {epoch}")));
        }
        let grads = f.tape.backward(loss)?;
        let mut named = params.collect_grads(&f.params, &grads);
        named.remove(H_STAR);
        opt.step(&mut params, &named)?;

        let eval = model.forward(&params, g, None)?;
        let logits = eval.logits();
        let valid_acc = accuracy(logits, g.labels(), &split.valid)?;
        let valid_loss = mean_ce(logits, g.labels(), &split.valid);
        let h_star = params.get(H_STAR)?.item();
        curves.push(EpochRecord {
            epoch,
            train_loss,
            train_acc: accuracy(logits, g.labels(), &split.train)?,
            valid_acc,
            valid_loss,
            h_star,
            mean_velocity: eval.velocity().map(|u| u.sum() / u.len() as f64),
        });

        let improved = match &best {
            None => true,
            Some((_, acc, vl, _)) => valid_acc > *acc || (valid_acc == *acc && valid_loss < *vl),
        };
        if improved {
            best = Some((epoch, valid_acc, valid_loss, params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
        }

        let next = homophily_estimate(&softmax_rows(logits), g, &split.train)?;
        params.insert(H_STAR, Matrix::scalar(next));

        if since_best >= tc.patience {
            break;
        }
    }

    let (best_epoch, best_valid_acc, _, best_params) = best.expect("at least one epoch ran");
    let f = model.forward(&best_params, g, None)?;
    Ok(RunResult {
        seed: tc.seed,
        epochs_run: curves.len(),
        best_epoch,
        best_valid_acc,
        test_acc: accuracy(f.logits(), g.labels(), &split.test)?,
        final_h_star: best_params.get(H_STAR)?.item(),
        final_mean_velocity: f.velocity().map(|u| u.sum() / u.len() as f64),
        curves,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        best_params,
        last_params: params,
    })
}
