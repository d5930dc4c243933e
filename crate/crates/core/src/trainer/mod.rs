//! One optimizer for every model class: SGD with heavy-ball momentum on the
//! mean squared error against ±1 labels.
//!
//! Update rule: `v ← μ·v + g`, `w ← w − η·v`, velocity starting at zero,
//! where `g` is the gradient of the batch loss `mean_b (pred_b − y_b)²`.
//! Batches come from a full reshuffle every epoch (last short batch kept).
//! Metrics are logged on a geometric schedule of SGD-batch counts.

mod model;
mod objective;
mod schedule;
mod solve;

use std::fs;
use std::path::Path;

use num_traits::Zero;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use model::{ParametricModel, ZeroOutputModel};
pub use objective::{KernelObjective, ModelObjective, Objective};
pub use schedule::CheckpointSchedule;
pub use solve::{direct_solve, DirectSolveResult, LambdaOutcome};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::kernel::KernelMatrix;
use crate::real::Real;

fn default_ratio() -> f64 {
    1.1
}

fn default_divergence() -> f64 {
    1e6
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    #[serde(default)]
    pub momentum: f64,
    /// Samples per batch; absent means full-batch gradient descent.
    #[serde(default)]
    pub batch_size: Option<usize>,
    /// Hard cap on SGD batches.
    pub max_steps: u64,
    /// Stop at the first checkpoint whose full train loss is at or below this.
    #[serde(default)]
    pub target_train_loss: Option<f64>,
    #[serde(default)]
    pub shuffle_seed: u64,
    #[serde(default = "default_ratio")]
    pub checkpoint_ratio: f64,
    /// Abort once a batch loss exceeds this multiple of the initial loss.
    #[serde(default = "default_divergence")]
    pub divergence_factor: f64,
}

impl OptimizerConfig {
    pub fn new(learning_rate: f64, momentum: f64, batch_size: Option<usize>, max_steps: u64) -> Self {
        OptimizerConfig {
            learning_rate,
            momentum,
            batch_size,
            max_steps,
            target_train_loss: None,
            shuffle_seed: 0,
            checkpoint_ratio: default_ratio(),
            divergence_factor: default_divergence(),
        }
    }

    pub fn validate(&self, train_size: usize) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} must lie in [0, 1)", self.momentum)));
        }
        if train_size == 0 {
            return Err(Error::Config("empty training set".into()));
        }
        if let Some(b) = self.batch_size {
            if b == 0 || b > train_size {
                return Err(Error::Config(format!(
                    "batch size {b} must be in 1..={train_size} (the training set size)"
                )));
            }
        }
        if self.checkpoint_ratio <= 1.0 {
            return Err(Error::Config("checkpoint ratio must exceed 1".into()));
        }
        Ok(())
    }

    /// Stable hash of the serialized config, for parity checks across models.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    /// SGD batches seen.
    pub step: u64,
    pub train_loss: f64,
    pub train_error: f64,
    pub test_error: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_predictions: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointLog {
    pub entries: Vec<CheckpointEntry>,
    pub schedule_ratio: f64,
}

impl CheckpointLog {
    pub fn steps(&self) -> Vec<u64> {
        self.entries.iter().map(|e| e.step).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,train_loss,train_err,test_err\n");
        for e in &self.entries {
            s.push_str(&format!("{},{:e},{},{}\n", e.step, e.train_loss, e.train_error, e.test_error));
        }
        s
    }

    /// Writes `<stem>.csv` and `<stem>.json` (schedule ratio and best entry).
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(format!("{stem}.csv")), self.to_csv())?;
        let meta = serde_json::json!({
            "schedule_ratio": self.schedule_ratio,
            "best": optimal_early_stop(self).map(|(s, e)| serde_json::json!({"step": s, "test_error": e})),
            "entries": self.entries.len(),
        });
        fs::write(dir.join(format!("{stem}.json")), serde_json::to_vec_pretty(&meta)?)?;
        Ok(())
    }
}

/// Which weight snapshots a run keeps.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnapshotPolicy {
    #[default]
    None,
    /// The weights at the optimal-early-stopping checkpoint.
    Best,
    /// Every logged checkpoint.
    All,
    /// The listed steps (each must be on the schedule to be captured).
    Steps(Vec<u64>),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainOptions {
    pub snapshots: SnapshotPolicy,
    /// Keep the full test prediction vector at every checkpoint.
    pub record_test_predictions: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot<T> {
    pub step: u64,
    pub weights: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainResult<T> {
    pub log: CheckpointLog,
    pub final_weights: Vec<T>,
    /// `(step, test_error)` under optimal early stopping.
    pub best: (u64, f64),
    pub snapshots: Vec<Snapshot<T>>,
    pub steps_run: u64,
}

impl<T: Clone> TrainResult<T> {
    pub fn snapshot(&self, step: u64) -> Result<&Snapshot<T>> {
        self.snapshots
            .iter()
            .find(|s| s.step == step)
            .ok_or(Error::MissingSnapshot(step))
    }
}

/// Classification error under `sign`, with a zero prediction counted wrong.
pub fn evaluate(predictions: &[f64], labels: &[f64]) -> f64 {
    assert_eq!(predictions.len(), labels.len(), "prediction/label length");
    if labels.is_empty() {
        return 0.0;
    }
    let wrong = predictions
        .iter()
        .zip(labels)
        .filter(|(p, y)| **p == 0.0 || p.signum() != y.signum())
        .count();
    wrong as f64 / labels.len() as f64
}

/// Entry with the minimum test error; ties go to the earlier step.
pub fn optimal_early_stop(log: &CheckpointLog) -> Option<(u64, f64)> {
    let mut best: Option<(u64, f64)> = None;
    for e in &log.entries {
        match best {
            Some((_, err)) if e.test_error >= err => {}
            _ => best = Some((e.step, e.test_error)),
        }
    }
    best
}

fn mse(pred: &[f64], y: &[f64]) -> f64 {
    pred.iter().zip(y).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / y.len().max(1) as f64
}

fn check_labels(y: &[f64]) -> Result<()> {
    if let Some(bad) = y.iter().find(|v| **v != 1.0 && **v != -1.0) {
        return Err(Error::Data(format!("label {bad} is not ±1")));
    }
    Ok(())
}

/// Runs the shared optimizer on any [`Objective`] against real-valued
/// targets. [`train`] and [`train_kernel_system`] add the ±1 label check.
pub fn run_sgd<O: Objective>(
    obj: &mut O,
    y_train: &[f64],
    y_test: &[f64],
    cfg: &OptimizerConfig,
    opts: &TrainOptions,
) -> Result<TrainResult<O::Scalar>> {
    type S<O> = <O as Objective>::Scalar;
    let n = obj.num_train();
    cfg.validate(n)?;
    if y_train.len() != n {
        return Err(Error::Length {
            expected: n,
            got: y_train.len(),
        });
    }
    if y_test.len() != obj.num_test() {
        return Err(Error::Length {
            expected: obj.num_test(),
            got: y_test.len(),
        });
    }
    let batch_size = cfg.batch_size.unwrap_or(n);
    let schedule = CheckpointSchedule::new(cfg.checkpoint_ratio);
    let lr = S::<O>::of(cfg.learning_rate);
    let mu = S::<O>::of(cfg.momentum);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut velocity = vec![S::<O>::zero(); obj.params().len()];
    let mut entries = Vec::new();
    let mut snapshots = Vec::new();
    let mut best: Option<(u64, f64)> = None;

    let mut log_checkpoint = |obj: &O, step: u64, entries: &mut Vec<CheckpointEntry>, snapshots: &mut Vec<Snapshot<S<O>>>| -> Result<CheckpointEntry> {
        let train_pred: Vec<f64> = obj.predict_all_train()?.into_iter().map(|v| v.f64()).collect();
        let test_pred: Vec<f64> = obj.predict_test()?.into_iter().map(|v| v.f64()).collect();
        let entry = CheckpointEntry {
            step,
            train_loss: mse(&train_pred, y_train),
            train_error: evaluate(&train_pred, y_train),
            test_error: evaluate(&test_pred, y_test),
            test_predictions: opts.record_test_predictions.then_some(test_pred),
        };
        let improved = best.is_none_or(|(_, e)| entry.test_error < e);
        if improved {
            best = Some((step, entry.test_error));
        }
        let keep = match &opts.snapshots {
            SnapshotPolicy::None => false,
            SnapshotPolicy::Best => improved,
            SnapshotPolicy::All => true,
            SnapshotPolicy::Steps(s) => s.contains(&step),
        };
        if keep {
            if opts.snapshots == SnapshotPolicy::Best {
                snapshots.clear();
            }
            snapshots.push(Snapshot {
                step,
                weights: obj.params().to_vec(),
            });
        }
        entries.push(entry.clone());
        Ok(entry)
    };

    let initial = log_checkpoint(obj, 0, &mut entries, &mut snapshots)?;
    let limit = cfg.divergence_factor * initial.train_loss.max(1e-12);
    let mut next_checkpoint = schedule.next_after(0);
    let mut last_logged = 0;
    let mut step = 0;
    let reached_target = |e: &CheckpointEntry| cfg.target_train_loss.is_some_and(|t| e.train_loss <= t);

    if !reached_target(&initial) {
        while step < cfg.max_steps {
            step += 1;
            if cursor >= n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let end = (cursor + batch_size).min(n);
            let batch = &order[cursor..end];
            cursor = end;

            let pred = obj.predict_train(batch)?;
            let b = batch.len();
            let mut loss = 0.0;
            let cot: Vec<S<O>> = batch
                .iter()
                .zip(&pred)
                .map(|(&i, p)| {
                    let r = p.f64() - y_train[i];
                    loss += r * r;
                    S::<O>::of(2.0 * r / b as f64)
                })
                .collect();
            loss /= b as f64;
            if !loss.is_finite() || loss > limit {
                return Err(Error::Diverged { step, loss, limit });
            }
            let grad = obj.gradient(batch, &cot)?;
            for ((w, v), g) in obj.params_mut().iter_mut().zip(velocity.iter_mut()).zip(grad) {
                *v = mu * *v + g;
                *w -= lr * *v;
            }

            if step == next_checkpoint {
                let e = log_checkpoint(obj, step, &mut entries, &mut snapshots)?;
                last_logged = step;
                next_checkpoint = schedule.next_after(step);
                if reached_target(&e) {
                    break;
                }
            }
        }
        if last_logged != step {
            log_checkpoint(obj, step, &mut entries, &mut snapshots)?;
        }
    }

    let log = CheckpointLog {
        entries,
        schedule_ratio: cfg.checkpoint_ratio,
    };
    let best = optimal_early_stop(&log).expect("log has the initial entry");
    Ok(TrainResult {
        log,
        final_weights: obj.params().to_vec(),
        best,
        snapshots,
        steps_run: step,
    })
}

/// Trains a network, Taylor model or zero-output wrapper in place.
pub fn train<T: Real, M: ParametricModel<T>>(
    model: &mut M,
    data: &LabeledDataset,
    test: &LabeledDataset,
    cfg: &OptimizerConfig,
    opts: &TrainOptions,
) -> Result<TrainResult<T>> {
    check_labels(&data.labels)?;
    check_labels(&test.labels)?;
    let mut obj = ModelObjective::new(model, data, test)?;
    run_sgd(&mut obj, &data.labels, &test.labels, cfg, opts)
}

/// Trains `f(x) = Σ_i a_i K(x, x_i)` from `a = 0` with the shared optimizer.
///
/// The gradient step is taken in function space: a batch residual `r_b`
/// moves only the coefficient of its own sample, `a_b ← a_b − η·2r_b/B`
/// (through momentum). This is exactly the dynamics of the weight-space
/// linear model whose features generate `K`.
pub fn train_kernel_system(
    k_train: &KernelMatrix,
    k_test_train: &KernelMatrix,
    y: &[f64],
    y_test: &[f64],
    cfg: &OptimizerConfig,
    opts: &TrainOptions,
) -> Result<TrainResult<f64>> {
    check_labels(y)?;
    check_labels(y_test)?;
    let mut obj = KernelObjective::new(k_train.values.view(), k_test_train.values.view())?;
    run_sgd(&mut obj, y, y_test, cfg, opts)
}
