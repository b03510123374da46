//! Full-batch gradient descent for the main run and its leave-m-out siblings.
//!
//! Step `k` is mapped to continuous time `t = k·η`. A run records its weights
//! every `record_stride` steps, so all runs of one experiment share a grid.

mod dump;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LeaveOutPlan};
use crate::error::{Error, Result};
use crate::net::{MLPSpec, WeightVector};

pub use dump::{read_dump, write_dump, DumpManifest, TrajectoryDump, DUMP_SCHEMA_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitOption {
    /// The model's own initialization scheme.
    Standard,
    /// As `Standard`, then the output layer zeroed so `f(w(0), ·) ≡ 0`.
    ZeroOutput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub record_stride: usize,
    pub seed: u64,
    pub init: InitOption,
    /// Abort once the train loss exceeds this multiple of its initial value.
    #[serde(default = "default_divergence_factor")]
    pub divergence_factor: f64,
}

fn default_divergence_factor() -> f64 {
    1e3
}

impl TrainConfig {
    pub fn new(learning_rate: f64, steps: usize) -> Self {
        TrainConfig {
            learning_rate,
            steps,
            record_stride: 1,
            seed: 0,
            init: InitOption::Standard,
            divergence_factor: default_divergence_factor(),
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.record_stride = stride;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_init(mut self, init: InitOption) -> Self {
        self.init = init;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::input("learning rate must be positive and finite"));
        }
        if self.steps == 0 {
            return Err(Error::input("training needs at least one step"));
        }
        if self.record_stride == 0 || self.steps % self.record_stride != 0 {
            return Err(Error::input(format!(
                "record stride {} must divide the step count {}",
                self.record_stride, self.steps
            )));
        }
        if !(self.divergence_factor > 1.0) {
            return Err(Error::input("divergence factor must exceed 1"));
        }
        Ok(())
    }

    /// Recorded step indices `0, s, 2s, …, T`.
    pub fn record_steps(&self) -> Vec<usize> {
        (0..=self.steps).step_by(self.record_stride).collect()
    }

    pub fn initial_weights(&self, spec: &MLPSpec) -> WeightVector {
        let mut w = spec.init_weights(self.seed);
        if self.init == InitOption::ZeroOutput {
            spec.zero_output_layer(&mut w);
        }
        w
    }
}

/// Weights of one run at each recorded step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub steps: Vec<usize>,
    pub times: Vec<f64>,
    pub weights: Vec<WeightVector>,
    /// Mean loss over the run's own training indices at each record.
    pub train_loss: Vec<f64>,
    /// Sample indices this run trained on.
    pub train_indices: Vec<usize>,
}

impl TrajectoryRecord {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn final_weights(&self) -> &WeightVector {
        self.weights.last().expect("records are non-empty")
    }

    /// Index of the record taken at `step`.
    pub fn position_of_step(&self, step: usize) -> Option<usize> {
        self.steps.binary_search(&step).ok()
    }

    pub fn same_grid(&self, other: &TrajectoryRecord) -> bool {
        self.steps == other.steps && self.times == other.times
    }
}

/// Start point for leave-out runs other than the shared initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub weights: WeightVector,
}

impl Checkpoint {
    /// The full run's weights at record position `k`.
    pub fn from_record(full: &TrajectoryRecord, k: usize) -> Result<Self> {
        if k >= full.len() {
            return Err(Error::input(format!("checkpoint {k} beyond {} records", full.len())));
        }
        Ok(Checkpoint {
            step: full.steps[k],
            weights: full.weights[k].clone(),
        })
    }
}

fn check_dims(spec: &MLPSpec, data: &Dataset) -> Result<()> {
    spec.validate()?;
    if data.input_dim() != spec.input_dim() || data.target_dim() != spec.output_dim() {
        return Err(Error::shape(format!(
            "dataset is {}→{}, network is {}→{}",
            data.input_dim(),
            data.target_dim(),
            spec.input_dim(),
            spec.output_dim()
        )));
    }
    Ok(())
}

/// Gradient descent on the samples `indices`, from `w0` at `start_step` to `cfg.steps`.
fn descend(
    spec: &MLPSpec,
    data: &Dataset,
    indices: &[usize],
    cfg: &TrainConfig,
    w0: WeightVector,
    start_step: usize,
) -> Result<TrajectoryRecord> {
    if indices.is_empty() {
        return Err(Error::input("cannot train on an empty sample set"));
    }
    if start_step > cfg.steps || start_step % cfg.record_stride != 0 {
        return Err(Error::input(format!(
            "start step {start_step} is not a record point of a {}-step run",
            cfg.steps
        )));
    }
    let eta = cfg.learning_rate;
    let capacity = (cfg.steps - start_step) / cfg.record_stride + 1;
    let mut record = TrajectoryRecord {
        steps: Vec::with_capacity(capacity),
        times: Vec::with_capacity(capacity),
        weights: Vec::with_capacity(capacity),
        train_loss: Vec::with_capacity(capacity),
        train_indices: indices.to_vec(),
    };
    let mut w = w0;
    let mut initial_loss = None;
    for step in start_step..=cfg.steps {
        let (loss, grad) = spec.mean_loss_and_gradient(&w, data, indices)?;
        let reference = *initial_loss.get_or_insert(loss);
        if !loss.is_finite() || loss > cfg.divergence_factor * reference.max(f64::MIN_POSITIVE) {
            return Err(Error::Divergence { step, loss });
        }
        if step % cfg.record_stride == 0 {
            record.steps.push(step);
            record.times.push(step as f64 * eta);
            record.weights.push(w.clone());
            record.train_loss.push(loss);
        }
        if step == cfg.steps {
            break;
        }
        for (wi, gi) in w.values.iter_mut().zip(&grad) {
            *wi -= eta * gi;
        }
    }
    Ok(record)
}

/// `w_{k+1} = w_k − η ∇ℓ̄(w_k, S)` on the whole dataset.
pub fn train_full(spec: &MLPSpec, data: &Dataset, cfg: &TrainConfig) -> Result<TrajectoryRecord> {
    cfg.validate()?;
    check_dims(spec, data)?;
    let all: Vec<usize> = (0..data.len()).collect();
    descend(spec, data, &all, cfg, cfg.initial_weights(spec), 0)
}

/// One run per plan batch on `S` minus that batch, in plan order.
///
/// Runs start from the shared initialization, or from `checkpoint` when
/// given. They execute on the current rayon pool; results do not depend on
/// scheduling.
pub fn train_leave_out(
    spec: &MLPSpec,
    data: &Dataset,
    plan: &LeaveOutPlan,
    cfg: &TrainConfig,
    checkpoint: Option<&Checkpoint>,
) -> Result<Vec<TrajectoryRecord>> {
    cfg.validate()?;
    check_dims(spec, data)?;
    plan.validate()?;
    if plan.n != data.len() {
        return Err(Error::input(format!("plan covers {} samples, dataset has {}", plan.n, data.len())));
    }
    let (w0, start) = match checkpoint {
        Some(c) => (c.weights.clone(), c.step),
        None => (cfg.initial_weights(spec), 0),
    };
    plan.batches
        .par_iter()
        .map(|batch| descend(spec, data, &data.complement(batch), cfg, w0.clone(), start))
        .collect()
}

/// Per-batch `Δ⁻⁽ᵐ⁾ = ℓ̄(w⁻⁽ᵐ⁾, S₍ₘ₎) − ℓ̄(w, S₍ₘ₎)` and their mean `Δ̄`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossDifference {
    pub times: Vec<f64>,
    pub delta_bar: Vec<f64>,
    pub per_batch: Vec<Vec<f64>>,
}

fn check_family(full: &TrajectoryRecord, leave_outs: &[TrajectoryRecord], plan: &LeaveOutPlan) -> Result<()> {
    if leave_outs.len() != plan.num_batches() {
        return Err(Error::input(format!(
            "{} leave-out runs for {} plan batches",
            leave_outs.len(),
            plan.num_batches()
        )));
    }
    if leave_outs.iter().any(|r| !r.same_grid(full)) {
        return Err(Error::input("leave-out record grid differs from the full run's"));
    }
    Ok(())
}

pub fn measure_loss_difference(
    spec: &MLPSpec,
    full: &TrajectoryRecord,
    leave_outs: &[TrajectoryRecord],
    plan: &LeaveOutPlan,
    data: &Dataset,
) -> Result<LossDifference> {
    plan.validate()?;
    check_family(full, leave_outs, plan)?;
    let per_batch = leave_outs
        .par_iter()
        .zip(&plan.batches)
        .map(|(run, batch)| {
            (0..full.len())
                .map(|k| {
                    let minus = spec.mean_loss(&run.weights[k], data, batch)?;
                    let base = spec.mean_loss(&full.weights[k], data, batch)?;
                    Ok(minus - base)
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let b = per_batch.len() as f64;
    let delta_bar = (0..full.len())
        .map(|k| per_batch.iter().map(|s| s[k]).sum::<f64>() / b)
        .collect();
    Ok(LossDifference {
        times: full.times.clone(),
        delta_bar,
        per_batch,
    })
}

/// `δR(t) = ℓ̄(w(t), S_test) − ℓ̄(w(t), S_train)` at each record.
pub fn measure_generalization_gap(
    spec: &MLPSpec,
    full: &TrajectoryRecord,
    train: &Dataset,
    test: &Dataset,
) -> Result<Vec<f64>> {
    if test.is_empty() {
        return Err(Error::input("generalization gap needs a non-empty test set"));
    }
    let train_idx: Vec<usize> = (0..train.len()).collect();
    let test_idx: Vec<usize> = (0..test.len()).collect();
    full.weights
        .par_iter()
        .map(|w| Ok(spec.mean_loss(w, test, &test_idx)? - spec.mean_loss(w, train, &train_idx)?))
        .collect()
}
