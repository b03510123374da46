//! Datasets: synthetic generators, file loaders and leave-m-out plans.

mod io;
mod plan;
mod synth;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use io::{load_csv, load_idx, CsvSchema, LabelEncoding};
pub use plan::{leave_out_plan, LeaveOutPlan};
pub use synth::{gen_gaussian_alpha, gen_gaussian_alpha_split, gen_two_point, randomize_labels, synthesize_projected};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    TwoPoint,
    GaussianAlpha,
    SynProjected,
    RandomLabel,
    External,
}

/// `n` samples `(xᵢ, yᵢ)` stored as two row-major blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    inputs: Vec<f64>,
    targets: Vec<f64>,
    len: usize,
    input_dim: usize,
    target_dim: usize,
    pub kind: DatasetKind,
    pub seed: u64,
}

impl Dataset {
    pub fn new(
        inputs: Vec<f64>,
        targets: Vec<f64>,
        input_dim: usize,
        target_dim: usize,
        kind: DatasetKind,
        seed: u64,
    ) -> Result<Self> {
        if input_dim == 0 || target_dim == 0 {
            return Err(Error::input("dataset dimensions must be positive"));
        }
        if inputs.len() % input_dim != 0 {
            return Err(Error::shape(format!(
                "{} input values do not split into rows of {input_dim}",
                inputs.len()
            )));
        }
        let len = inputs.len() / input_dim;
        if targets.len() != len * target_dim {
            return Err(Error::shape(format!(
                "{len} inputs but {} target values for target dimension {target_dim}",
                targets.len()
            )));
        }
        if len < 2 {
            return Err(Error::input("a dataset needs at least two samples"));
        }
        if inputs.iter().chain(&targets).any(|v| !v.is_finite()) {
            return Err(Error::input("dataset contains non-finite values"));
        }
        Ok(Dataset {
            inputs,
            targets,
            len,
            input_dim,
            target_dim,
            kind,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn target_dim(&self) -> usize {
        self.target_dim
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn target(&self, i: usize) -> &[f64] {
        &self.targets[i * self.target_dim..(i + 1) * self.target_dim]
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len) {
            return Err(Error::input(format!("index {bad} out of range for {} samples", self.len)));
        }
        let inputs = indices.iter().flat_map(|&i| self.input(i).iter().copied()).collect();
        let targets = indices.iter().flat_map(|&i| self.target(i).iter().copied()).collect();
        Dataset::new(inputs, targets, self.input_dim, self.target_dim, self.kind, self.seed)
    }

    /// First `n_train` samples and the rest.
    pub fn split_at(&self, n_train: usize) -> Result<(Dataset, Dataset)> {
        let head: Vec<usize> = (0..n_train.min(self.len)).collect();
        let tail: Vec<usize> = (n_train.min(self.len)..self.len).collect();
        Ok((self.subset(&head)?, self.subset(&tail)?))
    }

    /// Keeps samples whose one-hot class is in `classes` and re-encodes the
    /// targets over `classes.len()` outputs in the given order.
    pub fn select_classes(&self, classes: &[usize]) -> Result<Dataset> {
        if classes.len() < 2 {
            return Err(Error::input("class selection needs at least two classes"));
        }
        if let Some(&bad) = classes.iter().find(|&&c| c >= self.target_dim) {
            return Err(Error::input(format!("class {bad} out of range for {} classes", self.target_dim)));
        }
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for i in 0..self.len {
            let label = argmax(self.target(i));
            if let Some(pos) = classes.iter().position(|&c| c == label) {
                inputs.extend_from_slice(self.input(i));
                let mut onehot = vec![0.0; classes.len()];
                onehot[pos] = 1.0;
                targets.extend(onehot);
            }
        }
        Dataset::new(inputs, targets, self.input_dim, classes.len(), self.kind, self.seed)
    }

    /// Indices in `0..len` not contained in `excluded`, ascending.
    pub fn complement(&self, excluded: &[usize]) -> Vec<usize> {
        let mut mask = vec![true; self.len];
        for &i in excluded {
            if i < self.len {
                mask[i] = false;
            }
        }
        (0..self.len).filter(|&i| mask[i]).collect()
    }

    /// Hex SHA-256 over dimensions and raw little-endian values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for dim in [self.len, self.input_dim, self.target_dim] {
            h.update((dim as u64).to_le_bytes());
        }
        for v in self.inputs.iter().chain(&self.targets) {
            h.update(v.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}
