use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// Softmax cross-entropy against a probability (usually one-hot) target.
    CrossEntropy,
    /// `½‖f − y‖²`.
    Squared,
}

const LABEL_SUM_TOL: f64 = 1e-9;

impl LossKind {
    pub fn validate_target(self, y: &[f64]) -> Result<()> {
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("target has non-finite entries"));
        }
        if self == LossKind::CrossEntropy {
            if y.iter().any(|&v| v < 0.0) {
                return Err(Error::input("cross-entropy target has negative entries"));
            }
            let s: f64 = y.iter().sum();
            if (s - 1.0).abs() > LABEL_SUM_TOL {
                return Err(Error::input(format!(
                    "cross-entropy target must sum to 1, sums to {s}"
                )));
            }
        }
        Ok(())
    }

    /// Loss value and `r = ∂ℓ/∂f` at output `f` for target `y`.
    pub fn value_and_residual(self, f: &[f64], y: &[f64]) -> (f64, Vec<f64>) {
        match self {
            LossKind::Squared => {
                let r: Vec<f64> = f.iter().zip(y).map(|(a, b)| a - b).collect();
                let loss = 0.5 * r.iter().map(|v| v * v).sum::<f64>();
                (loss, r)
            }
            LossKind::CrossEntropy => {
                let (lse, p) = log_softmax_parts(f);
                let mass: f64 = y.iter().sum();
                let loss = lse * mass - f.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
                let r = p.iter().zip(y).map(|(pi, yi)| pi * mass - yi).collect();
                (loss.max(0.0), r)
            }
        }
    }

    pub fn value(self, f: &[f64], y: &[f64]) -> f64 {
        self.value_and_residual(f, y).0
    }

    /// `∂²ℓ/∂f²` at output `f` (C×C).
    pub fn output_hessian(self, f: &[f64], y: &[f64]) -> DenseMatrix {
        match self {
            LossKind::Squared => DenseMatrix::identity(f.len()),
            LossKind::CrossEntropy => {
                let (_, p) = log_softmax_parts(f);
                let mass: f64 = y.iter().sum();
                DenseMatrix::from_fn(f.len(), f.len(), |i, j| {
                    let d = if i == j { p[i] } else { 0.0 };
                    mass * (d - p[i] * p[j])
                })
            }
        }
    }
}

/// Returns `(log Σ exp f, softmax(f))`.
fn log_softmax_parts(f: &[f64]) -> (f64, Vec<f64>) {
    let max = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = f.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let p = exps.iter().map(|e| e / z).collect();
    (max + z.ln(), p)
}
