use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::factors::KernelBlocks;
use crate::numkit::sym_eig;

/// Eigen-quantities of one record used by the convergence conditions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceSample {
    pub time: f64,
    /// Smallest eigenvalue of `(P + Pᵀ)/2`.
    pub lambda_min: f64,
    /// Largest eigenvalue of `(P + Pᵀ)/2`.
    pub lambda_max: f64,
    /// `‖M − H/n‖₂`.
    pub gap_norm: f64,
}

impl ConvergenceSample {
    pub fn from_blocks(blocks: &KernelBlocks) -> Result<Self> {
        let mut sym = blocks.p.clone();
        sym.symmetrize();
        let eig = sym_eig(&sym, 1e-8)?;
        let gap = sym_eig(&blocks.gap_operator(), 1e-8)?;
        Ok(ConvergenceSample {
            time: blocks.time,
            lambda_min: eig.min(),
            lambda_max: eig.max(),
            gap_norm: gap.spectral_norm(),
        })
    }
}

/// Observed status of the sufficient conditions for `K(0, t)` to converge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub times: Vec<f64>,
    /// `ω(t) = exp(−(2/n)∫λ_min)`.
    pub omega: Vec<f64>,
    /// `m(t) = ‖M − H/n‖₂/(n−1)`.
    pub m: Vec<f64>,
    /// Partial integrals of `ω·m`.
    pub integral_omega_m: Vec<f64>,
    pub sup_omega_m: f64,
    /// `ω` at the horizon is below a tenth of its start value.
    pub omega_decays: bool,
    /// Second half of the partial integral adds less than a tenth of the first half.
    pub integral_levels_off: bool,
    pub fraction_negative_c: f64,
}

/// Evaluates the convergence conditions on (possibly subsampled) records.
///
/// Nothing here fails: the conditions are sufficient, not necessary, so the
/// report only states what was observed.
pub fn convergence_diagnostics(samples: &[ConvergenceSample], c_bar: &[f64], masked: &[bool], n: usize) -> ConvergenceReport {
    let nf = n as f64;
    let times: Vec<f64> = samples.iter().map(|s| s.time).collect();
    let mut omega = Vec::with_capacity(samples.len());
    let mut acc = 0.0;
    for (k, s) in samples.iter().enumerate() {
        if k > 0 {
            let h = s.time - samples[k - 1].time;
            acc += 0.5 * h * (s.lambda_min + samples[k - 1].lambda_min);
        }
        omega.push((-2.0 / nf * acc).exp());
    }
    let m: Vec<f64> = samples.iter().map(|s| s.gap_norm / (nf - 1.0)).collect();
    let prod: Vec<f64> = omega.iter().zip(&m).map(|(a, b)| a * b).collect();
    let mut integral = Vec::with_capacity(samples.len());
    let mut acc = 0.0;
    for k in 0..prod.len() {
        if k > 0 {
            acc += 0.5 * (times[k] - times[k - 1]) * (prod[k] + prod[k - 1]);
        }
        integral.push(acc);
    }
    let sup = prod.iter().fold(0.0f64, |a, &b| a.max(b));
    let omega_decays = omega.last().is_some_and(|&w| w < 0.1 * omega[0]);
    let integral_levels_off = match integral.len() {
        0 | 1 => false,
        len => {
            let mid = integral[len / 2];
            let end = integral[len - 1];
            end - mid < 0.1 * mid.max(f64::MIN_POSITIVE)
        }
    };
    let unmasked = masked.iter().filter(|m| !**m).count();
    let negative = c_bar.iter().zip(masked).filter(|(c, m)| !**m && **c < 0.0).count();
    ConvergenceReport {
        times,
        omega,
        m,
        integral_omega_m: integral,
        sup_omega_m: sup,
        omega_decays,
        integral_levels_off,
        fraction_negative_c: if unmasked == 0 { 0.0 } else { negative as f64 / unmasked as f64 },
    }
}
