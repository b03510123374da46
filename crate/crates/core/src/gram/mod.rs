//! Propagators, the effective Gram matrix `K(t₀, t)` and gap reconstruction.
//!
//! All time integrals use the trapezoidal rule on the record grid. The
//! damping `exp(−∫ₛᵗ c̄)` is taken from the cumulative trapezoid `C` as
//! `exp(C(s) − C(t))`, which turns every damped integral into the recursion
//!
//! ```text
//! I_j = e^{−ΔC_j} I_{j−1} + (h_j/2)(e^{−ΔC_j} g_{j−1} + g_j)
//! ```
//!
//! so the matrix accumulator and the scalar reconstruction agree to rounding.
//! Masked contraction entries contribute zero damping.

mod diagnostics;
mod propagator;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factors::KernelBlocks;
use crate::fsutil::{f64s_from_le_bytes, f64s_to_le_bytes, read, sha256_hex, write_atomic};
use crate::numkit::{dot, gemm, sym_eig, DenseMatrix};

pub use diagnostics::{convergence_diagnostics, ConvergenceReport, ConvergenceSample};
pub use propagator::{propagator_magnus, propagator_product, Propagator, PropagatorMethod, PropagatorStepper};

/// Damping rate actually integrated: masked entries count as zero.
pub fn damping_rate(c_bar: f64, masked: bool) -> f64 {
    if masked {
        0.0
    } else {
        c_bar
    }
}

/// Running state of a damped trapezoidal integral.
#[derive(Debug, Clone)]
struct Damped {
    last: Option<(f64, f64)>,
}

impl Damped {
    /// Returns `(h, e^{−ΔC})` for the interval ending at `(t, c)`, or `None` at the first point.
    fn advance(&mut self, t: f64, c: f64) -> Result<Option<(f64, f64)>> {
        let out = match self.last {
            None => None,
            Some((t0, c0)) => {
                let h = t - t0;
                if !(h > 0.0) {
                    return Err(Error::input(format!("grid must increase ({t0} then {t})")));
                }
                Some((h, (-0.5 * h * (c0 + c)).exp()))
            }
        };
        self.last = Some((t, c));
        Ok(out)
    }
}

/// `Δ̄(t) = ∫ ε(s) exp(−∫ₛᵗ c̄) ds` on the grid, starting at 0.
pub fn reconstruct_delta(c_bar: &[f64], masked: &[bool], eps: &[f64], times: &[f64]) -> Result<Vec<f64>> {
    if c_bar.len() != times.len() || masked.len() != times.len() || eps.len() != times.len() {
        return Err(Error::input("reconstruction series are not aligned with the grid"));
    }
    let mut damped = Damped { last: None };
    let mut out = Vec::with_capacity(times.len());
    let mut acc = 0.0;
    for k in 0..times.len() {
        if let Some((h, decay)) = damped.advance(times[k], damping_rate(c_bar[k], masked[k]))? {
            acc = decay * acc + 0.5 * h * (decay * eps[k - 1] + eps[k]);
        }
        out.push(acc);
    }
    Ok(out)
}

/// `K(t₀, t)` with the metadata needed to interpret it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectiveGram {
    pub k: DenseMatrix,
    pub n: usize,
    pub c: usize,
    pub start: f64,
    pub horizon: f64,
    pub method: PropagatorMethod,
    /// Damping rates integrated, masked entries already zeroed.
    pub damping: Vec<f64>,
}

impl EffectiveGram {
    pub fn dim(&self) -> usize {
        self.k.rows()
    }

    /// `r⃗ᵀ K r⃗`.
    pub fn quadratic_form(&self, r: &[f64]) -> Result<f64> {
        quadratic_form(self, r)
    }

    /// `‖K − Kᵀ‖_F / ‖K‖_F`.
    pub fn relative_asymmetry(&self) -> f64 {
        let norm = self.k.frobenius_norm();
        if norm == 0.0 {
            0.0
        } else {
            self.k.asymmetry() / norm
        }
    }

    /// `(λ_min, ‖K‖₂)`.
    pub fn extreme_eigenvalues(&self) -> Result<(f64, f64)> {
        let eig = sym_eig(&self.k, 1e-8)?;
        Ok((eig.min(), eig.spectral_norm()))
    }

    /// Writes `K.bin` (row-major little-endian `f64`) and the `K.json` sidecar.
    pub fn export(&self, dir: &Path) -> Result<GramSidecar> {
        let bytes = f64s_to_le_bytes(self.k.as_slice());
        write_atomic(&dir.join("K.bin"), &bytes)?;
        let sidecar = GramSidecar::describe(self, sha256_hex(&bytes));
        write_atomic(&dir.join("K.json"), &serde_json::to_vec_pretty(&sidecar)?)?;
        Ok(sidecar)
    }

    /// Reads a pair written by [`EffectiveGram::export`], checking the digest.
    pub fn import(dir: &Path) -> Result<Self> {
        let meta = dir.join("K.json");
        if !meta.exists() {
            return Err(Error::Integrity(format!("no K.json in {}", dir.display())));
        }
        let sidecar: GramSidecar = serde_json::from_slice(&read(&meta)?)?;
        let bytes = read(&dir.join("K.bin"))?;
        if sha256_hex(&bytes) != sidecar.sha256 {
            return Err(Error::Integrity("K.bin digest does not match K.json".into()));
        }
        let k = DenseMatrix::from_vec(sidecar.dim, sidecar.dim, f64s_from_le_bytes(&bytes, "K.bin")?)
            .map_err(|_| Error::Integrity("K.bin size does not match K.json".into()))?;
        Ok(EffectiveGram {
            k,
            n: sidecar.n,
            c: sidecar.c,
            start: sidecar.start,
            horizon: sidecar.horizon,
            method: sidecar.method,
            damping: Vec::new(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GramSidecar {
    pub dim: usize,
    pub n: usize,
    pub c: usize,
    pub start: f64,
    pub horizon: f64,
    pub method: PropagatorMethod,
    pub sha256: String,
    pub damping_min: f64,
    pub damping_max: f64,
    pub damping_mean: f64,
    pub damping_zero_entries: usize,
}

impl GramSidecar {
    fn describe(g: &EffectiveGram, sha256: String) -> Self {
        let d = &g.damping;
        let (min, max) = d.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        GramSidecar {
            dim: g.dim(),
            n: g.n,
            c: g.c,
            start: g.start,
            horizon: g.horizon,
            method: g.method,
            sha256,
            damping_min: if d.is_empty() { 0.0 } else { min },
            damping_max: if d.is_empty() { 0.0 } else { max },
            damping_mean: if d.is_empty() { 0.0 } else { d.iter().sum::<f64>() / d.len() as f64 },
            damping_zero_entries: d.iter().filter(|v| **v == 0.0).count(),
        }
    }
}

/// `r⃗ᵀ K r⃗`.
pub fn quadratic_form(k: &EffectiveGram, r: &[f64]) -> Result<f64> {
    if r.len() != k.dim() {
        return Err(Error::shape(format!("residual has {} entries, K is {}x{}", r.len(), k.dim(), k.dim())));
    }
    k.k.quadratic_form(r)
}

/// Streaming accumulator for `K(t₀, t) = (1/(n−1)) ∫ Ωᵀ(M − H/n)Ω e^{−∫ₛᵗ c̄} ds`.
///
/// When a residual `r(t₀)` is supplied, it also records
/// `ε̂(s) = r(t₀)ᵀ Ωᵀ(M − H/n)Ω r(t₀)/(n−1)`, the integrand of the scalar
/// reconstruction `Δ̄(c, ε̂)`.
#[derive(Debug, Clone)]
pub struct GramAccumulator {
    n: usize,
    c: usize,
    method: PropagatorMethod,
    k: DenseMatrix,
    last_integrand: Option<DenseMatrix>,
    damped: Damped,
    start: Option<f64>,
    horizon: f64,
    damping: Vec<f64>,
    r0: Option<Vec<f64>>,
    eps_hat: Vec<f64>,
}

impl GramAccumulator {
    pub fn new(n: usize, c: usize, method: PropagatorMethod, r0: Option<Vec<f64>>) -> Self {
        let dim = n * c;
        GramAccumulator {
            n,
            c,
            method,
            k: DenseMatrix::zeros(dim, dim),
            last_integrand: None,
            damped: Damped { last: None },
            start: None,
            horizon: 0.0,
            damping: Vec::new(),
            r0,
            eps_hat: Vec::new(),
        }
    }

    /// Adds the grid point `t` with propagator `Ω(t₀, t)`, gap operator `A(t)`
    /// and contraction `c̄(t)`.
    pub fn push(&mut self, t: f64, omega: &DenseMatrix, gap: &DenseMatrix, c_bar: f64, masked: bool) -> Result<()> {
        let dim = self.k.rows();
        if omega.rows() != dim || omega.cols() != dim || gap.rows() != dim || gap.cols() != dim {
            return Err(Error::shape(format!("Ω and A must be {dim}x{dim}")));
        }
        let scale = 1.0 / (self.n as f64 - 1.0);
        let mut a_omega = DenseMatrix::zeros(dim, dim);
        gemm(1.0, gap, false, omega, false, 0.0, &mut a_omega);
        let mut integrand = DenseMatrix::zeros(dim, dim);
        gemm(scale, omega, true, &a_omega, false, 0.0, &mut integrand);
        integrand.symmetrize();
        if let Some(r0) = &self.r0 {
            let moved = omega.matvec(r0)?;
            self.eps_hat.push(scale * gap.quadratic_form(&moved)?);
        }
        let rate = damping_rate(c_bar, masked);
        self.damping.push(rate);
        self.start.get_or_insert(t);
        self.horizon = t;
        if let Some((h, decay)) = self.damped.advance(t, rate)? {
            let prev = self.last_integrand.as_ref().expect("set after the first point");
            self.k.scale(decay);
            self.k.axpy(0.5 * h * decay, prev);
            self.k.axpy(0.5 * h, &integrand);
        }
        self.last_integrand = Some(integrand);
        Ok(())
    }

    pub fn eps_hat(&self) -> &[f64] {
        &self.eps_hat
    }

    pub fn current(&self) -> &DenseMatrix {
        &self.k
    }

    pub fn finish(mut self) -> EffectiveGram {
        self.k.symmetrize();
        EffectiveGram {
            k: self.k,
            n: self.n,
            c: self.c,
            start: self.start.unwrap_or(0.0),
            horizon: self.horizon,
            method: self.method,
            damping: self.damping,
        }
    }
}

fn check_aligned(blocks: &[KernelBlocks], c_bar: &[f64], masked: &[bool], propagator: &Propagator) -> Result<()> {
    let len = blocks.len();
    if len == 0 || c_bar.len() != len || masked.len() != len || propagator.omegas.len() != len {
        return Err(Error::input("blocks, contraction and propagator series are not aligned"));
    }
    if blocks.iter().zip(&propagator.times).any(|(b, t)| b.time != *t) {
        return Err(Error::input("blocks and propagator are on different grids"));
    }
    Ok(())
}

/// `K(t₀, t)` at the last grid time from stored series starting at `t₀`.
pub fn effective_gram(blocks: &[KernelBlocks], c_bar: &[f64], masked: &[bool], propagator: &Propagator) -> Result<EffectiveGram> {
    check_aligned(blocks, c_bar, masked, propagator)?;
    let mut acc = GramAccumulator::new(blocks[0].n, blocks[0].c, propagator.method, None);
    for (k, b) in blocks.iter().enumerate() {
        acc.push(b.time, &propagator.omegas[k], &b.gap_operator(), c_bar[k], masked[k])?;
    }
    Ok(acc.finish())
}

/// `K(t₀, T)` and the predicted increment `r(t₀)ᵀK(t₀, T)r(t₀)` of `Δ̄` over
/// `[t₀, T]`. The series start at `t₀`; `c̄` must already be measured relative
/// to `Δ̄(t₀)`.
pub fn effective_gram_from_t0(
    blocks: &[KernelBlocks],
    c_bar: &[f64],
    masked: &[bool],
    propagator: &Propagator,
    r_t0: &[f64],
) -> Result<(EffectiveGram, f64)> {
    let k = effective_gram(blocks, c_bar, masked, propagator)?;
    let increment = quadratic_form(&k, r_t0)?;
    Ok((k, increment))
}

/// `r(t) = Ω(t₀, t) r(t₀)`.
pub fn propagate_residual(omega: &DenseMatrix, r0: &[f64]) -> Result<Vec<f64>> {
    omega.matvec(r0)
}

/// `‖a − b‖₂ / ‖b‖₂`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let den = dot(b, b).sqrt();
    if den == 0.0 {
        dot(&diff, &diff).sqrt()
    } else {
        dot(&diff, &diff).sqrt() / den
    }
}
