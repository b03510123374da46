//! Statistics relating the residual to the eigenspace of the effective Gram matrix.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::numkit::{dot, sym_eig, DenseMatrix, SymEigen};

/// Eigenvalues ascending and their plain mean.
pub fn spectrum_stats(k: &DenseMatrix) -> Result<(Vec<f64>, f64)> {
    let eig = sym_eig(k, 1e-8)?;
    let mean = eig.values.iter().sum::<f64>() / eig.values.len().max(1) as f64;
    Ok((eig.values, mean))
}

/// `P(r, U)ₖ = |rᵀUₖ| / ‖r‖₂` for each eigenvector column.
pub fn projection(r: &[f64], vectors: &DenseMatrix) -> Result<Vec<f64>> {
    if r.len() != vectors.rows() {
        return Err(Error::shape(format!("residual has {} entries, eigenbasis has {} rows", r.len(), vectors.rows())));
    }
    let norm = dot(r, r).sqrt();
    if norm == 0.0 {
        return Err(Error::input("projection of a zero residual is undefined"));
    }
    let coeffs = vectors.t_matmul(&DenseMatrix::from_vec(r.len(), 1, r.to_vec())?)?;
    Ok(coeffs.as_slice().iter().map(|c| c.abs() / norm).collect())
}

/// Cumulative `‖rᵀU_{1:k}‖² / ‖r‖²`.
pub fn explained_residual(r: &[f64], vectors: &DenseMatrix) -> Result<Vec<f64>> {
    let p = projection(r, vectors)?;
    Ok(normalized_cumsum(p.iter().map(|v| v * v)))
}

/// Cumulative `Σ₁ᵏ σᵢ / Σ σᵢ` with small negative eigenvalues clamped to zero.
pub fn explained_kernel(sigma: &[f64]) -> Result<Vec<f64>> {
    let norm = sigma.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if let Some(v) = sigma.iter().find(|&&v| v < -1e-8 * norm) {
        return Err(Error::input(format!("eigenvalue {v} is too negative for an explained-kernel curve")));
    }
    let clamped: Vec<f64> = sigma.iter().map(|v| v.max(0.0)).collect();
    if clamped.iter().sum::<f64>() <= 0.0 {
        return Err(Error::input("explained kernel needs a positive trace"));
    }
    Ok(normalized_cumsum(clamped.into_iter()))
}

/// `[1/l, 2/l, …, 1]`.
pub fn relative_index(l: usize) -> Vec<f64> {
    (1..=l).map(|i| i as f64 / l as f64).collect()
}

fn normalized_cumsum(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut acc = 0.0;
    let mut out: Vec<f64> = values
        .map(|v| {
            acc += v;
            acc
        })
        .collect();
    let total = acc;
    out.iter_mut().for_each(|v| *v /= total);
    if let Some(last) = out.last_mut() {
        *last = 1.0;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralReport {
    /// Ascending.
    pub sigma: Vec<f64>,
    pub sigma_mean: f64,
    pub proj: Vec<f64>,
    pub explained_residual: Vec<f64>,
    pub explained_kernel: Vec<f64>,
    pub relative_index: Vec<f64>,
    pub residual_norm_sq: f64,
    /// `Σ σₖ (rᵀUₖ)²`.
    pub quadratic_form: f64,
}

impl SpectralReport {
    pub fn new(k: &DenseMatrix, r: &[f64]) -> Result<Self> {
        let eig: SymEigen = sym_eig(k, 1e-8)?;
        let proj = projection(r, &eig.vectors)?;
        let norm_sq = dot(r, r);
        let quadratic_form = eig.values.iter().zip(&proj).map(|(s, p)| s * p * p * norm_sq).sum();
        let len = eig.values.len();
        Ok(SpectralReport {
            sigma_mean: eig.values.iter().sum::<f64>() / len as f64,
            explained_residual: normalized_cumsum(proj.iter().map(|v| v * v)),
            explained_kernel: explained_kernel(&eig.values)?,
            relative_index: relative_index(len),
            proj,
            sigma: eig.values,
            residual_norm_sq: norm_sq,
            quadratic_form,
        })
    }

    pub fn parseval_error(&self) -> f64 {
        (self.proj.iter().map(|p| p * p).sum::<f64>() - 1.0).abs()
    }

    pub fn is_monotone(&self) -> bool {
        let nondecreasing = |v: &[f64]| v.windows(2).all(|w| w[1] >= w[0]);
        nondecreasing(&self.explained_residual) && nondecreasing(&self.explained_kernel) && nondecreasing(&self.relative_index)
    }

    /// Share of `‖r‖²` in the leading eigenvectors whose eigenvalues hold at
    /// most `mass` of the trace.
    pub fn residual_in_tail(&self, mass: f64) -> f64 {
        let idx = self.explained_kernel.iter().take_while(|&&m| m <= mass).count();
        if idx == 0 {
            0.0
        } else {
            self.explained_residual[idx - 1]
        }
    }

    /// Mean of the explained-residual curve over the relative index.
    pub fn explained_residual_auc(&self) -> f64 {
        self.explained_residual.iter().sum::<f64>() / self.explained_residual.len() as f64
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::format("spectrum.csv", None, e.to_string());
        w.write_record(["relative_index", "sigma", "proj", "explained_residual", "explained_kernel"])
            .map_err(err)?;
        for k in 0..self.sigma.len() {
            w.write_record([
                format!("{:e}", self.relative_index[k]),
                format!("{:e}", self.sigma[k]),
                format!("{:e}", self.proj[k]),
                format!("{:e}", self.explained_residual[k]),
                format!("{:e}", self.explained_kernel[k]),
            ])
            .map_err(err)?;
        }
        w.into_inner().map_err(|e| Error::format("spectrum.csv", None, e.to_string()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_csv()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_spectrum() {
        let (s, mean) = spectrum_stats(&DenseMatrix::identity(3)).unwrap();
        assert_eq!(s, vec![1.0, 1.0, 1.0]);
        assert_eq!(mean, 1.0);
    }

    #[test]
    fn projections_of_basis_inputs() {
        let u = DenseMatrix::identity(3);
        assert_eq!(projection(&[2.0, 0.0, 0.0], &u).unwrap(), vec![1.0, 0.0, 0.0]);
        let half = projection(&[1.0, 1.0, 0.0], &u).unwrap();
        assert!((half[0] - 0.5f64.sqrt()).abs() < 1e-15 && (half[1] - 0.5f64.sqrt()).abs() < 1e-15);
        assert!(projection(&[0.0; 3], &u).is_err());
    }

    #[test]
    fn explained_kernel_rejects_bad_spectra() {
        assert!(explained_kernel(&[0.0, 0.0]).is_err());
        assert!(explained_kernel(&[-1.0, 1.0]).is_err());
        assert_eq!(explained_kernel(&[-1e-12, 1.0, 1.0]).unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(relative_index(4), vec![0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn tail_share() {
        let k = DenseMatrix::from_diag(&[0.01, 0.01, 1.0, 2.0]);
        let rep = SpectralReport::new(&k, &[1.0, 1.0, 0.1, 0.0]).unwrap();
        assert!(rep.residual_in_tail(0.03) > 0.99);
        let csv = String::from_utf8(rep.to_csv().unwrap()).unwrap();
        assert_eq!(csv.lines().count(), 5);
    }

    fn random_psd(dim: usize, entries: &[f64]) -> DenseMatrix {
        let b = DenseMatrix::from_vec(dim, dim, entries[..dim * dim].to_vec()).unwrap();
        b.matmul_t(&b).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn report_invariants(dim in 1usize..8, entries in prop::collection::vec(-1.0f64..1.0, 64), r in prop::collection::vec(-1.0f64..1.0, 8)) {
            let k = random_psd(dim, &entries);
            let r = &r[..dim];
            prop_assume!(dot(r, r) > 1e-6 && k.trace() > 1e-6);
            let rep = SpectralReport::new(&k, r).unwrap();
            prop_assert!(rep.parseval_error() <= 1e-10);
            prop_assert!(rep.is_monotone());
            prop_assert_eq!(*rep.explained_residual.last().unwrap(), 1.0);
            let direct = k.quadratic_form(r).unwrap();
            prop_assert!((direct - rep.quadratic_form).abs() <= 1e-8 * direct.abs().max(1.0));
            prop_assert!((rep.sigma_mean - k.trace() / dim as f64).abs() <= 1e-10 * k.trace().max(1.0));
            let partial: Vec<f64> = (1..=dim).map(|j| rep.sigma[..j].iter().map(|v| v.max(0.0)).sum::<f64>()).collect();
            let total = partial[dim - 1];
            for (a, b) in rep.explained_kernel.iter().zip(&partial) {
                prop_assert!((a - b / total).abs() <= 1e-12);
            }
        }
    }
}
