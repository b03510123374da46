//! Closed forms for linear regression on two orthonormal inputs.
//!
//! The dataset holds `n/2` copies of `(x₁, y₁)` followed by `n/2` copies of
//! `(x₂, y₂)`, the loss is `(wᵀx − y)²/2` and all runs start at `w = 0`.
//! Coordinates are reported in the `(x₁, x₂)` basis.
//!
//! Leaving out one sample from side `a` slows the progress along `x_a` to
//! rate `α = (n−2)/(2(n−1))` while the other side runs at `n/(2(n−1))`. The
//! loss difference then obeys `Δ̄' = −2α Δ̄ + ε` exactly, so the averaged
//! contraction factor is `c̄ = 2α = (n−2)/(n−1)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factors::KernelBlocks;
use crate::numkit::{sym_eig, DenseMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoPointParams {
    pub n: usize,
    pub y1: f64,
    pub y2: f64,
    /// Scale of the perturbation added to `P` on the complement of the residual span.
    pub eps0: f64,
}

impl TwoPointParams {
    pub fn new(n: usize, y1: f64, y2: f64) -> Result<Self> {
        let p = TwoPointParams { n, y1, y2, eps0: 1e-3 };
        p.validate()?;
        Ok(p)
    }

    pub fn with_eps0(mut self, eps0: f64) -> Self {
        self.eps0 = eps0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.n % 2 != 0 {
            return Err(Error::input(format!("two-point task needs an even n ≥ 2, got {}", self.n)));
        }
        if !self.y1.is_finite() || !self.y2.is_finite() || !(self.eps0 >= 0.0) {
            return Err(Error::input("two-point targets must be finite and ε̄₀ nonnegative"));
        }
        Ok(())
    }

    fn nf(&self) -> f64 {
        self.n as f64
    }

    /// Rate along the side that lost a sample.
    pub fn slow_rate(&self) -> f64 {
        (self.nf() - 2.0) / (2.0 * (self.nf() - 1.0))
    }

    /// Rate along the intact side.
    pub fn fast_rate(&self) -> f64 {
        self.nf() / (2.0 * (self.nf() - 1.0))
    }

    /// `c̄ = (n−2)/(n−1)`.
    pub fn c_bar(&self) -> f64 {
        2.0 * self.slow_rate()
    }

    pub fn target_norm_sq(&self) -> f64 {
        self.y1 * self.y1 + self.y2 * self.y2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoPointWeights {
    pub full: [f64; 2],
    /// Index 0: a sample of side 1 omitted; index 1: a sample of side 2 omitted.
    pub leave_out: [[f64; 2]; 2],
}

pub fn closed_form_trajectories(p: &TwoPointParams, t: f64) -> TwoPointWeights {
    let reach = |rate: f64| 1.0 - (-rate * t).exp();
    let full = reach(0.5);
    let (slow, fast) = (reach(p.slow_rate()), reach(p.fast_rate()));
    TwoPointWeights {
        full: [full * p.y1, full * p.y2],
        leave_out: [[slow * p.y1, fast * p.y2], [fast * p.y1, slow * p.y2]],
    }
}

/// `Δ̄(t) = (y₁² + y₂²)(e^{−c̄t} − e^{−t})/4` under gradient flow.
pub fn closed_form_delta_bar(p: &TwoPointParams, t: f64) -> f64 {
    0.25 * p.target_norm_sq() * ((-p.c_bar() * t).exp() - (-t).exp())
}

/// `ε̄(t) = (y₁² + y₂²) e^{−t}/(4(n−1))` under gradient flow.
pub fn closed_form_eps_bar(p: &TwoPointParams, t: f64) -> f64 {
    p.target_norm_sq() * (-t).exp() / (4.0 * (p.nf() - 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GramEigen {
    /// Eigenvalue of `K(0, t)` on the residual span.
    pub lambda: f64,
    pub lambda_prime_lower: f64,
    pub lambda_prime_upper: f64,
    pub c_bar: f64,
}

/// `λ(t) = (e^{−c̄t} − e^{−t}) / (2(1−c̄)(n−1))` and the bracket
/// `(1−e^{−c̄t})/(2c̄(n−1)) ≤ λ′(t) ≤ (1−e^{−c̄t})/(c̄(n−1))`; for `n = 2` the
/// bracket becomes its `c̄ → 0` limit, linear in `t`.
pub fn closed_form_gram_eigen(p: &TwoPointParams, t: f64) -> GramEigen {
    let c = p.c_bar();
    let m1 = p.nf() - 1.0;
    let lambda = ((-c * t).exp() - (-t).exp()) / (2.0 * (1.0 - c) * m1);
    let growth = if c == 0.0 { t } else { -(-c * t).exp_m1() / c };
    GramEigen {
        lambda,
        lambda_prime_lower: growth / (2.0 * m1),
        lambda_prime_upper: growth / m1,
        c_bar: c,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComparisonBounds {
    /// `√(2(y₁² + y₂²)/n)`.
    pub weight_norm: f64,
    /// `(y₁² + y₂²)/(4(n−1))`.
    pub accumulated_perturbation: f64,
}

pub fn comparison_bounds(p: &TwoPointParams) -> ComparisonBounds {
    ComparisonBounds {
        weight_norm: (2.0 * p.target_norm_sq() / p.nf()).sqrt(),
        accumulated_perturbation: p.target_norm_sq() / (4.0 * (p.nf() - 1.0)),
    }
}

/// Probability that `n` uniform draws from two points hit only one of them.
pub fn single_support_probability(n: usize) -> f64 {
    0.5f64.powi(n as i32 - 1)
}

/// `ε(t) = ε̄₀` on `[0, 1]` and `ε̄₀/t²` afterwards.
pub fn perturbation_schedule(eps0: f64, t: f64) -> f64 {
    if t <= 1.0 {
        eps0
    } else {
        eps0 / (t * t)
    }
}

/// `u₁`, `u₂`: normalized indicators of the two halves.
pub fn residual_span_basis(n: usize) -> [Vec<f64>; 2] {
    let v = (2.0 / n as f64).sqrt();
    let half = n / 2;
    [
        (0..n).map(|i| if i < half { v } else { 0.0 }).collect(),
        (0..n).map(|i| if i >= half { v } else { 0.0 }).collect(),
    ]
}

/// `Pᵉ = P + (nε/2)(I − u₁u₁ᵀ − u₂u₂ᵀ)` for the unperturbed two-point `P`.
pub fn perturbed_generator(n: usize, eps: f64) -> DenseMatrix {
    let half = n / 2;
    let [u1, u2] = residual_span_basis(n);
    let scale = n as f64 * eps / 2.0;
    DenseMatrix::from_fn(n, n, |i, j| {
        let p = if (i < half) == (j < half) { 1.0 } else { 0.0 };
        let id = if i == j { 1.0 } else { 0.0 };
        p + scale * (id - u1[i] * u1[j] - u2[i] * u2[j])
    })
}

/// Replaces measured two-point blocks with `H = P = Pᵉ(t)` and `M = I`,
/// keeping the measured residual.
pub fn perturb_two_point_blocks(blocks: KernelBlocks, eps0: f64) -> Result<KernelBlocks> {
    if blocks.c != 1 || blocks.n % 2 != 0 {
        return Err(Error::input("two-point blocks need one output and an even sample count"));
    }
    let pe = perturbed_generator(blocks.n, perturbation_schedule(eps0, blocks.time));
    Ok(KernelBlocks {
        time: blocks.time,
        n: blocks.n,
        c: 1,
        p: pe.clone(),
        m: DenseMatrix::identity(blocks.n),
        h: pe,
        residual: blocks.residual,
    })
}

/// Eigenvalues of a two-point `K` split into those whose eigenvectors lie
/// mostly in `span(u₁, u₂)` and the rest, each ascending.
pub fn split_gram_spectrum(k: &DenseMatrix) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = k.rows();
    let basis = residual_span_basis(n);
    let eig = sym_eig(k, 1e-8)?;
    let (mut span, mut rest) = (Vec::new(), Vec::new());
    for (idx, &value) in eig.values.iter().enumerate() {
        let v = eig.vectors.column(idx);
        let weight: f64 = basis.iter().map(|u| crate::numkit::dot(u, &v).powi(2)).sum();
        if weight > 0.5 {
            span.push(value);
        } else {
            rest.push(value);
        }
    }
    Ok((span, rest))
}
