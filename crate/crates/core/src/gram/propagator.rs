use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{gemm, mat_exp, DenseMatrix};

/// How `Ω(t₀, t)` is approximated from samples of `P` on the record grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PropagatorMethod {
    /// `Ω ← (I − (h/n) P) Ω` per grid interval.
    Product,
    /// `exp(−(1/n)∫P)`.
    Magnus1,
    /// `exp(−(1/n)∫P + (1/2n²)∬[P(t₁), P(t₂)])`.
    Magnus2,
}

impl PropagatorMethod {
    pub fn name(self) -> &'static str {
        match self {
            PropagatorMethod::Product => "product",
            PropagatorMethod::Magnus1 => "magnus1",
            PropagatorMethod::Magnus2 => "magnus2",
        }
    }
}

impl std::str::FromStr for PropagatorMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "product" => Ok(PropagatorMethod::Product),
            "magnus1" => Ok(PropagatorMethod::Magnus1),
            "magnus2" => Ok(PropagatorMethod::Magnus2),
            other => Err(Error::input(format!("unknown propagator method {other:?}"))),
        }
    }
}

/// `Ω` at each grid time.
#[derive(Debug, Clone)]
pub struct Propagator {
    pub method: PropagatorMethod,
    pub times: Vec<f64>,
    pub omegas: Vec<DenseMatrix>,
}

/// Advances `Ω` one grid point at a time, keeping only the running state.
#[derive(Debug, Clone)]
pub struct PropagatorStepper {
    method: PropagatorMethod,
    n: f64,
    omega: DenseMatrix,
    last: Option<(f64, DenseMatrix)>,
    integral: DenseMatrix,
    /// `∫[P(t₁), ∫^{t₁}P] dt₁`.
    nested: DenseMatrix,
    /// `[P, ∫P]` at the previous point.
    last_commutator: DenseMatrix,
}

impl PropagatorStepper {
    pub fn new(method: PropagatorMethod, dim: usize, n: usize) -> Self {
        PropagatorStepper {
            method,
            n: n as f64,
            omega: DenseMatrix::identity(dim),
            last: None,
            integral: DenseMatrix::zeros(dim, dim),
            nested: DenseMatrix::zeros(dim, dim),
            last_commutator: DenseMatrix::zeros(dim, dim),
        }
    }

    pub fn method(&self) -> PropagatorMethod {
        self.method
    }

    pub fn current(&self) -> &DenseMatrix {
        &self.omega
    }

    /// Takes `P(t)` at the next grid time and returns `Ω(t₀, t)`; the first
    /// call fixes `t₀` and returns the identity.
    pub fn push(&mut self, t: f64, p: &DenseMatrix) -> Result<&DenseMatrix> {
        let dim = self.omega.rows();
        if p.rows() != dim || p.cols() != dim {
            return Err(Error::shape(format!("P is {}x{}, propagator is {dim}x{dim}", p.rows(), p.cols())));
        }
        let Some((t_prev, p_prev)) = self.last.take() else {
            self.last = Some((t, p.clone()));
            return Ok(&self.omega);
        };
        let h = t - t_prev;
        if !(h > 0.0) {
            return Err(Error::input(format!("propagator grid must increase ({t_prev} then {t})")));
        }
        match self.method {
            PropagatorMethod::Product => {
                let old = self.omega.clone();
                gemm(-h / self.n, &p_prev, false, &old, false, 1.0, &mut self.omega);
            }
            PropagatorMethod::Magnus1 | PropagatorMethod::Magnus2 => {
                self.integral.axpy(0.5 * h, &p_prev);
                self.integral.axpy(0.5 * h, p);
                let mut exponent = self.integral.scaled(-1.0 / self.n);
                if self.method == PropagatorMethod::Magnus2 {
                    let comm = p.commutator(&self.integral)?;
                    self.nested.axpy(0.5 * h, &self.last_commutator);
                    self.nested.axpy(0.5 * h, &comm);
                    self.last_commutator = comm;
                    exponent.axpy(0.5 / (self.n * self.n), &self.nested);
                }
                self.omega = mat_exp(&exponent)?;
            }
        }
        self.last = Some((t, p.clone()));
        Ok(&self.omega)
    }
}

fn propagate(method: PropagatorMethod, p_series: &[DenseMatrix], times: &[f64], n: usize) -> Result<Propagator> {
    if p_series.len() != times.len() || times.is_empty() {
        return Err(Error::input("P series and grid must be non-empty and aligned"));
    }
    let mut stepper = PropagatorStepper::new(method, p_series[0].rows(), n);
    let omegas = p_series
        .iter()
        .zip(times)
        .map(|(p, &t)| stepper.push(t, p).cloned())
        .collect::<Result<Vec<_>>>()?;
    Ok(Propagator {
        method,
        times: times.to_vec(),
        omegas,
    })
}

/// Ordered product `∏ (I − (h/n) P(t_k))` over grid intervals, newest factor on the left.
pub fn propagator_product(p_series: &[DenseMatrix], times: &[f64], n: usize) -> Result<Propagator> {
    propagate(PropagatorMethod::Product, p_series, times, n)
}

/// First- or second-order Magnus propagator with trapezoidal integrals.
pub fn propagator_magnus(p_series: &[DenseMatrix], times: &[f64], n: usize, order: u8) -> Result<Propagator> {
    let method = match order {
        1 => PropagatorMethod::Magnus1,
        2 => PropagatorMethod::Magnus2,
        _ => return Err(Error::input(format!("Magnus order must be 1 or 2, got {order}"))),
    };
    propagate(method, p_series, times, n)
}
