use super::DenseMatrix;
use crate::error::{Error, Result};

/// Eigen-decomposition of a real symmetric matrix, eigenvalues ascending.
///
/// Column `k` of `vectors` is the unit eigenvector for `values[k]`.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: Vec<f64>,
    pub vectors: DenseMatrix,
}

impl SymEigen {
    /// `Q diag(λ) Qᵀ`.
    pub fn reconstruct(&self) -> DenseMatrix {
        let n = self.values.len();
        let mut scaled = self.vectors.clone();
        for i in 0..n {
            for (k, v) in scaled.row_mut(i).iter_mut().enumerate() {
                *v *= self.values[k];
            }
        }
        scaled
            .matmul_t(&self.vectors)
            .expect("eigenvector matrix is square")
    }

    pub fn min(&self) -> f64 {
        self.values.first().copied().unwrap_or(0.0)
    }

    pub fn max(&self) -> f64 {
        self.values.last().copied().unwrap_or(0.0)
    }

    /// Spectral norm, `max |λ|`.
    pub fn spectral_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

const MAX_SWEEPS: usize = 100;

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix.
///
/// `tol` bounds the accepted asymmetry, relative to the largest entry. The
/// sweeps run until the off-diagonal mass is at rounding level, so the
/// reconstruction error is far below `tol · ‖A‖_F` for any sensible `tol`.
/// Eigenvalues are returned ascending; equal eigenvalues keep the order in
/// which the rotations left them on the diagonal.
pub fn sym_eig(a: &DenseMatrix, tol: f64) -> Result<SymEigen> {
    if !a.is_square() {
        return Err(Error::shape(format!(
            "sym_eig needs a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    if !a.is_finite() {
        return Err(Error::input("sym_eig: non-finite entries"));
    }
    let scale = a.max_abs();
    if a.asymmetry() > tol * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::shape(format!(
            "sym_eig: matrix asymmetric by {:e} (tolerance {:e})",
            a.asymmetry(),
            tol * scale
        )));
    }

    let n = a.rows();
    let mut m = a.clone();
    m.symmetrize();
    let mut v = DenseMatrix::identity(n);
    let fro = m.frobenius_norm();

    if fro > 0.0 {
        let target = f64::EPSILON * fro * 1e-2;
        let mut prev_off = f64::INFINITY;
        for _ in 0..MAX_SWEEPS {
            let off = off_diagonal_norm(&m);
            if off <= target || off >= prev_off {
                break;
            }
            prev_off = off;
            for p in 0..n.saturating_sub(1) {
                for q in (p + 1)..n {
                    rotate(&mut m, &mut v, p, q);
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let diag = m.diagonal();
    order.sort_by(|&i, &j| diag[i].total_cmp(&diag[j]));
    let values = order.iter().map(|&k| diag[k]).collect();
    let vectors = DenseMatrix::from_fn(n, n, |i, k| v[(i, order[k])]);
    Ok(SymEigen { values, vectors })
}

fn off_diagonal_norm(m: &DenseMatrix) -> f64 {
    let n = m.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += m[(i, j)] * m[(i, j)];
            }
        }
    }
    s.sqrt()
}

/// Annihilates `m[p][q]` with one plane rotation and accumulates it into `v`.
fn rotate(m: &mut DenseMatrix, v: &mut DenseMatrix, p: usize, q: usize) {
    let apq = m[(p, q)];
    if apq == 0.0 {
        return;
    }
    let app = m[(p, p)];
    let aqq = m[(q, q)];
    let theta = (aqq - app) / (2.0 * apq);
    let t = if theta.is_finite() {
        theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
    } else {
        // |theta| overflowed: the rotation angle is negligible.
        0.5 / theta
    };
    if t == 0.0 {
        return;
    }
    let c = 1.0 / (t * t + 1.0).sqrt();
    let s = t * c;
    let n = m.rows();

    m[(p, p)] = app - t * apq;
    m[(q, q)] = aqq + t * apq;
    m[(p, q)] = 0.0;
    m[(q, p)] = 0.0;
    for k in 0..n {
        if k == p || k == q {
            continue;
        }
        let akp = m[(k, p)];
        let akq = m[(k, q)];
        let new_kp = c * akp - s * akq;
        let new_kq = s * akp + c * akq;
        m[(k, p)] = new_kp;
        m[(p, k)] = new_kp;
        m[(k, q)] = new_kq;
        m[(q, k)] = new_kq;
    }
    for k in 0..n {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_symmetric(n: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = DenseMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        a.symmetrize();
        a
    }

    fn orthogonality_defect(q: &DenseMatrix) -> f64 {
        let qtq = q.t_matmul(q).unwrap();
        qtq.sub(&DenseMatrix::identity(q.rows())).unwrap().frobenius_norm()
    }

    #[test]
    fn diagonal_input_sorts_ascending() {
        let e = sym_eig(&DenseMatrix::from_diag(&[2.0, 1.0]), 1e-12).unwrap();
        assert_eq!(e.values, vec![1.0, 2.0]);
        assert_eq!(e.vectors, DenseMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap());
    }

    #[test]
    fn swap_matrix_spectrum() {
        let a = DenseMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let e = sym_eig(&a, 1e-12).unwrap();
        assert!((e.values[0] + 1.0).abs() < 1e-15);
        assert!((e.values[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn random_8x8_reconstructs() {
        let a = random_symmetric(8, 7);
        let e = sym_eig(&a, 1e-12).unwrap();
        let err = e.reconstruct().sub(&a).unwrap().frobenius_norm();
        assert!(err <= 1e-10 * a.frobenius_norm(), "reconstruction error {err}");
        assert!(e.values.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn orthonormal_at_200() {
        let a = random_symmetric(200, 11);
        let e = sym_eig(&a, 1e-12).unwrap();
        assert!(orthogonality_defect(&e.vectors) <= 1e-10);
        let err = e.reconstruct().sub(&a).unwrap().frobenius_norm();
        assert!(err <= 1e-10 * a.frobenius_norm());
    }

    #[test]
    fn rejects_non_square_and_asymmetric() {
        assert!(matches!(sym_eig(&DenseMatrix::zeros(2, 3), 1e-12), Err(Error::Shape(_))));
        let a = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![2.5, 1.0]]).unwrap();
        assert!(matches!(sym_eig(&a, 1e-6), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_matrix() {
        let e = sym_eig(&DenseMatrix::zeros(3, 3), 1e-12).unwrap();
        assert_eq!(e.values, vec![0.0; 3]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn eigenvectors_orthonormal(n in 1usize..40, seed in any::<u64>()) {
            let a = random_symmetric(n, seed);
            let e = sym_eig(&a, 1e-12).unwrap();
            prop_assert!(orthogonality_defect(&e.vectors) <= 1e-10);
            let err = e.reconstruct().sub(&a).unwrap().frobenius_norm();
            prop_assert!(err <= 1e-10 * a.frobenius_norm().max(1e-300));
        }
    }
}
