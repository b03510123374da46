use super::DenseMatrix;
use crate::error::{Error, Result};

const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

// Largest 1-norm for which the degree-13 Padé approximant is accurate to unit roundoff.
const THETA13: f64 = 5.371920351148152;

/// Matrix exponential by scaling and squaring around a [13/13] Padé core.
pub fn mat_exp(a: &DenseMatrix) -> Result<DenseMatrix> {
    if !a.is_square() {
        return Err(Error::shape(format!(
            "mat_exp needs a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    if !a.is_finite() {
        return Err(Error::input("mat_exp: non-finite entries"));
    }
    let n = a.rows();
    if n == 0 {
        return Ok(DenseMatrix::zeros(0, 0));
    }
    let norm = a.norm_one();
    let squarings = if norm > THETA13 {
        (norm / THETA13).log2().ceil() as i32
    } else {
        0
    };
    let a = a.scaled(0.5f64.powi(squarings));

    let ident = DenseMatrix::identity(n);
    let a2 = a.matmul(&a)?;
    let a4 = a2.matmul(&a2)?;
    let a6 = a4.matmul(&a2)?;
    let b = &PADE13;

    let mut inner_u = a6.scaled(b[13]);
    inner_u.axpy(b[11], &a4);
    inner_u.axpy(b[9], &a2);
    let mut u_poly = a6.matmul(&inner_u)?;
    u_poly.axpy(b[7], &a6);
    u_poly.axpy(b[5], &a4);
    u_poly.axpy(b[3], &a2);
    u_poly.axpy(b[1], &ident);
    let u = a.matmul(&u_poly)?;

    let mut inner_v = a6.scaled(b[12]);
    inner_v.axpy(b[10], &a4);
    inner_v.axpy(b[8], &a2);
    let mut v = a6.matmul(&inner_v)?;
    v.axpy(b[6], &a6);
    v.axpy(b[4], &a4);
    v.axpy(b[2], &a2);
    v.axpy(b[0], &ident);

    let denom = v.sub(&u)?;
    let numer = v.add(&u)?;
    let mut r = lu_solve(&denom, &numer)?;
    for _ in 0..squarings {
        r = r.matmul(&r)?;
    }
    Ok(r)
}

/// Solves `A X = B` by Gaussian elimination with partial pivoting.
pub fn lu_solve(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if !a.is_square() || a.rows() != b.rows() {
        return Err(Error::shape(format!(
            "lu_solve: {}x{} system with {}x{} right-hand side",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let n = a.rows();
    let m = b.cols();
    let mut lu = a.clone();
    let mut x = b.clone();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| lu[(i, col)].abs().total_cmp(&lu[(j, col)].abs()))
            .expect("non-empty pivot range");
        if lu[(pivot, col)] == 0.0 {
            return Err(Error::input("lu_solve: singular matrix"));
        }
        if pivot != col {
            for j in 0..n {
                let tmp = lu[(col, j)];
                lu[(col, j)] = lu[(pivot, j)];
                lu[(pivot, j)] = tmp;
            }
            for j in 0..m {
                let tmp = x[(col, j)];
                x[(col, j)] = x[(pivot, j)];
                x[(pivot, j)] = tmp;
            }
        }
        let d = lu[(col, col)];
        for i in (col + 1)..n {
            let f = lu[(i, col)] / d;
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                lu[(i, j)] -= f * lu[(col, j)];
            }
            for j in 0..m {
                x[(i, j)] -= f * x[(col, j)];
            }
        }
    }
    for col in (0..n).rev() {
        let d = lu[(col, col)];
        for j in 0..m {
            let mut s = x[(col, j)];
            for k in (col + 1)..n {
                s -= lu[(col, k)] * x[(k, j)];
            }
            x[(col, j)] = s / d;
        }
    }
    Ok(x)
}
