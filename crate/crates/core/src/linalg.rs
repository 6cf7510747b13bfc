//! Dense real linear algebra used throughout the crate.
//!
//! Matrices and vectors are `nalgebra` dynamic types. The routines here are
//! the handful the rest of the crate needs: real parts of eigenvalues,
//! Lyapunov solves, SPD solves and the regularized Zap gain.

use nalgebra::{Cholesky, Complex, DMatrix, DVector, Dyn};
use thiserror::Error;

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Default absolute tolerance for residual and symmetry checks.
pub const DEFAULT_TOL: f64 = 1e-10;

/// Largest dimension accepted by the Kronecker Lyapunov solver.
pub const MAX_LYAPUNOV_DIM: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not Hurwitz: eigenvalue with real part {max_real_part}")]
    NotHurwitz { max_real_part: f64 },
    #[error("matrix is not symmetric: max |S - S^T| = {asymmetry}")]
    Asymmetric { asymmetry: f64 },
    #[error("matrix contains NaN or infinite entries")]
    NonFinite,
    #[error("matrix is not symmetric positive definite")]
    NotSpd,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: String, got: String },
    #[error("matrix is singular")]
    Singular,
    #[error("eigenvalue iteration did not converge")]
    NoConvergence,
    #[error("dimension {0} exceeds the dense Lyapunov solver limit of {MAX_LYAPUNOV_DIM}")]
    TooLarge(usize),
}

pub type Result<T> = std::result::Result<T, LinalgError>;

fn require_square(a: &Matrix) -> Result<usize> {
    if a.nrows() != a.ncols() {
        return Err(LinalgError::DimensionMismatch {
            expected: "square matrix".into(),
            got: format!("{}x{}", a.nrows(), a.ncols()),
        });
    }
    Ok(a.nrows())
}

fn require_finite(a: &Matrix) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(LinalgError::NonFinite)
    }
}

/// Max absolute entry of `S - S^T`.
pub fn asymmetry(s: &Matrix) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..s.nrows() {
        for j in (i + 1)..s.ncols() {
            worst = worst.max((s[(i, j)] - s[(j, i)]).abs());
        }
    }
    worst
}

pub fn symmetrize(s: &Matrix) -> Matrix {
    (s + s.transpose()) * 0.5
}

/// All eigenvalues of a square real matrix, via Hessenberg reduction and
/// shifted QR (real Schur form).
pub fn eigenvalues(a: &Matrix) -> Result<Vec<Complex<f64>>> {
    let d = require_square(a)?;
    require_finite(a)?;
    if d == 0 {
        return Ok(Vec::new());
    }
    let scale = a.amax();
    if scale == 0.0 {
        return Ok(vec![Complex::new(0.0, 0.0); d]);
    }
    // The deflation test is absolute, so work on a unit-scale copy and cap
    // the sweeps; a looser threshold is the fallback for stubborn inputs.
    let unit = a / scale;
    let max_niter = 1000 * d.max(10);
    let schur = [f64::EPSILON, 1e3 * f64::EPSILON]
        .into_iter()
        .find_map(|eps| unit.clone().try_schur(eps, max_niter))
        .ok_or(LinalgError::NoConvergence)?;
    let vals = schur.complex_eigenvalues();
    Ok(vals.iter().map(|z| z * scale).collect())
}

/// Real parts of the eigenvalues of `a`, sorted in descending order with
/// multiplicity.
pub fn eig_real_parts(a: &Matrix) -> Result<Vec<f64>> {
    let mut re: Vec<f64> = eigenvalues(a)?.into_iter().map(|z| z.re).collect();
    re.sort_by(|x, y| y.total_cmp(x));
    Ok(re)
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn symmetric_eigenvalues(s: &Matrix) -> Result<Vec<f64>> {
    require_square(s)?;
    require_finite(s)?;
    let scale = s.amax();
    if scale == 0.0 {
        return Ok(vec![0.0; s.nrows()]);
    }
    let eig = nalgebra::SymmetricEigen::try_new(symmetrize(s) / scale, f64::EPSILON, 1000 * s.nrows().max(10))
        .ok_or(LinalgError::NoConvergence)?;
    let mut vals: Vec<f64> = eig.eigenvalues.iter().map(|v| v * scale).collect();
    vals.sort_by(|x, y| x.total_cmp(y));
    Ok(vals)
}

/// Solves `M X = B` for symmetric positive definite `M` by Cholesky.
pub fn spd_solve(m: &Matrix, b: &Matrix) -> Result<Matrix> {
    let d = require_square(m)?;
    if b.nrows() != d {
        return Err(LinalgError::DimensionMismatch {
            expected: format!("{d} rows"),
            got: format!("{} rows", b.nrows()),
        });
    }
    require_finite(m)?;
    require_finite(b)?;
    let chol = Cholesky::new(m.clone()).ok_or(LinalgError::NotSpd)?;
    Ok(chol.solve(b))
}

/// The regularized Zap gain `G = -[eps I + Â^T Â]^{-1} Â^T`.
///
/// Computed with a Cholesky solve; `eps I + Â^T Â` is SPD for every `Â`
/// when `eps > 0`, so the result is always finite.
///
/// # Panics
/// If `eps <= 0` or `ahat` is not square.
pub fn zap_gain(ahat: &Matrix, eps: f64) -> Matrix {
    assert!(eps > 0.0, "zap_gain requires eps > 0, got {eps}");
    let d = require_square(ahat).expect("zap_gain requires a square matrix");
    let at = ahat.transpose();
    let mut m = &at * ahat;
    for i in 0..d {
        m[(i, i)] += eps;
    }
    let m = symmetrize(&m);
    let chol = Cholesky::<f64, Dyn>::new(m).expect("eps*I + A^T A is SPD for eps > 0");
    -chol.solve(&at)
}

/// Solves the continuous Lyapunov equation `A Σ + Σ A^T + S = 0` with the
/// default residual tolerance.
pub fn solve_lyapunov(a: &Matrix, s: &Matrix) -> Result<Matrix> {
    solve_lyapunov_with_tol(a, s, DEFAULT_TOL)
}

/// Lyapunov solve by Kronecker vectorization:
/// `(I ⊗ A + A ⊗ I) vec(Σ) = -vec(S)`, followed by one step of iterative
/// refinement when the residual exceeds `tol * (1 + ‖S‖_F)`.
pub fn solve_lyapunov_with_tol(a: &Matrix, s: &Matrix, tol: f64) -> Result<Matrix> {
    let d = require_square(a)?;
    if s.nrows() != d || s.ncols() != d {
        return Err(LinalgError::DimensionMismatch {
            expected: format!("{d}x{d}"),
            got: format!("{}x{}", s.nrows(), s.ncols()),
        });
    }
    require_finite(s)?;
    let asym = asymmetry(s);
    if asym > tol * (1.0 + s.norm()) {
        return Err(LinalgError::Asymmetric { asymmetry: asym });
    }
    if d > MAX_LYAPUNOV_DIM {
        return Err(LinalgError::TooLarge(d));
    }
    let max_re = eig_real_parts(a)?.first().copied().unwrap_or(f64::NEG_INFINITY);
    if max_re >= 0.0 {
        return Err(LinalgError::NotHurwitz { max_real_part: max_re });
    }
    if d == 0 {
        return Ok(Matrix::zeros(0, 0));
    }

    let n = d * d;
    // Column-major vec: vec(AΣ) = (I ⊗ A) vec Σ, vec(ΣA^T) = (A ⊗ I) vec Σ.
    let mut k = Matrix::zeros(n, n);
    for j in 0..d {
        for i in 0..d {
            let row = i + j * d;
            for p in 0..d {
                // (I ⊗ A): Σ_{p} A[i,p] Σ[p,j]
                k[(row, p + j * d)] += a[(i, p)];
                // (A ⊗ I): Σ_{q} A[j,q] Σ[i,q]
                k[(row, i + p * d)] += a[(j, p)];
            }
        }
    }
    let lu = k.lu();
    let rhs = -DVector::from_column_slice(symmetrize(s).as_slice());
    let mut x = lu.solve(&rhs).ok_or(LinalgError::Singular)?;
    let mut sigma = symmetrize(&Matrix::from_column_slice(d, d, x.as_slice()));

    let limit = tol * (1.0 + s.norm());
    let resid = lyapunov_residual(a, &sigma, s);
    if resid.norm() > limit {
        let r = DVector::from_column_slice(resid.as_slice());
        if let Some(dx) = lu.solve(&(-r)) {
            x += dx;
            sigma = symmetrize(&Matrix::from_column_slice(d, d, x.as_slice()));
        }
    }
    Ok(sigma)
}

/// `A Σ + Σ A^T + S`.
pub fn lyapunov_residual(a: &Matrix, sigma: &Matrix, s: &Matrix) -> Matrix {
    a * sigma + sigma * a.transpose() + s
}

/// Solves `A x = b` by LU with partial pivoting.
pub fn solve(a: &Matrix, b: &Vector) -> Result<Vector> {
    require_square(a)?;
    a.clone().lu().solve(b).ok_or(LinalgError::Singular)
}

/// Matrix inverse via LU; errors on exact singularity.
pub fn inverse(a: &Matrix) -> Result<Matrix> {
    require_square(a)?;
    a.clone().try_inverse().ok_or(LinalgError::Singular)
}

/// Singular values with a bounded number of sweeps.
pub fn singular_values(a: &Matrix) -> Result<Vector> {
    require_finite(a)?;
    let scale = a.amax();
    if scale == 0.0 {
        return Ok(Vector::zeros(a.nrows().min(a.ncols())));
    }
    let svd = (a / scale)
        .try_svd(false, false, f64::EPSILON, 1000 * a.nrows().max(a.ncols()).max(10))
        .ok_or(LinalgError::NoConvergence)?;
    Ok(svd.singular_values * scale)
}

/// Ratio of largest to smallest singular value; infinite when singular.
pub fn condition_number(a: &Matrix) -> f64 {
    if a.is_empty() {
        return 1.0;
    }
    let Ok(sv) = singular_values(a) else {
        return f64::INFINITY;
    };
    let max = sv.max();
    let min = sv.min();
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Outer product `u v^T`.
pub fn outer(u: &Vector, v: &Vector) -> Matrix {
    u * v.transpose()
}

pub fn identity(d: usize) -> Matrix {
    Matrix::identity(d, d)
}
