//! Dense and sparse linear-algebra helpers.
//!
//! nalgebra is the matrix type used across the crate. The expensive kernels
//! (symmetric eigendecomposition, thin SVD, sparse Cholesky) are delegated to
//! faer, which is an order of magnitude faster at the sizes used here
//! (a few thousand rows). faer is built without its thread pool, so every
//! result is independent of the machine's parallelism.

use faer::prelude::*;
use faer::sparse::{SparseColMat, Triplet};
use faer::Side;
use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

fn to_faer(m: &DMatrix<f64>) -> Mat<f64> {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

fn from_faer(m: MatRef<'_, f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Flip column signs so that each column's entry of largest magnitude is
/// positive (first such entry on ties). Makes decompositions reproducible.
pub fn canonicalize_signs(vectors: &mut DMatrix<f64>) {
    for mut col in vectors.column_iter_mut() {
        let mut best = 0.0_f64;
        let mut sign = 1.0;
        for &v in col.iter() {
            if v.abs() > best {
                best = v.abs();
                sign = v.signum();
            }
        }
        if sign < 0.0 {
            col.neg_mut();
        }
    }
}

/// Eigenpairs of a symmetric matrix, eigenvalues non-increasing.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

impl SymmetricEigen {
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |a, v| a.max(v.abs()))
    }

    /// Number of eigenvalues above `rel_tol` times the largest one.
    pub fn numerical_rank(&self, rel_tol: f64) -> usize {
        let top = self.values.iter().cloned().fold(0.0_f64, f64::max);
        if top <= 0.0 {
            return 0;
        }
        self.values.iter().filter(|&&v| v > rel_tol * top).count()
    }

    /// `V diag(f(λ)) Vᵀ`, symmetrized.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let mut scaled = self.vectors.clone();
        for (k, mut col) in scaled.column_iter_mut().enumerate() {
            col *= f(self.values[k]);
        }
        let mut out = scaled * self.vectors.transpose();
        symmetrize(&mut out);
        out
    }
}

/// Full eigendecomposition of a symmetric matrix (only the lower triangle is read).
pub fn symmetric_eigen(m: &DMatrix<f64>) -> Result<SymmetricEigen> {
    assert_eq!(m.nrows(), m.ncols(), "symmetric_eigen needs a square matrix");
    let n = m.nrows();
    if n == 0 {
        return Ok(SymmetricEigen {
            values: DVector::zeros(0),
            vectors: DMatrix::zeros(0, 0),
        });
    }
    let evd = to_faer(m)
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::Numerical(format!("eigendecomposition failed: {e:?}")))?;
    let s = evd.S().column_vector();
    let u = evd.U();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let values = DVector::from_iterator(n, order.iter().map(|&k| s[k]));
    let mut vectors = DMatrix::from_fn(n, n, |i, j| u[(i, order[j])]);
    canonicalize_signs(&mut vectors);
    Ok(SymmetricEigen { values, vectors })
}

/// Thin SVD `m = U diag(s) Vᵀ` with non-increasing singular values and
/// canonical signs on `U` (compensated in `V`).
pub struct ThinSvd {
    pub u: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    pub v: DMatrix<f64>,
}

pub fn thin_svd(m: &DMatrix<f64>) -> Result<ThinSvd> {
    let k = m.nrows().min(m.ncols());
    let svd = to_faer(m)
        .thin_svd()
        .map_err(|e| Error::Numerical(format!("SVD failed: {e:?}")))?;
    let s = svd.S().column_vector();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let fu = svd.U();
    let fv = svd.V();
    let mut u = DMatrix::from_fn(m.nrows(), k, |i, j| fu[(i, order[j])]);
    let mut v = DMatrix::from_fn(m.ncols(), k, |i, j| fv[(i, order[j])]);
    let singular_values = DVector::from_iterator(k, order.iter().map(|&j| s[j]));
    let before = u.clone();
    canonicalize_signs(&mut u);
    for j in 0..k {
        if before.column(j).dot(&u.column(j)) < 0.0 {
            v.column_mut(j).neg_mut();
        }
    }
    Ok(ThinSvd {
        u,
        singular_values,
        v,
    })
}

/// Principal angles (radians, ascending) between the column spans of two
/// matrices with orthonormal columns.
pub fn principal_angles(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Vec<f64> {
    let m = a.tr_mul(b);
    let sv = m.singular_values();
    let mut angles: Vec<f64> = sv.iter().map(|s| s.clamp(-1.0, 1.0).acos()).collect();
    angles.sort_by(f64::total_cmp);
    angles
}

/// In-place `(A + Aᵀ)/2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Solve `A X = B` for symmetric positive-definite `A` via Cholesky.
/// Returns `None` when the factorization breaks down.
pub fn spd_solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let chol = nalgebra::linalg::Cholesky::new(a.clone())?;
    Some(chol.solve(b))
}

/// Cholesky factorization of a dense symmetric positive-definite matrix
/// (faer backend, lower triangle read).
pub struct SpdFactor {
    llt: faer::linalg::solvers::Llt<f64>,
    n: usize,
}

impl SpdFactor {
    /// Returns `None` when the matrix is not numerically positive definite.
    pub fn new(a: &DMatrix<f64>) -> Option<Self> {
        assert_eq!(a.nrows(), a.ncols(), "SpdFactor needs a square matrix");
        let llt = to_faer(a).llt(Side::Lower).ok()?;
        Some(Self { llt, n: a.nrows() })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// `A⁻¹ B`.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        from_faer(self.llt.solve(to_faer(b).as_ref()).as_ref())
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let x = self.solve(&DMatrix::from_column_slice(b.len(), 1, b.as_slice()));
        DVector::from_column_slice(x.as_slice())
    }
}

/// Minimum-norm solve of a symmetric PSD system through its eigendecomposition.
/// Eigenvalues at or below `abs_tol` are treated as exact zeros.
pub fn psd_pinv_solve(a: &DMatrix<f64>, b: &DMatrix<f64>, abs_tol: f64) -> Result<DMatrix<f64>> {
    let eig = symmetric_eigen(a)?;
    let proj = eig.vectors.transpose() * b;
    let mut scaled = proj;
    for (k, mut row) in scaled.row_iter_mut().enumerate() {
        let l = eig.values[k];
        if l > abs_tol {
            row /= l;
        } else {
            row.fill(0.0);
        }
    }
    Ok(&eig.vectors * scaled)
}

/// Accumulates a sparse symmetric matrix by triplets and solves it with a
/// sparse Cholesky factorization (fill-reducing ordering chosen by faer).
pub struct SparseSpdSystem {
    n: usize,
    triplets: Vec<Triplet<usize, usize, f64>>,
}

impl SparseSpdSystem {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            triplets: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Adds `v` at `(row, col)`; duplicates are summed.
    #[inline]
    pub fn add(&mut self, row: usize, col: usize, v: f64) {
        if v != 0.0 {
            self.triplets.push(Triplet::new(row, col, v));
        }
    }

    pub fn solve(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let m = SparseColMat::<usize, f64>::try_new_from_triplets(self.n, self.n, &self.triplets)
            .map_err(|e| Error::Numerical(format!("sparse assembly failed: {e:?}")))?;
        let llt = m
            .sp_cholesky(Side::Lower)
            .map_err(|_| Error::Singular("normal equations are not positive definite".into()))?;
        let x = llt.solve(&to_faer(rhs));
        let out = from_faer(x.as_ref());
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Singular("non-finite solution of normal equations".into()));
        }
        Ok(out)
    }
}
