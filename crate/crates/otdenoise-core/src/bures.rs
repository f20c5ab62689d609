//! Symmetric PSD matrix algebra and the Bures-Wasserstein geometry.
//!
//! This module supplies the matrix square roots, PSD truncations, and optimal
//! transport maps between centered Gaussians that the variance-constrained
//! denoisers are built on. The map from covariance `from` to covariance `to`
//! is the symmetric matrix
//!
//! ```text
//! T = from^{-1/2} (from^{1/2} to from^{1/2})^{1/2} from^{-1/2}
//! ```
//!
//! which satisfies `T from T = to` whenever `from` is strictly positive
//! definite.

use crate::linalg::{eigh, Matrix};
use thiserror::Error;

/// Absolute floor underneath every relative tolerance in this module.
pub const ABS_TOL_FLOOR: f64 = 1e-14;

#[derive(Debug, Error)]
pub enum BuresError {
    #[error("matrix is not symmetric: |a[{i}][{j}] - a[{j}][{i}]| = {gap:e}")]
    NonSymmetric { i: usize, j: usize, gap: f64 },
    #[error("matrix is indefinite beyond tolerance: min eigenvalue {min_eig:e} < -1e-6 * {scale:e}")]
    IndefiniteBeyondTolerance { min_eig: f64, scale: f64 },
    #[error(
        "transport source is not strictly positive definite (min eigenvalue {min_eig:e}); \
         consider adding a ridge (CLI flag --pd_ridge)"
    )]
    FromNotPositiveDefinite { min_eig: f64 },
}

/// Symmetric positive semi-definite matrix (up to a small tolerance).
///
/// Construction validates symmetry and rejects matrices whose smallest
/// eigenvalue is below `-1e-6` times the spectral norm; smaller negative
/// eigenvalues are tolerated and treated as zero by the operations here.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix {
    dim: usize,
    data: Vec<f64>,
}

fn check_symmetric(dim: usize, data: &[f64]) -> Result<(), BuresError> {
    let max_abs = data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-12 * (1.0 + max_abs);
    for i in 0..dim {
        for j in (i + 1)..dim {
            let gap = (data[i * dim + j] - data[j * dim + i]).abs();
            if gap > tol {
                return Err(BuresError::NonSymmetric { i, j, gap });
            }
        }
    }
    Ok(())
}

impl SpdMatrix {
    /// Validates symmetry and PSD-ness (up to tolerance) of a flat row-major
    /// buffer. Asymmetry within tolerance is averaged away.
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self, BuresError> {
        assert_eq!(data.len(), dim * dim, "SpdMatrix buffer length mismatch");
        check_symmetric(dim, &data)?;
        let mut sym = data;
        for i in 0..dim {
            for j in (i + 1)..dim {
                let v = 0.5 * (sym[i * dim + j] + sym[j * dim + i]);
                sym[i * dim + j] = v;
                sym[j * dim + i] = v;
            }
        }
        let m = SpdMatrix { dim, data: sym };
        let (min_eig, max_eig) = m.eig_range();
        let scale = max_eig.abs().max(min_eig.abs());
        if min_eig < -1e-6 * scale - ABS_TOL_FLOOR {
            return Err(BuresError::IndefiniteBeyondTolerance { min_eig, scale });
        }
        Ok(m)
    }

    pub fn identity(dim: usize) -> Self {
        Self::diag(&vec![1.0; dim])
    }

    pub fn diag(entries: &[f64]) -> Self {
        let dim = entries.len();
        let mut data = vec![0.0; dim * dim];
        for (i, &v) in entries.iter().enumerate() {
            data[i * dim + i] = v;
        }
        SpdMatrix { dim, data }
    }

    pub fn zeros(dim: usize) -> Self {
        SpdMatrix {
            dim,
            data: vec![0.0; dim * dim],
        }
    }

    /// 1x1 convenience constructor.
    pub fn scalar(v: f64) -> Self {
        SpdMatrix {
            dim: 1,
            data: vec![v],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(self.dim, self.dim, self.data.clone())
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn eigh(&self) -> (Vec<f64>, Matrix) {
        eigh(self.dim, &self.data)
    }

    fn eig_range(&self) -> (f64, f64) {
        let (d, _) = self.eigh();
        (d[0], d[d.len() - 1])
    }

    /// Threshold below which an eigenvalue is considered numerically zero
    /// for positive-definiteness decisions.
    pub fn pd_tolerance(&self) -> f64 {
        let (min_eig, max_eig) = self.eig_range();
        let spectral = max_eig.abs().max(min_eig.abs());
        (1e-10 * spectral).max(ABS_TOL_FLOOR)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eig_range().0
    }

    pub fn is_strictly_pd(&self) -> bool {
        self.min_eigenvalue() > self.pd_tolerance()
    }

    /// self + ridge * I.
    pub fn add_ridge(&self, ridge: f64) -> SpdMatrix {
        let mut data = self.data.clone();
        for i in 0..self.dim {
            data[i * self.dim + i] += ridge;
        }
        SpdMatrix {
            dim: self.dim,
            data,
        }
    }

    pub fn add(&self, other: &SpdMatrix) -> SpdMatrix {
        assert_eq!(self.dim, other.dim);
        SpdMatrix {
            dim: self.dim,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }
}

// V f(d) V^T for the spectral map f.
fn spectral_map(dim: usize, d: &[f64], v: &Matrix, f: impl Fn(f64) -> f64) -> Vec<f64> {
    let mut out = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in i..dim {
            let mut s = 0.0;
            for k in 0..dim {
                s += v.get(i, k) * f(d[k]) * v.get(j, k);
            }
            out[i * dim + j] = s;
            out[j * dim + i] = s;
        }
    }
    out
}

/// Unique PSD square root, computed spectrally with negative eigenvalues
/// clamped to zero.
pub fn psd_sqrt(s: &SpdMatrix) -> SpdMatrix {
    let (d, v) = s.eigh();
    let data = spectral_map(s.dim, &d, &v, |x| x.max(0.0).sqrt());
    SpdMatrix { dim: s.dim, data }
}

/// Projects a symmetric matrix onto the PSD cone by clamping negative
/// eigenvalues at zero (eigenvectors preserved). Idempotent.
pub fn psd_truncate(dim: usize, entries: &[f64]) -> Result<SpdMatrix, BuresError> {
    assert_eq!(entries.len(), dim * dim);
    check_symmetric(dim, entries)?;
    let (d, v) = eigh(dim, entries);
    let data = spectral_map(dim, &d, &v, |x| x.max(0.0));
    Ok(SpdMatrix { dim, data })
}

/// Optimal transport map between centered Gaussians: the symmetric matrix T
/// with T * from * T = to. `from` must be strictly positive definite; callers
/// facing a singular `from` decide for themselves whether a ridge is
/// acceptable (see `SpdMatrix::add_ridge`).
pub fn transport_map(from: &SpdMatrix, to: &SpdMatrix) -> Result<Matrix, BuresError> {
    assert_eq!(from.dim, to.dim, "transport_map dimension mismatch");
    let (d, v) = from.eigh();
    let tol = from.pd_tolerance();
    if d[0] <= tol {
        return Err(BuresError::FromNotPositiveDefinite { min_eig: d[0] });
    }
    let dim = from.dim;
    let half = Matrix::from_vec(dim, dim, spectral_map(dim, &d, &v, f64::sqrt));
    let inv_half = Matrix::from_vec(dim, dim, spectral_map(dim, &d, &v, |x| 1.0 / x.sqrt()));
    let mid = half.matmul(&to.to_matrix()).matmul(&half).symmetrize();
    let (md, mv) = eigh(dim, mid.as_slice());
    let mid_sqrt = Matrix::from_vec(dim, dim, spectral_map(dim, &md, &mv, |x| x.max(0.0).sqrt()));
    Ok(inv_half.matmul(&mid_sqrt).matmul(&inv_half).symmetrize())
}

/// Squared Bures-Wasserstein distance between PSD matrices:
/// tr(A) + tr(B) - 2 tr((A^{1/2} B A^{1/2})^{1/2}).
pub fn bures_distance_sq(a: &SpdMatrix, b: &SpdMatrix) -> f64 {
    assert_eq!(a.dim, b.dim, "bures_distance_sq dimension mismatch");
    let dim = a.dim;
    let a_half = psd_sqrt(a);
    let mid = a_half
        .to_matrix()
        .matmul(&b.to_matrix())
        .matmul(&a_half.to_matrix())
        .symmetrize();
    let (d, _) = eigh(dim, mid.as_slice());
    let cross: f64 = d.iter().map(|&x| x.max(0.0).sqrt()).sum();
    (a.trace() + b.trace() - 2.0 * cross).max(0.0)
}
