//! Deterministic linear-algebra and statistical primitives shared by the rest
//! of the crate: validated covariance/correlation types, sufficient statistics,
//! eigendecompositions sorted descending, log-sum-exp, HPD intervals, and the
//! condition-number bound on induced correlations.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance for symmetry checks.
const SYM_TOL: f64 = 1e-12;
/// A matrix counts as positive definite when `lambda_min > PD_TOL * lambda_max`.
const PD_TOL: f64 = 1e-10;

/// Symmetric positive-definite matrix of dimension K >= 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceMatrix {
    m: DMatrix<f64>,
}

/// Symmetric positive-semidefinite matrix with unit diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    m: DMatrix<f64>,
}

/// Mean cross-product matrix and scatter of a zero-mean data block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SufficientStats {
    n: usize,
    mean_cross: DMatrix<f64>,
}

/// Eigendecomposition with values sorted descending and orthonormal columns.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

fn check_square(m: &DMatrix<f64>) -> Result<usize> {
    let k = m.nrows();
    if m.ncols() != k {
        return Err(Error::InvalidInput(format!(
            "expected a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(k)
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |a, &v| a.max(v.abs()))
}

fn is_symmetric(m: &DMatrix<f64>) -> bool {
    let scale = max_abs(m).max(1.0);
    let k = m.nrows();
    for i in 0..k {
        for j in (i + 1)..k {
            if (m[(i, j)] - m[(j, i)]).abs() > SYM_TOL * scale {
                return false;
            }
        }
    }
    true
}

impl CovarianceMatrix {
    /// Validates symmetry and positive definiteness.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        let k = check_square(&m)?;
        if k < 2 {
            return Err(Error::InvalidInput(
                "covariance dimension must be at least 2".into(),
            ));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidCovariance("non-finite entry".into()));
        }
        if !is_symmetric(&m) {
            return Err(Error::InvalidCovariance("matrix is not symmetric".into()));
        }
        let eig = eigen_descending_raw(&m);
        let (lmax, lmin) = (eig.values[0], eig.values[k - 1]);
        if !(lmin > PD_TOL * lmax && lmax > 0.0) {
            return Err(Error::NotPositiveDefinite);
        }
        Ok(Self { m })
    }

    /// Wraps a matrix known to be SPD by construction (e.g. `L L^T` from a
    /// sampler). Skips the eigenvalue check; symmetry is enforced exactly.
    pub(crate) fn from_spd_unchecked(mut m: DMatrix<f64>) -> Self {
        let k = m.nrows();
        for i in 0..k {
            for j in (i + 1)..k {
                let v = 0.5 * (m[(i, j)] + m[(j, i)]);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        Self { m }
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.m
    }
}

impl CorrelationMatrix {
    /// Validates unit diagonal (within 1e-8, then snapped to exactly 1),
    /// off-diagonal range, and positive semidefiniteness.
    pub fn new(mut m: DMatrix<f64>) -> Result<Self> {
        let k = check_square(&m)?;
        if k < 2 {
            return Err(Error::InvalidInput(
                "correlation dimension must be at least 2".into(),
            ));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite entry".into()));
        }
        if !is_symmetric(&m) {
            return Err(Error::InvalidInput("matrix is not symmetric".into()));
        }
        for i in 0..k {
            if (m[(i, i)] - 1.0).abs() > 1e-8 {
                return Err(Error::InvalidInput(format!(
                    "diagonal entry {} is {}, expected 1",
                    i,
                    m[(i, i)]
                )));
            }
            m[(i, i)] = 1.0;
            for j in 0..k {
                if i != j && m[(i, j)].abs() > 1.0 + 1e-12 {
                    return Err(Error::InvalidInput(format!(
                        "off-diagonal entry ({i},{j}) = {} outside [-1,1]",
                        m[(i, j)]
                    )));
                }
            }
        }
        let eig = eigen_descending_raw(&m);
        if eig.values[k - 1] < -PD_TOL * eig.values[0].max(1.0) {
            return Err(Error::InvalidInput(
                "matrix is not positive semidefinite".into(),
            ));
        }
        Ok(Self { m })
    }

    /// Normalizes an SPD matrix to its correlation without re-validating
    /// semidefiniteness (preserved by diagonal congruence).
    pub(crate) fn from_spd_covariance(m: &DMatrix<f64>) -> Self {
        Self {
            m: correlation_of(m),
        }
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    /// Smallest eigenvalue must clear the PD threshold; several consumers
    /// (scale construction, sampling) need strict definiteness.
    pub fn require_positive_definite(&self) -> Result<()> {
        let eig = eigen_descending_raw(&self.m);
        let k = self.dim();
        if eig.values[k - 1] > PD_TOL * eig.values[0] {
            Ok(())
        } else {
            Err(Error::NotPositiveDefinite)
        }
    }
}

/// R_kk' = S_kk' / sqrt(S_kk S_k'k'), with exact unit diagonal.
fn correlation_of(m: &DMatrix<f64>) -> DMatrix<f64> {
    let k = m.nrows();
    let inv_sd: Vec<f64> = (0..k).map(|i| 1.0 / m[(i, i)].sqrt()).collect();
    DMatrix::from_fn(k, k, |i, j| {
        if i == j {
            1.0
        } else {
            m[(i, j)] * inv_sd[i] * inv_sd[j]
        }
    })
}

/// Normalizes a covariance matrix by its diagonal.
pub fn induce_correlation(cov: &CovarianceMatrix) -> Result<CorrelationMatrix> {
    let m = cov.matrix();
    if (0..cov.dim()).any(|i| m[(i, i)] <= 0.0) {
        return Err(Error::InvalidCovariance(
            "non-positive diagonal entry".into(),
        ));
    }
    Ok(CorrelationMatrix {
        m: correlation_of(m),
    })
}

/// Equicorrelation matrix (1-rho) I + rho J; rho must lie strictly inside
/// (-1/(K-1), 1) so the matrix is positive definite.
pub fn compound_symmetry(k: usize, rho: f64) -> Result<CorrelationMatrix> {
    if k < 2 {
        return Err(Error::InvalidInput("dimension must be at least 2".into()));
    }
    let lo = -1.0 / (k as f64 - 1.0);
    if !(rho > lo && rho < 1.0) {
        return Err(Error::DomainError(format!(
            "equicorrelation {rho} outside the open interval ({lo}, 1)"
        )));
    }
    Ok(CorrelationMatrix {
        m: DMatrix::from_fn(k, k, |i, j| if i == j { 1.0 } else { rho }),
    })
}

impl SufficientStats {
    /// Statistics of an empty data block (n = 0).
    pub fn empty(dim: usize) -> Self {
        Self {
            n: 0,
            mean_cross: DMatrix::zeros(dim, dim),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// S with S_kk' = (1/n) sum_i x_ki x_k'i.
    pub fn mean_cross(&self) -> &DMatrix<f64> {
        &self.mean_cross
    }

    /// Scatter T = n * S.
    pub fn scatter(&self) -> DMatrix<f64> {
        &self.mean_cross * self.n as f64
    }

    pub fn dim(&self) -> usize {
        self.mean_cross.nrows()
    }

    /// Combines two blocks of observations into one; supports streaming
    /// ingestion.
    pub fn merge(&self, other: &SufficientStats) -> Result<SufficientStats> {
        if self.dim() != other.dim() {
            return Err(Error::InvalidInput("dimension mismatch in merge".into()));
        }
        let n = self.n + other.n;
        if n == 0 {
            return Ok(SufficientStats::empty(self.dim()));
        }
        let scatter = self.scatter() + other.scatter();
        Ok(SufficientStats {
            n,
            mean_cross: scatter / n as f64,
        })
    }
}

/// Cross-product statistics of zero-mean data (one observation per row).
/// The mean is intentionally not subtracted; callers wanting centered data
/// must center before ingestion.
pub fn sufficient_stats(data: &DMatrix<f64>) -> Result<SufficientStats> {
    let n = data.nrows();
    if n < 1 {
        return Err(Error::DataError("need at least one observation".into()));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::DataError("non-finite entry in data".into()));
    }
    let scatter = data.transpose() * data;
    Ok(SufficientStats {
        n,
        mean_cross: scatter / n as f64,
    })
}

/// max(v) + log sum exp(v - max(v)); stable for any finite inputs.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::DomainError("log_sum_exp of an empty list".into()));
    }
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Ok(m);
    }
    let s: f64 = values.iter().map(|v| (v - m).exp()).sum();
    Ok(m + s.ln())
}

/// Shortest interval containing a `prob` fraction of the samples: among all
/// contiguous windows of ceil(prob * N) sorted samples, the minimum-width one,
/// ties broken by the leftmost window.
pub fn hpd_interval(samples: &[f64], prob: f64) -> Result<(f64, f64)> {
    if samples.len() < 10 {
        return Err(Error::DataError(format!(
            "need at least 10 samples for an HPD interval, got {}",
            samples.len()
        )));
    }
    if !(prob > 0.0 && prob < 1.0) {
        return Err(Error::DomainError(format!(
            "credibility level {prob} outside (0,1)"
        )));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    let w = ((prob * n as f64).ceil() as usize).clamp(1, n);
    let mut best = (sorted[0], sorted[w - 1]);
    let mut best_width = best.1 - best.0;
    for i in 1..=(n - w) {
        let width = sorted[i + w - 1] - sorted[i];
        if width < best_width {
            best_width = width;
            best = (sorted[i], sorted[i + w - 1]);
        }
    }
    Ok(best)
}

/// Deterministic bound (kappa - 1)/(kappa + 1) on the magnitude of every
/// induced correlation, where kappa is the condition number of `cov`.
pub fn correlation_bound(cov: &CovarianceMatrix) -> f64 {
    let eig = eigen_descending_raw(cov.matrix());
    let kappa = eig.values[0] / eig.values[cov.dim() - 1];
    (kappa - 1.0) / (kappa + 1.0)
}

/// Symmetric eigendecomposition with values sorted descending.
pub fn eigen_descending(m: &DMatrix<f64>) -> Result<EigenDecomposition> {
    check_square(m)?;
    if !is_symmetric(m) {
        return Err(Error::InvalidInput(
            "eigendecomposition requires a symmetric matrix".into(),
        ));
    }
    Ok(eigen_descending_raw(m))
}

pub(crate) fn eigen_descending_raw(m: &DMatrix<f64>) -> EigenDecomposition {
    let eig = m.clone().symmetric_eigen();
    let k = m.nrows();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = DVector::from_iterator(k, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(k, k);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    EigenDecomposition { values, vectors }
}

impl EigenDecomposition {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let scaled = {
            let mut v = self.vectors.clone();
            for (i, mut col) in v.column_iter_mut().enumerate() {
                col *= self.values[i];
            }
            v
        };
        scaled * self.vectors.transpose()
    }
}
