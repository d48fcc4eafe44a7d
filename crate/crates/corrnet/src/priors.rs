//! Hyperparameter containers for the inverse-Wishart (IW) prior, the
//! shrinkage inverse-Wishart prior (SIW, eigenvalue-repulsion exponent b = 1),
//! and their two-component mixture; density/kernel evaluation; and the
//! first-order moment formulas for the correlation matrix each prior induces.
//!
//! Scale convention: the matrix scale is Psi = Diag(sigma) P Diag(sigma), so
//! Psi_kk = sigma_k^2 and P is the hyper-correlation.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use std::sync::OnceLock;

use crate::core_math::{eigen_descending_raw, CorrelationMatrix};
use crate::error::{Error, Result};

/// Inverse-Wishart hyperparameters in correlation-variance form.
/// `sigma` may be left unset by elicitation; operations needing the matrix
/// scale will then error until a sigma designation step fills it in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IwParams {
    p: CorrelationMatrix,
    sigma: Option<Vec<f64>>,
    nu: f64,
}

/// Shrinkage-prior hyperparameters; same (P, sigma, nu) form. The degrees of
/// freedom may be any real; sampling needs nu > 1 and the variance formula
/// nu > 3.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Siw1Params {
    p: CorrelationMatrix,
    sigma: Option<Vec<f64>>,
    nu: f64,
}

/// Two-component prior: with probability eta the covariance comes from the IW
/// component, otherwise from the shrinkage component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    pub eta: f64,
    pub iw: IwParams,
    pub siw: Siw1Params,
}

fn check_sigma(sigma: &[f64], dim: usize) -> Result<()> {
    if sigma.len() != dim {
        return Err(Error::InvalidInput(format!(
            "sigma has length {}, expected {dim}",
            sigma.len()
        )));
    }
    if sigma.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::DomainError(
            "all scale entries must be positive and finite".into(),
        ));
    }
    Ok(())
}

fn scale_from(p: &CorrelationMatrix, sigma: &Option<Vec<f64>>) -> Result<DMatrix<f64>> {
    let sigma = sigma.as_ref().ok_or_else(|| {
        Error::DomainError("scale vector sigma is unset; designate sigma first".into())
    })?;
    let k = p.dim();
    Ok(DMatrix::from_fn(k, k, |i, j| {
        p.matrix()[(i, j)] * sigma[i] * sigma[j]
    }))
}

impl IwParams {
    pub fn new(p: CorrelationMatrix, sigma: Vec<f64>, nu: f64) -> Result<Self> {
        check_sigma(&sigma, p.dim())?;
        Self::validate(&p, nu)?;
        Ok(Self {
            p,
            sigma: Some(sigma),
            nu,
        })
    }

    pub fn without_sigma(p: CorrelationMatrix, nu: f64) -> Result<Self> {
        Self::validate(&p, nu)?;
        Ok(Self { p, sigma: None, nu })
    }

    fn validate(p: &CorrelationMatrix, nu: f64) -> Result<()> {
        p.require_positive_definite()?;
        if !(nu > p.dim() as f64 - 1.0) {
            return Err(Error::DomainError(format!(
                "inverse-Wishart degrees of freedom must exceed K - 1; got {nu}"
            )));
        }
        Ok(())
    }

    pub fn with_sigma(&self, sigma: Vec<f64>) -> Result<Self> {
        check_sigma(&sigma, self.dim())?;
        Ok(Self {
            p: self.p.clone(),
            sigma: Some(sigma),
            nu: self.nu,
        })
    }

    pub fn dim(&self) -> usize {
        self.p.dim()
    }

    pub fn hyper_correlation(&self) -> &CorrelationMatrix {
        &self.p
    }

    pub fn sigma(&self) -> Option<&[f64]> {
        self.sigma.as_deref()
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    /// Matrix scale Psi = Diag(sigma) P Diag(sigma).
    pub fn scale(&self) -> Result<DMatrix<f64>> {
        scale_from(&self.p, &self.sigma)
    }
}

impl Siw1Params {
    pub fn new(p: CorrelationMatrix, sigma: Vec<f64>, nu: f64) -> Result<Self> {
        check_sigma(&sigma, p.dim())?;
        p.require_positive_definite()?;
        Ok(Self {
            p,
            sigma: Some(sigma),
            nu,
        })
    }

    pub fn without_sigma(p: CorrelationMatrix, nu: f64) -> Result<Self> {
        p.require_positive_definite()?;
        Ok(Self { p, sigma: None, nu })
    }

    pub fn with_sigma(&self, sigma: Vec<f64>) -> Result<Self> {
        check_sigma(&sigma, self.dim())?;
        Ok(Self {
            p: self.p.clone(),
            sigma: Some(sigma),
            nu: self.nu,
        })
    }

    pub fn dim(&self) -> usize {
        self.p.dim()
    }

    pub fn hyper_correlation(&self) -> &CorrelationMatrix {
        &self.p
    }

    pub fn sigma(&self) -> Option<&[f64]> {
        self.sigma.as_deref()
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn scale(&self) -> Result<DMatrix<f64>> {
        scale_from(&self.p, &self.sigma)
    }
}

impl MixtureParams {
    pub fn new(eta: f64, iw: IwParams, siw: Siw1Params) -> Result<Self> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::DomainError(format!(
                "mixture weight {eta} outside [0,1]"
            )));
        }
        if iw.dim() != siw.dim() {
            return Err(Error::InvalidInput(
                "mixture components have mismatched dimensions".into(),
            ));
        }
        Ok(Self { eta, iw, siw })
    }

    pub fn dim(&self) -> usize {
        self.iw.dim()
    }
}

/// Fitted constants translating shrinkage-prior hyperparameters into induced
/// correlation moments for one dimension K: the mean slope c(K), the variance
/// curve a + exp(b nu + c), and per-nu linear maps from sigma_k to E[Sigma_kk]
/// used for sigma designation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTable {
    #[serde(rename = "K")]
    pub dim: usize,
    pub slope: f64,
    pub var_a: f64,
    pub var_b: f64,
    pub var_c: f64,
    pub sigma_surface: Vec<SigmaSurfaceEntry>,
}

/// E[Sigma_kk] ~ intercept + slope * sigma_k at one degrees-of-freedom value,
/// fitted over sigma in [0.5, 10].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaSurfaceEntry {
    pub nu: f64,
    pub intercept: f64,
    pub slope: f64,
}

/// Lower end of the sigma grid the surface is fitted over.
pub const SIGMA_GRID_MIN: f64 = 0.5;
/// Upper end of the sigma grid the surface is fitted over.
pub const SIGMA_GRID_MAX: f64 = 10.0;

static SHIPPED_K20: OnceLock<CalibrationTable> = OnceLock::new();

impl CalibrationTable {
    pub fn new(
        dim: usize,
        slope: f64,
        var_a: f64,
        var_b: f64,
        var_c: f64,
        sigma_surface: Vec<SigmaSurfaceEntry>,
    ) -> Result<Self> {
        let table = Self {
            dim,
            slope,
            var_a,
            var_b,
            var_c,
            sigma_surface,
        };
        table.check()?;
        Ok(table)
    }

    fn check(&self) -> Result<()> {
        if !(self.slope > 0.0 && self.slope < 1.0) {
            return Err(Error::CalibrationError(format!(
                "mean slope {} outside (0,1)",
                self.slope
            )));
        }
        if self.var_a < 0.0 {
            return Err(Error::CalibrationError(
                "variance floor must be nonnegative".into(),
            ));
        }
        Ok(())
    }

    /// Table shipped with the crate for K = 20; other dimensions require a
    /// calibrate run.
    pub fn shipped_k20() -> &'static CalibrationTable {
        SHIPPED_K20.get_or_init(|| {
            serde_json::from_str(include_str!("../assets/calibration_k20.json"))
                .expect("bundled calibration table parses")
        })
    }

    /// Returns the shipped table for the dimension if one exists.
    pub fn shipped(dim: usize) -> Option<&'static CalibrationTable> {
        (dim == 20).then(Self::shipped_k20)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let table: CalibrationTable = serde_json::from_str(text)?;
        table.check()?;
        Ok(table)
    }

    /// Induced-correlation variance a + exp(b nu + c).
    pub fn variance_at(&self, nu: f64) -> f64 {
        self.var_a + (self.var_b * nu + self.var_c).exp()
    }

    /// Inverts the variance curve; errors when the target is at or below the
    /// floor `a`.
    pub fn nu_for_variance(&self, var: f64) -> Result<f64> {
        if var <= self.var_a {
            return Err(Error::UnreachableVariance {
                target: var,
                floor: self.var_a,
            });
        }
        Ok(((var - self.var_a).ln() - self.var_c) / self.var_b)
    }

    /// Linear map (intercept, slope) from sigma_k to E[Sigma_kk] at `nu`,
    /// interpolated between the bracketing fitted entries.
    pub fn sigma_map_at(&self, nu: f64) -> Result<(f64, f64)> {
        if self.sigma_surface.is_empty() {
            return Err(Error::CalibrationRequired(self.dim));
        }
        let mut entries = self.sigma_surface.clone();
        entries.sort_by(|a, b| a.nu.total_cmp(&b.nu));
        if nu < entries[0].nu || nu > entries[entries.len() - 1].nu {
            return Err(Error::DomainError(format!(
                "nu = {nu} outside the calibrated sigma-surface range [{}, {}]",
                entries[0].nu,
                entries[entries.len() - 1].nu
            )));
        }
        for pair in entries.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            if nu <= b.nu {
                if (b.nu - a.nu).abs() < 1e-12 {
                    return Ok((a.intercept, a.slope));
                }
                let t = (nu - a.nu) / (b.nu - a.nu);
                return Ok((
                    a.intercept + t * (b.intercept - a.intercept),
                    a.slope + t * (b.slope - a.slope),
                ));
            }
        }
        let last = entries[entries.len() - 1];
        Ok((last.intercept, last.slope))
    }

    /// Smallest E[Sigma_kk] reachable over the fitted sigma grid at `nu`.
    pub fn sigma_floor_at(&self, nu: f64) -> Result<f64> {
        let (alpha, beta) = self.sigma_map_at(nu)?;
        Ok(alpha + beta * SIGMA_GRID_MIN)
    }
}

/// Log multivariate gamma function of order k.
pub(crate) fn ln_mv_gamma(k: usize, a: f64) -> f64 {
    let base = (k * (k - 1)) as f64 / 4.0 * std::f64::consts::PI.ln();
    base + (1..=k)
        .map(|j| ln_gamma(a + (1.0 - j as f64) / 2.0))
        .sum::<f64>()
}

/// Log normalizing constant of the IW density:
/// (nu/2) ln|Psi| - (nu K / 2) ln 2 - ln Gamma_K(nu/2).
pub(crate) fn iw_log_const(scale: &DMatrix<f64>, nu: f64) -> Result<f64> {
    let k = scale.nrows();
    let chol = scale.clone().cholesky().ok_or(Error::NotPositiveDefinite)?;
    let ln_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(0.5 * nu * ln_det - 0.5 * nu * k as f64 * 2.0_f64.ln() - ln_mv_gamma(k, nu / 2.0))
}

pub(crate) fn iw_log_density_raw(
    sigma_mat: &DMatrix<f64>,
    scale: &DMatrix<f64>,
    nu: f64,
) -> Result<f64> {
    let k = sigma_mat.nrows();
    let chol = sigma_mat
        .clone()
        .cholesky()
        .ok_or_else(|| Error::DomainError("covariance is numerically singular".into()))?;
    let ln_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let trace = chol.solve(scale).trace();
    Ok(iw_log_const(scale, nu)? - 0.5 * (nu + k as f64 + 1.0) * ln_det - 0.5 * trace)
}

/// Full IW log-density at `cov`, including the normalizing constant.
pub fn iw_log_density(cov: &crate::core_math::CovarianceMatrix, params: &IwParams) -> Result<f64> {
    if cov.dim() != params.dim() {
        return Err(Error::InvalidInput("dimension mismatch".into()));
    }
    iw_log_density_raw(cov.matrix(), &params.scale()?, params.nu())
}

/// Unnormalized log-density of the shrinkage prior:
/// -1/2 tr(Psi Sigma^-1) - nu ln|Sigma| - sum_{i<j} ln(lambda_i - lambda_j).
/// Undefined (error) when the spectrum has ties.
pub fn siw1_log_kernel(
    cov: &crate::core_math::CovarianceMatrix,
    params: &Siw1Params,
) -> Result<f64> {
    if cov.dim() != params.dim() {
        return Err(Error::InvalidInput("dimension mismatch".into()));
    }
    let scale = params.scale()?;
    let eig = eigen_descending_raw(cov.matrix());
    let k = cov.dim();
    let lmax = eig.values[0];
    for i in 1..k {
        if eig.values[i - 1] - eig.values[i] <= 1e-12 * lmax {
            return Err(Error::DegenerateSpectrum);
        }
    }
    let mut trace = 0.0;
    let mut ln_det = 0.0;
    for i in 0..k {
        let u = eig.vectors.column(i);
        trace += u.dot(&(&scale * u)) / eig.values[i];
        ln_det += eig.values[i].ln();
    }
    let mut log_vandermonde = 0.0;
    for i in 0..k {
        for j in (i + 1)..k {
            log_vandermonde += (eig.values[i] - eig.values[j]).ln();
        }
    }
    Ok(-0.5 * trace - params.nu() * ln_det - log_vandermonde)
}

fn symmetric_from_offdiag(k: usize, diag: f64, f: impl Fn(usize, usize) -> f64) -> DMatrix<f64> {
    DMatrix::from_fn(k, k, |i, j| if i == j { diag } else { f(i.min(j), i.max(j)) })
}

/// First-order mean and variance of the correlations an IW prior induces:
/// E(R_kk') = P_kk' (1 - (1 - P_kk'^2) / (2(nu - K + 2))),
/// V(R_kk') = (1 - P_kk'^2)^2 / (nu - K + 1).
/// Requires nu > K + 3 for the variance to exist.
pub fn iw_corr_moments(params: &IwParams) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    iw_corr_moments_raw(params.hyper_correlation().matrix(), params.nu())
}

pub(crate) fn iw_corr_moments_raw(
    p: &DMatrix<f64>,
    nu: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let k = p.nrows();
    if !(nu > k as f64 + 3.0) {
        return Err(Error::MomentUndefined(format!(
            "correlation moments need nu > K + 3; got nu = {nu}, K = {k}"
        )));
    }
    let kf = k as f64;
    let mean = symmetric_from_offdiag(k, 1.0, |i, j| {
        let r = p[(i, j)];
        r * (1.0 - (1.0 - r * r) / (2.0 * (nu - kf + 2.0)))
    });
    let var = symmetric_from_offdiag(k, 0.0, |i, j| {
        let r = p[(i, j)];
        let t = 1.0 - r * r;
        t * t / (nu - kf + 1.0)
    });
    Ok((mean, var))
}

/// Calibrated first-order moments of the correlations the shrinkage prior
/// induces: mean c(K) * P entrywise and a pair-independent variance
/// a + exp(b nu + c).
pub fn siw1_corr_moments(
    params: &Siw1Params,
    calib: &CalibrationTable,
) -> Result<(DMatrix<f64>, f64)> {
    if calib.dim != params.dim() {
        return Err(Error::CalibrationRequired(params.dim()));
    }
    if !(params.nu() > 3.0) {
        return Err(Error::MomentUndefined(format!(
            "shrinkage variance curve needs nu > 3; got {}",
            params.nu()
        )));
    }
    let p = params.hyper_correlation().matrix();
    let mean = symmetric_from_offdiag(params.dim(), 1.0, |i, j| calib.slope * p[(i, j)]);
    Ok((mean, calib.variance_at(params.nu())))
}

/// Mixture moments by the law of total mean/variance with leading-order
/// component means: mean = eta P0 + c(K)(1 - eta) P1 and variance
/// eta V0 + (1 - eta) V1 + eta(1 - eta) P0^2. At K = 20 the component V0 uses
/// the calibrated literal 1/(nu0 - 19); other dimensions use the full
/// (1 - P0^2)^2 / (nu0 - K + 1).
pub fn mixture_corr_moments(
    params: &MixtureParams,
    calib: &CalibrationTable,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let k = params.dim();
    if calib.dim != k {
        return Err(Error::CalibrationRequired(k));
    }
    mixture_corr_moments_raw(
        params.iw.hyper_correlation().matrix(),
        params.iw.nu(),
        params.siw.hyper_correlation().matrix(),
        params.siw.nu(),
        params.eta,
        calib,
    )
}

pub(crate) fn mixture_corr_moments_raw(
    p0: &DMatrix<f64>,
    nu0: f64,
    p1: &DMatrix<f64>,
    nu1: f64,
    eta: f64,
    calib: &CalibrationTable,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let k = p0.nrows();
    let kf = k as f64;
    if eta > 0.0 && !(nu0 > kf + 3.0) {
        return Err(Error::MomentUndefined(format!(
            "IW component needs nu > K + 3; got nu = {nu0}, K = {k}"
        )));
    }
    if eta < 1.0 && !(nu1 > 3.0) {
        return Err(Error::MomentUndefined(format!(
            "shrinkage component needs nu > 3; got {nu1}"
        )));
    }
    let c = calib.slope;
    let v1 = if eta < 1.0 { calib.variance_at(nu1) } else { 0.0 };
    let mean = symmetric_from_offdiag(k, 1.0, |i, j| {
        eta * p0[(i, j)] + c * (1.0 - eta) * p1[(i, j)]
    });
    let var = symmetric_from_offdiag(k, 0.0, |i, j| {
        let r0 = p0[(i, j)];
        let v0 = if eta > 0.0 {
            if k == 20 {
                1.0 / (nu0 - 19.0)
            } else {
                let t = 1.0 - r0 * r0;
                t * t / (nu0 - kf + 1.0)
            }
        } else {
            0.0
        };
        eta * v0 + (1.0 - eta) * v1 + eta * (1.0 - eta) * r0 * r0
    });
    Ok((mean, var))
}
