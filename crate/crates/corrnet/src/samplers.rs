//! Seeded random generation: multivariate normals, inverse-Wishart draws,
//! Haar orthogonal frames, inverse-gamma and LKJ draws, the eigenvalue-frame
//! proposal ensemble for the shrinkage prior, weight clipping/normalization,
//! and importance resampling.
//!
//! Determinism contract: every public sampler is a pure function of
//! `(inputs, RngSeed)`. Ensembles derive one counter-indexed substream per
//! draw, so results do not depend on how draws are scheduled across workers.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, ChiSquared, Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::core_math::{CorrelationMatrix, CovarianceMatrix};
use crate::error::{Error, Result};
use crate::priors::{IwParams, Siw1Params};

/// Seed plus substream index; identical pairs reproduce identical draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngSeed {
    pub seed: u64,
    pub stream: u64,
}

impl RngSeed {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }

    /// Counter-derived child stream; used to give each ensemble draw its own
    /// stream so parallel scheduling cannot change results.
    pub fn substream(&self, index: u64) -> Self {
        Self {
            seed: self.seed,
            stream: self
                .stream
                .wrapping_add((index + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        }
    }
}

/// `n` iid rows from N(0, cov).
pub fn sample_mvn(cov: &CovarianceMatrix, n: usize, seed: RngSeed) -> Result<DMatrix<f64>> {
    let k = cov.dim();
    let chol = cov
        .matrix()
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite)?;
    let l = chol.l();
    let mut rng = seed.rng();
    let mut out = DMatrix::zeros(n, k);
    let mut z = DVector::zeros(k);
    for i in 0..n {
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let x = &l * &z;
        for j in 0..k {
            out[(i, j)] = x[j];
        }
    }
    Ok(out)
}

/// Reusable inverse-Wishart sampler: draws Wishart(Psi^-1, nu) by the Bartlett
/// construction and inverts, so non-integer degrees of freedom are supported.
pub(crate) struct IwSampler {
    /// Cholesky factor of Psi^-1.
    l: DMatrix<f64>,
    nu: f64,
    k: usize,
}

impl IwSampler {
    pub fn new(scale: &DMatrix<f64>, nu: f64) -> Result<Self> {
        let k = scale.nrows();
        if nu <= k as f64 - 1.0 {
            return Err(Error::DomainError(format!(
                "inverse-Wishart needs nu > K - 1; got nu = {nu}, K = {k}"
            )));
        }
        let chol = scale.clone().cholesky().ok_or(Error::NotPositiveDefinite)?;
        let scale_inv = chol.inverse();
        let l = scale_inv
            .cholesky()
            .ok_or(Error::NotPositiveDefinite)?
            .l();
        Ok(Self { l, nu, k })
    }

    pub fn draw(&self, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let k = self.k;
        // Lower-triangular Bartlett factor: chi on the diagonal, normal below.
        let mut a = DMatrix::zeros(k, k);
        for i in 0..k {
            let chi = ChiSquared::new(self.nu - i as f64).expect("valid dof");
            a[(i, i)] = chi.sample(rng).sqrt();
            for j in 0..i {
                a[(i, j)] = rng.sample(StandardNormal);
            }
        }
        // W = (L A)(L A)^T ~ Wishart(Psi^-1, nu); Sigma = W^-1 = C^T C with
        // C = (L A)^-1, computed by a triangular solve.
        let w = &self.l * a;
        let c = w
            .solve_lower_triangular(&DMatrix::identity(k, k))
            .expect("triangular factor is invertible");
        c.transpose() * c
    }
}

/// `n` draws from the inverse-Wishart with scale Diag(sigma) P Diag(sigma).
pub fn sample_iw(params: &IwParams, n: usize, seed: RngSeed) -> Result<Vec<CovarianceMatrix>> {
    let sampler = IwSampler::new(&params.scale()?, params.nu())?;
    let mut rng = seed.rng();
    Ok((0..n)
        .map(|_| CovarianceMatrix::from_spd_unchecked(sampler.draw(&mut rng)))
        .collect())
}

/// Haar-distributed orthogonal frame: QR of a standard Gaussian matrix with
/// each Q column sign-corrected by the sign of the matching R diagonal entry
/// (without the correction the frame is not exactly Haar).
pub(crate) fn haar_frame(k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(k, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = a.qr();
    let r = qr.r();
    let mut q = qr.q();
    for i in 0..k {
        if r[(i, i)] < 0.0 {
            for v in q.column_mut(i).iter_mut() {
                *v = -*v;
            }
        }
    }
    q
}

pub fn sample_haar_orthogonal(k: usize, seed: RngSeed) -> Result<DMatrix<f64>> {
    if k < 2 {
        return Err(Error::DomainError("dimension must be at least 2".into()));
    }
    Ok(haar_frame(k, &mut seed.rng()))
}

/// Inverse-gamma draw in the (shape, rate) convention: density proportional to
/// x^(-shape-1) exp(-rate/x), mean rate/(shape-1).
pub(crate) fn draw_inverse_gamma(rng: &mut ChaCha8Rng, shape: f64, rate: f64) -> f64 {
    // If Y ~ Gamma(shape, scale = 1/rate) then 1/Y has the target density.
    let g = Gamma::new(shape, 1.0 / rate).expect("positive parameters");
    1.0 / g.sample(rng)
}

pub fn sample_inverse_gamma(shape: f64, rate: f64, seed: RngSeed) -> Result<f64> {
    if shape <= 0.0 || rate <= 0.0 {
        return Err(Error::DomainError(format!(
            "inverse-gamma parameters must be positive; got shape {shape}, rate {rate}"
        )));
    }
    Ok(draw_inverse_gamma(&mut seed.rng(), shape, rate))
}

/// Uniform point on the unit sphere in R^m.
fn sphere_point(m: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = v.norm();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

pub(crate) fn lkj_draw(k: usize, eta: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    // Onion construction: grow the matrix one dimension at a time, drawing the
    // squared length of the new correlation row from a Beta distribution and
    // its direction uniformly inside the current ellipsoid.
    let mut beta_param = eta + (k as f64 - 2.0) / 2.0;
    let b = Beta::new(beta_param, beta_param).expect("positive parameters");
    let r12: f64 = 2.0 * b.sample(rng) - 1.0;
    let mut r = DMatrix::from_row_slice(2, 2, &[1.0, r12, r12, 1.0]);
    for m in 2..k {
        beta_param -= 0.5;
        let y = Beta::new(m as f64 / 2.0, beta_param)
            .expect("positive parameters")
            .sample(rng);
        let u = sphere_point(m, rng);
        let w = y.sqrt() * u;
        let a = r
            .clone()
            .cholesky()
            .expect("onion intermediate stays positive definite")
            .l();
        let q = a * w;
        let mut next = DMatrix::zeros(m + 1, m + 1);
        next.view_mut((0, 0), (m, m)).copy_from(&r);
        for i in 0..m {
            next[(i, m)] = q[i];
            next[(m, i)] = q[i];
        }
        next[(m, m)] = 1.0;
        r = next;
    }
    r
}

/// LKJ-distributed correlation matrix; eta = 1 is uniform over correlation
/// matrices.
pub fn sample_lkj(k: usize, eta: f64, seed: RngSeed) -> Result<CorrelationMatrix> {
    if k < 2 {
        return Err(Error::DomainError("dimension must be at least 2".into()));
    }
    if eta <= 0.0 {
        return Err(Error::DomainError("LKJ concentration must be > 0".into()));
    }
    CorrelationMatrix::new(lkj_draw(k, eta, &mut seed.rng()))
}

/// Exact draws from the shrinkage prior when the scale is c * I: the
/// eigenvector frame is Haar and the eigenvalues are iid inverse-gamma with
/// shape nu - 1 and rate c/2.
pub fn sample_siw1_identity(
    scale: f64,
    nu: f64,
    k: usize,
    n: usize,
    seed: RngSeed,
) -> Result<Vec<CovarianceMatrix>> {
    if nu <= 1.0 {
        return Err(Error::DomainError(format!(
            "identity-scale shrinkage sampler needs nu > 1; got {nu}"
        )));
    }
    if scale <= 0.0 || k < 2 {
        return Err(Error::DomainError(
            "scale must be positive and dimension at least 2".into(),
        ));
    }
    let mut rng = seed.rng();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let u = haar_frame(k, &mut rng);
        let lam = DVector::from_fn(k, |_, _| draw_inverse_gamma(&mut rng, nu - 1.0, scale / 2.0));
        out.push(CovarianceMatrix::from_spd_unchecked(reconstruct(&u, &lam)));
    }
    Ok(out)
}

pub(crate) fn reconstruct(frame: &DMatrix<f64>, eigvals: &DVector<f64>) -> DMatrix<f64> {
    let mut scaled = frame.clone();
    for (i, mut col) in scaled.column_iter_mut().enumerate() {
        col *= eigvals[i];
    }
    scaled * frame.transpose()
}

/// One proposal draw for the shrinkage prior: a Haar frame with per-column
/// inverse-gamma eigenvalues, sorted descending, plus its raw log-weight.
#[derive(Debug, Clone)]
pub(crate) struct ProposalDraw {
    pub frame: DMatrix<f64>,
    pub eigvals: DVector<f64>,
    pub raw_log_w: f64,
}

pub(crate) fn siw1_proposal_draw(
    scale: &DMatrix<f64>,
    nu: f64,
    rng: &mut ChaCha8Rng,
) -> ProposalDraw {
    let k = scale.nrows();
    let frame = haar_frame(k, rng);
    let scaled = scale * &frame;
    let mut pairs: Vec<(f64, usize)> = Vec::with_capacity(k);
    let mut raw_log_w = 0.0;
    for i in 0..k {
        let rate = 0.5 * frame.column(i).dot(&scaled.column(i));
        let lam = draw_inverse_gamma(rng, nu - 1.0, rate);
        // The draw-independent Gamma-function constant of the proposal's
        // normalizer is dropped: it cancels under self-normalization.
        raw_log_w -= (nu - 1.0) * rate.ln();
        pairs.push((lam, i));
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let eigvals = DVector::from_iterator(k, pairs.iter().map(|p| p.0));
    let mut sorted_frame = DMatrix::zeros(k, k);
    for (dst, &(_, src)) in pairs.iter().enumerate() {
        sorted_frame.set_column(dst, &frame.column(src));
    }
    ProposalDraw {
        frame: sorted_frame,
        eigvals,
        raw_log_w,
    }
}

/// Materialized proposal ensemble: frames, eigenvalues, and raw / clipped /
/// normalized importance weights.
#[derive(Debug, Clone)]
pub struct ImportanceEnsemble {
    dim: usize,
    frames: Vec<DMatrix<f64>>,
    eigvals: Vec<DVector<f64>>,
    raw_log_w: Vec<f64>,
    clipped_log_w: Vec<f64>,
    norm_w: Vec<f64>,
    clip_size: usize,
}

impl ImportanceEnsemble {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn raw_log_weights(&self) -> &[f64] {
        &self.raw_log_w
    }

    pub fn clipped_log_weights(&self) -> &[f64] {
        &self.clipped_log_w
    }

    pub fn weights(&self) -> &[f64] {
        &self.norm_w
    }

    pub fn clip_size(&self) -> usize {
        self.clip_size
    }

    pub fn eigvals(&self, m: usize) -> &DVector<f64> {
        &self.eigvals[m]
    }

    pub fn frame(&self, m: usize) -> &DMatrix<f64> {
        &self.frames[m]
    }

    /// Reconstructed covariance of draw `m`.
    pub fn covariance(&self, m: usize) -> DMatrix<f64> {
        reconstruct(&self.frames[m], &self.eigvals[m])
    }

    /// Effective sample size 1 / sum(p^2) of the normalized weights.
    pub fn ess(&self) -> f64 {
        1.0 / self.norm_w.iter().map(|p| p * p).sum::<f64>()
    }
}

/// Proposal ensemble of `m` draws targeting the shrinkage prior with the given
/// parameters. Weights start unclipped (clip size = m).
pub fn siw1_proposal_ensemble(
    params: &Siw1Params,
    m: usize,
    seed: RngSeed,
) -> Result<ImportanceEnsemble> {
    if params.nu() <= 1.0 {
        return Err(Error::DomainError(format!(
            "proposal requires nu > 1; got {}",
            params.nu()
        )));
    }
    if m < 1 {
        return Err(Error::DomainError("ensemble size must be >= 1".into()));
    }
    let scale = params.scale()?;
    let k = params.dim();
    let mut frames = Vec::with_capacity(m);
    let mut eigvals = Vec::with_capacity(m);
    let mut raw_log_w = Vec::with_capacity(m);
    for i in 0..m {
        let mut rng = seed.substream(i as u64).rng();
        let draw = siw1_proposal_draw(&scale, params.nu(), &mut rng);
        frames.push(draw.frame);
        eigvals.push(draw.eigvals);
        raw_log_w.push(draw.raw_log_w);
    }
    let norm_w = normalize_log_weights(&raw_log_w);
    Ok(ImportanceEnsemble {
        dim: k,
        frames,
        eigvals,
        clipped_log_w: raw_log_w.clone(),
        raw_log_w,
        norm_w,
        clip_size: m,
    })
}

/// Flattens every log-weight above the `m_n`-th greatest down to it.
pub(crate) fn clip_log_weights(raw: &[f64], m_n: usize) -> Result<Vec<f64>> {
    if m_n < 1 || m_n > raw.len() {
        return Err(Error::DomainError(format!(
            "clip size {m_n} outside 1..={}",
            raw.len()
        )));
    }
    let mut sorted = raw.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let threshold = sorted[m_n - 1];
    Ok(raw.iter().map(|&w| w.min(threshold)).collect())
}

/// Exponentiates log-weights after subtracting the max (no overflow) and
/// normalizes to probabilities.
pub(crate) fn normalize_log_weights(log_w: &[f64]) -> Vec<f64> {
    let m = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = log_w.iter().map(|&v| (v - m).exp()).collect();
    let total: f64 = w.iter().sum();
    for v in w.iter_mut() {
        *v /= total;
    }
    w
}

/// Clips the ensemble's raw weights at the `m_n`-th greatest and renormalizes.
pub fn clip_and_normalize(mut ensemble: ImportanceEnsemble, m_n: usize) -> Result<ImportanceEnsemble> {
    let clipped = clip_log_weights(&ensemble.raw_log_w, m_n)?;
    ensemble.norm_w = normalize_log_weights(&clipped);
    ensemble.clipped_log_w = clipped;
    ensemble.clip_size = m_n;
    Ok(ensemble)
}

/// One index draw from an inverse-CDF lookup over `cumulative` weights.
pub(crate) fn uniform_index(cumulative: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    cumulative
        .partition_point(|&c| c < u)
        .min(cumulative.len() - 1)
}

/// Multinomial index draws proportional to the normalized weights.
pub(crate) fn resample_indices(weights: &[f64], count: usize, seed: RngSeed) -> Vec<usize> {
    let mut cumulative = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for &w in weights {
        acc += w;
        cumulative.push(acc);
    }
    let last = cumulative.len() - 1;
    cumulative[last] = 1.0;
    let mut rng = seed.rng();
    (0..count)
        .map(|_| uniform_index(&cumulative, &mut rng))
        .collect()
}

/// Multinomial resampling of reconstructed covariances from the ensemble.
pub fn importance_resample(
    ensemble: &ImportanceEnsemble,
    count: usize,
    seed: RngSeed,
) -> Result<Vec<CovarianceMatrix>> {
    if ensemble.is_empty() {
        return Err(Error::DomainError("empty ensemble".into()));
    }
    Ok(resample_indices(ensemble.weights(), count, seed)
        .into_iter()
        .map(|i| CovarianceMatrix::from_spd_unchecked(ensemble.covariance(i)))
        .collect())
}
