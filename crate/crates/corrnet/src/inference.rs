//! Conjugate posterior updates, marginal likelihoods, mixture-weight
//! updating, posterior sampling of correlation matrices, posterior moment
//! formulas, and predictive model scoring.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::core_math::{CorrelationMatrix, SufficientStats};
use crate::error::{Error, Result};
use crate::priors::{
    iw_corr_moments_raw, iw_log_const, mixture_corr_moments_raw, CalibrationTable, IwParams,
    MixtureParams, Siw1Params,
};
use crate::samplers::{
    clip_log_weights, normalize_log_weights, siw1_proposal_draw, uniform_index, ImportanceEnsemble,
    IwSampler, RngSeed,
};
use crate::samplers::{clip_and_normalize, siw1_proposal_ensemble};

/// Which posterior a fit produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Iw,
    Siw1,
    Mixture,
    FixedWeightMixture,
}

/// Importance-sampling budget: ensemble size and the clip-size exponent
/// (clip size = M^clip_exp).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IsConfig {
    pub m: usize,
    pub clip_exp: f64,
}

impl Default for IsConfig {
    fn default() -> Self {
        Self {
            m: 500_000,
            clip_exp: 0.9,
        }
    }
}

impl IsConfig {
    pub fn new(m: usize, clip_exp: f64) -> Self {
        Self { m, clip_exp }
    }

    pub fn m_n(&self) -> usize {
        ((self.m as f64).powf(self.clip_exp).ceil() as usize).clamp(1, self.m)
    }
}

/// Fitted posterior: updated component hyperparameters, posterior mixture
/// weight, and (for the evidence-weighted mixture) the component log marginal
/// likelihoods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorState {
    pub kind: ModelKind,
    pub iw_post: Option<IwParams>,
    pub siw_post: Option<Siw1Params>,
    pub eta_post: f64,
    pub log_l0: Option<f64>,
    pub log_l1: Option<f64>,
    pub log_l1_stderr: Option<f64>,
    pub n: usize,
}

impl PosteriorState {
    pub fn dim(&self) -> Result<usize> {
        self.iw_post
            .as_ref()
            .map(IwParams::dim)
            .or_else(|| self.siw_post.as_ref().map(Siw1Params::dim))
            .ok_or_else(|| Error::InvalidInput("posterior state has no components".into()))
    }
}

/// Posterior correlation draws with their component allocations.
#[derive(Debug, Clone)]
pub struct PosteriorSamples {
    pub corr: Vec<CorrelationMatrix>,
    pub labels: Vec<ModelKind>,
    pub seed: RngSeed,
    /// Set when the shrinkage ensemble's effective sample size fell below 100.
    pub low_ess: bool,
}

/// Posterior scale update shared by both families: Psi_n = Psi + T, i.e.
/// sigma_{n,k} = sqrt(sigma_k^2 + n S_kk) and
/// P_{n,kk'} = (sigma_k sigma_k' P_kk' + n S_kk') / (sigma_{n,k} sigma_{n,k'}).
fn update_scale(
    p: &CorrelationMatrix,
    sigma: &[f64],
    stats: &SufficientStats,
) -> (CorrelationMatrix, Vec<f64>) {
    let k = p.dim();
    let t = stats.scatter();
    let sigma_n: Vec<f64> = (0..k)
        .map(|i| (sigma[i] * sigma[i] + t[(i, i)]).sqrt())
        .collect();
    let p_n = DMatrix::from_fn(k, k, |i, j| {
        if i == j {
            1.0
        } else {
            (sigma[i] * sigma[j] * p.matrix()[(i, j)] + t[(i, j)]) / (sigma_n[i] * sigma_n[j])
        }
    });
    (
        CorrelationMatrix::new(p_n).expect("posterior correlation stays valid"),
        sigma_n,
    )
}

fn require_sigma<'a>(sigma: Option<&'a [f64]>) -> Result<&'a [f64]> {
    sigma.ok_or_else(|| {
        Error::DomainError("prior sigma is unset; designate sigma before fitting".into())
    })
}

/// Conjugate IW update: nu_n = nu + n plus the shared scale update.
pub fn iw_posterior(prior: &IwParams, stats: &SufficientStats) -> Result<IwParams> {
    if stats.dim() != prior.dim() {
        return Err(Error::InvalidInput("stats dimension mismatch".into()));
    }
    if stats.n() == 0 {
        return Ok(prior.clone());
    }
    let sigma = require_sigma(prior.sigma())?;
    let (p_n, sigma_n) = update_scale(prior.hyper_correlation(), sigma, stats);
    IwParams::new(p_n, sigma_n, prior.nu() + stats.n() as f64)
}

/// Conjugate shrinkage-prior update: the same scale update but nu_n = nu + n/2
/// (the kernel's determinant exponent is nu itself, not (nu + K + 1)/2).
pub fn siw1_posterior(prior: &Siw1Params, stats: &SufficientStats) -> Result<Siw1Params> {
    if stats.dim() != prior.dim() {
        return Err(Error::InvalidInput("stats dimension mismatch".into()));
    }
    if stats.n() == 0 {
        return Ok(prior.clone());
    }
    let sigma = require_sigma(prior.sigma())?;
    let (p_n, sigma_n) = update_scale(prior.hyper_correlation(), sigma, stats);
    Siw1Params::new(p_n, sigma_n, prior.nu() + stats.n() as f64 / 2.0)
}

/// Zero-mean Gaussian log-likelihood of a data block through its sufficient
/// statistics: -(nK/2) ln 2pi - (n/2) ln|Sigma| - 1/2 tr(Sigma^-1 T).
pub fn gaussian_loglik(cov: &DMatrix<f64>, stats: &SufficientStats) -> Result<f64> {
    let k = cov.nrows();
    let n = stats.n() as f64;
    let chol = cov
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite)?;
    let ln_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let trace = chol.solve(&stats.scatter()).trace();
    Ok(-0.5 * n * k as f64 * (2.0 * std::f64::consts::PI).ln() - 0.5 * n * ln_det - 0.5 * trace)
}

/// Exact log marginal likelihood under the IW prior, evaluated entirely in
/// log space: the ratio of prior and posterior normalizing constants times
/// (2 pi)^(-nK/2).
pub fn log_ml_iw(prior: &IwParams, stats: &SufficientStats) -> Result<f64> {
    if stats.n() == 0 {
        return Ok(0.0);
    }
    let scale = prior.scale()?;
    let n = stats.n() as f64;
    let k = prior.dim() as f64;
    let posterior_scale = &scale + stats.scatter();
    Ok(iw_log_const(&scale, prior.nu())?
        - iw_log_const(&posterior_scale, prior.nu() + n)?
        - 0.5 * n * k * (2.0 * std::f64::consts::PI).ln())
}

/// Clipped self-normalized importance-sampling estimate of the log marginal
/// likelihood under the shrinkage prior, with a delta-method standard error
/// and the proposal's effective sample size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Siw1Evidence {
    pub log_ml: f64,
    pub stderr: f64,
    pub ess: f64,
}

pub fn log_ml_siw1(
    prior: &Siw1Params,
    stats: &SufficientStats,
    is: &IsConfig,
    seed: RngSeed,
) -> Result<Siw1Evidence> {
    if prior.nu() <= 1.0 {
        return Err(Error::DomainError(format!(
            "evidence estimation needs nu > 1; got {}",
            prior.nu()
        )));
    }
    if stats.n() == 0 {
        return Ok(Siw1Evidence {
            log_ml: 0.0,
            stderr: 0.0,
            ess: is.m as f64,
        });
    }
    let scale = prior.scale()?;
    let k = prior.dim();
    let n = stats.n() as f64;
    let t = stats.scatter();
    let base = -0.5 * n * k as f64 * (2.0 * std::f64::consts::PI).ln();

    // Stream the proposal: only two scalars per draw are kept.
    let m = is.m;
    let mut raw_w = Vec::with_capacity(m);
    let mut log_f = Vec::with_capacity(m);
    for i in 0..m {
        let mut rng = seed.substream(i as u64).rng();
        let draw = siw1_proposal_draw(&scale, prior.nu(), &mut rng);
        let tg = &t * &draw.frame;
        let mut ln_det = 0.0;
        let mut quad = 0.0;
        for c in 0..k {
            ln_det += draw.eigvals[c].ln();
            quad += draw.frame.column(c).dot(&tg.column(c)) / draw.eigvals[c];
        }
        raw_w.push(draw.raw_log_w);
        log_f.push(base - 0.5 * n * ln_det - 0.5 * quad);
    }
    let weights = normalize_log_weights(&clip_log_weights(&raw_w, is.m_n())?);
    let terms: Vec<f64> = weights
        .iter()
        .zip(&log_f)
        .map(|(p, f)| p.ln() + f)
        .collect();
    let estimate = crate::core_math::log_sum_exp(&terms)?;
    // Delta method on the log scale: with r_m = p_m f_m / mu_hat the variance
    // of the log estimate is approximately sum (r_m - p_m)^2.
    let stderr = weights
        .iter()
        .zip(&terms)
        .map(|(p, t)| {
            let r = (t - estimate).exp();
            (r - p) * (r - p)
        })
        .sum::<f64>()
        .sqrt();
    let ess = 1.0 / weights.iter().map(|p| p * p).sum::<f64>();
    Ok(Siw1Evidence {
        log_ml: estimate,
        stderr,
        ess,
    })
}

/// Numerically stable sigmoid.
fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// IW-only fit.
pub fn fit_iw(prior: &IwParams, stats: &SufficientStats) -> Result<PosteriorState> {
    Ok(PosteriorState {
        kind: ModelKind::Iw,
        iw_post: Some(iw_posterior(prior, stats)?),
        siw_post: None,
        eta_post: 1.0,
        log_l0: None,
        log_l1: None,
        log_l1_stderr: None,
        n: stats.n(),
    })
}

/// Shrinkage-only fit.
pub fn fit_siw1(prior: &Siw1Params, stats: &SufficientStats) -> Result<PosteriorState> {
    Ok(PosteriorState {
        kind: ModelKind::Siw1,
        iw_post: None,
        siw_post: Some(siw1_posterior(prior, stats)?),
        eta_post: 0.0,
        log_l0: None,
        log_l1: None,
        log_l1_stderr: None,
        n: stats.n(),
    })
}

/// Evidence-weighted mixture fit: component conjugate updates plus the
/// posterior weight eta_n = sigmoid(logit(eta) + logL0 - logL1), computed in
/// log space so large evidence gaps cannot overflow. Degenerate prior weights
/// skip the unused component's marginal likelihood.
pub fn mixture_posterior(
    prior: &MixtureParams,
    stats: &SufficientStats,
    is: &IsConfig,
    seed: RngSeed,
) -> Result<PosteriorState> {
    let iw_post = iw_posterior(&prior.iw, stats)?;
    let siw_post = siw1_posterior(&prior.siw, stats)?;
    let eta = prior.eta;
    let (eta_post, log_l0, log_l1, log_l1_stderr) = if eta == 1.0 {
        (1.0, Some(log_ml_iw(&prior.iw, stats)?), None, None)
    } else if eta == 0.0 {
        let ev = log_ml_siw1(&prior.siw, stats, is, seed)?;
        (0.0, None, Some(ev.log_ml), Some(ev.stderr))
    } else {
        let l0 = log_ml_iw(&prior.iw, stats)?;
        let ev = log_ml_siw1(&prior.siw, stats, is, seed)?;
        let eta_post = sigmoid(eta.ln() - (1.0 - eta).ln() + l0 - ev.log_ml);
        (eta_post, Some(l0), Some(ev.log_ml), Some(ev.stderr))
    };
    Ok(PosteriorState {
        kind: ModelKind::Mixture,
        iw_post: Some(iw_post),
        siw_post: Some(siw_post),
        eta_post,
        log_l0,
        log_l1,
        log_l1_stderr,
        n: stats.n(),
    })
}

/// Generalized-Bayes mixture: component posteriors updated, weight kept at its
/// prior value, no marginal likelihoods computed.
pub fn fixed_weight_posterior(
    prior: &MixtureParams,
    stats: &SufficientStats,
) -> Result<PosteriorState> {
    Ok(PosteriorState {
        kind: ModelKind::FixedWeightMixture,
        iw_post: Some(iw_posterior(&prior.iw, stats)?),
        siw_post: Some(siw1_posterior(&prior.siw, stats)?),
        eta_post: prior.eta,
        log_l0: None,
        log_l1: None,
        log_l1_stderr: None,
        n: stats.n(),
    })
}

/// Posterior covariance draws: per draw a Bernoulli(eta_post) component pick;
/// IW draws are exact, shrinkage draws come from importance resampling of one
/// proposal ensemble built at the posterior parameters.
pub(crate) struct PosteriorCovDraws {
    pub covs: Vec<DMatrix<f64>>,
    pub labels: Vec<ModelKind>,
    pub low_ess: bool,
}

pub(crate) fn sample_posterior_covariances(
    state: &PosteriorState,
    count: usize,
    is: &IsConfig,
    seed: RngSeed,
) -> Result<PosteriorCovDraws> {
    let eta = state.eta_post;
    let iw_sampler = if eta > 0.0 {
        let p = state
            .iw_post
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("state lacks an IW component".into()))?;
        Some(IwSampler::new(&p.scale()?, p.nu())?)
    } else {
        None
    };
    let (ensemble, low_ess) = if eta < 1.0 {
        let p = state
            .siw_post
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("state lacks a shrinkage component".into()))?;
        let ens = clip_and_normalize(
            siw1_proposal_ensemble(p, is.m, seed.substream(0xe45e)) ?,
            is.m_n(),
        )?;
        let low = ens.ess() < 100.0;
        (Some(ens), low)
    } else {
        (None, false)
    };
    let cumulative: Option<Vec<f64>> = ensemble.as_ref().map(|e| {
        let mut acc = 0.0;
        let mut c: Vec<f64> = e.weights().iter().map(|w| {
            acc += w;
            acc
        }).collect();
        let last = c.len() - 1;
        c[last] = 1.0;
        c
    });
    let mut rng = seed.rng();
    let mut covs = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let pick_iw = rng.random::<f64>() < eta;
        if pick_iw {
            covs.push(iw_sampler.as_ref().expect("eta > 0").draw(&mut rng));
            labels.push(ModelKind::Iw);
        } else {
            let ens = ensemble.as_ref().expect("eta < 1");
            let idx = uniform_index(cumulative.as_ref().expect("weights"), &mut rng);
            covs.push(ens.covariance(idx));
            labels.push(ModelKind::Siw1);
        }
    }
    Ok(PosteriorCovDraws {
        covs,
        labels,
        low_ess,
    })
}

/// Posterior correlation draws (covariances normalized by their diagonals).
pub fn sample_posterior_correlations(
    state: &PosteriorState,
    count: usize,
    is: &IsConfig,
    seed: RngSeed,
) -> Result<PosteriorSamples> {
    let draws = sample_posterior_covariances(state, count, is, seed)?;
    Ok(PosteriorSamples {
        corr: draws
            .covs
            .iter()
            .map(CorrelationMatrix::from_spd_covariance)
            .collect(),
        labels: draws.labels,
        seed,
        low_ess: draws.low_ess,
    })
}

/// Plugs the posterior parameters into the matching prior-moment formulas.
/// The calibration table is needed whenever a shrinkage component carries
/// posterior weight.
pub fn posterior_corr_moments(
    state: &PosteriorState,
    calib: Option<&CalibrationTable>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    match state.kind {
        ModelKind::Iw => {
            let p = state.iw_post.as_ref().expect("IW state");
            iw_corr_moments_raw(p.hyper_correlation().matrix(), p.nu())
        }
        ModelKind::Siw1 => {
            let p = state.siw_post.as_ref().expect("shrinkage state");
            let calib = calib.ok_or(Error::CalibrationRequired(p.dim()))?;
            let (mean, var) = crate::priors::siw1_corr_moments(p, calib)?;
            let k = p.dim();
            let var_m = DMatrix::from_fn(k, k, |i, j| if i == j { 0.0 } else { var });
            Ok((mean, var_m))
        }
        ModelKind::Mixture | ModelKind::FixedWeightMixture => {
            let p0 = state.iw_post.as_ref().expect("mixture state");
            let p1 = state.siw_post.as_ref().expect("mixture state");
            let calib = calib.ok_or(Error::CalibrationRequired(p1.dim()))?;
            if calib.dim != p1.dim() {
                return Err(Error::CalibrationRequired(p1.dim()));
            }
            mixture_corr_moments_raw(
                p0.hyper_correlation().matrix(),
                p0.nu(),
                p1.hyper_correlation().matrix(),
                p1.nu(),
                state.eta_post,
                calib,
            )
        }
    }
}

/// Predictive scores from posterior draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreResult {
    /// Importance-sampling leave-one-out expected log pointwise predictive
    /// density, with per-point weights truncated at their 99.9th percentile.
    pub elpd_loo: f64,
    pub waic: f64,
    /// Set when truncation removed more than 1% of any point's weight mass.
    pub unstable: bool,
}

pub fn model_score_elpd(
    state: &PosteriorState,
    data: &DMatrix<f64>,
    n_draws: usize,
    is: &IsConfig,
    seed: RngSeed,
) -> Result<ScoreResult> {
    if n_draws < 10 {
        return Err(Error::DomainError("need at least 10 posterior draws".into()));
    }
    let k = data.ncols();
    let n = data.nrows();
    let draws = sample_posterior_covariances(state, n_draws, is, seed)?;
    let s = draws.covs.len();
    // Pointwise log-likelihood matrix, draws x points.
    let mut ll = vec![0.0_f64; s * n];
    let const_term = -0.5 * k as f64 * (2.0 * std::f64::consts::PI).ln();
    let mut x = nalgebra::DVector::zeros(k);
    for (si, cov) in draws.covs.iter().enumerate() {
        let chol = cov
            .clone()
            .cholesky()
            .ok_or(Error::NotPositiveDefinite)?;
        let ln_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        for i in 0..n {
            for j in 0..k {
                x[j] = data[(i, j)];
            }
            let sol = chol.l().solve_lower_triangular(&x).expect("nonsingular");
            ll[si * n + i] = const_term - 0.5 * ln_det - 0.5 * sol.norm_squared();
        }
    }
    let ln_s = (s as f64).ln();
    let mut elpd = 0.0;
    let mut waic = 0.0;
    let mut unstable = false;
    let mut lw = vec![0.0_f64; s];
    let mut col = vec![0.0_f64; s];
    for i in 0..n {
        for si in 0..s {
            col[si] = ll[si * n + i];
            lw[si] = -col[si];
        }
        // Truncate the inverse-likelihood weights at their 99.9th percentile.
        let mut sorted = lw.clone();
        sorted.sort_by(f64::total_cmp);
        let q_idx = (((s as f64) * 0.999).ceil() as usize).clamp(1, s) - 1;
        let cap = sorted[q_idx];
        let total = crate::core_math::log_sum_exp(&lw)?;
        let truncated: Vec<f64> = lw.iter().map(|&v| v.min(cap)).collect();
        let total_trunc = crate::core_math::log_sum_exp(&truncated)?;
        if 1.0 - (total_trunc - total).exp() > 0.01 {
            unstable = true;
        }
        elpd += -(total_trunc - ln_s);
        let log_mean = crate::core_math::log_sum_exp(&col)? - ln_s;
        let mean_ll = col.iter().sum::<f64>() / s as f64;
        let var_ll = col.iter().map(|v| (v - mean_ll) * (v - mean_ll)).sum::<f64>()
            / (s as f64 - 1.0);
        waic += log_mean - var_ll;
    }
    Ok(ScoreResult {
        elpd_loo: elpd,
        waic,
        unstable,
    })
}

// Re-exported for edge detection, which reuses the same ensemble machinery.
pub(crate) fn posterior_siw_ensemble(
    state: &PosteriorState,
    is: &IsConfig,
    seed: RngSeed,
) -> Result<ImportanceEnsemble> {
    let p = state
        .siw_post
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("state lacks a shrinkage component".into()))?;
    clip_and_normalize(siw1_proposal_ensemble(p, is.m, seed)?, is.m_n())
}
