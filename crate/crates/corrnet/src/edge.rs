//! Credible-set edge detection: per-pair shortest credible intervals over
//! posterior correlation samples, and the batch-mean CLT transform used to
//! summarize multimodal mixture posteriors with a moment-matched unimodal
//! surrogate.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::core_math::{hpd_interval, CorrelationMatrix};
use crate::error::{Error, Result};
use crate::inference::{
    posterior_siw_ensemble, IsConfig, PosteriorSamples, PosteriorState,
};
use crate::samplers::{uniform_index, IwSampler, RngSeed};

/// How a graph's intervals were produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectionMethod {
    Direct,
    BatchClt,
}

/// One pair's credible bounds; serialized as `[k, k', lo, hi, significant]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(
    from = "(usize, usize, f64, f64, bool)",
    into = "(usize, usize, f64, f64, bool)"
)]
pub struct Edge {
    pub row: usize,
    pub col: usize,
    pub lo: f64,
    pub hi: f64,
    pub significant: bool,
}

impl From<(usize, usize, f64, f64, bool)> for Edge {
    fn from(t: (usize, usize, f64, f64, bool)) -> Self {
        Self {
            row: t.0,
            col: t.1,
            lo: t.2,
            hi: t.3,
            significant: t.4,
        }
    }
}

impl From<Edge> for (usize, usize, f64, f64, bool) {
    fn from(e: Edge) -> Self {
        (e.row, e.col, e.lo, e.hi, e.significant)
    }
}

/// Binary significant-edge graph with the per-pair credible intervals it was
/// decided from. An edge is significant exactly when 0 lies outside its
/// interval, and the adjacency matrix is that indicator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeGraph {
    #[serde(rename = "K")]
    pub dim: usize,
    pub prob: f64,
    pub method: DetectionMethod,
    pub edges: Vec<Edge>,
    pub adjacency: Vec<Vec<u8>>,
}

impl EdgeGraph {
    fn from_intervals(
        dim: usize,
        prob: f64,
        method: DetectionMethod,
        intervals: Vec<(usize, usize, f64, f64)>,
    ) -> Self {
        let mut adjacency = vec![vec![0u8; dim]; dim];
        let mut edges = Vec::with_capacity(intervals.len());
        for (i, j, lo, hi) in intervals {
            let significant = !(lo <= 0.0 && 0.0 <= hi);
            if significant {
                adjacency[i][j] = 1;
                adjacency[j][i] = 1;
            }
            edges.push(Edge {
                row: i,
                col: j,
                lo,
                hi,
                significant,
            });
        }
        Self {
            dim,
            prob,
            method,
            edges,
            adjacency,
        }
    }

    pub fn is_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency[i][j] == 1
    }

    pub fn edge_count(&self) -> usize {
        self.edges.iter().filter(|e| e.significant).count()
    }

    pub fn pair_count(&self) -> usize {
        self.dim * (self.dim - 1) / 2
    }
}

/// Transformed batch means: per batch l, the matrix
/// M(l) = sqrt(S) (batchMean_l - overallMean) + overallMean, which keeps the
/// posterior mean and restores the full (un-averaged) posterior variance.
#[derive(Debug, Clone)]
pub struct BatchEstimates {
    pub batch_size: usize,
    pub overall_mean: DMatrix<f64>,
    pub values: Vec<DMatrix<f64>>,
}

impl BatchEstimates {
    pub(crate) fn from_batch_means(
        means: Vec<DMatrix<f64>>,
        batch_size: usize,
        overall_mean: DMatrix<f64>,
    ) -> Self {
        let root_s = (batch_size as f64).sqrt();
        let values = means
            .into_iter()
            .map(|m| {
                let k = m.nrows();
                DMatrix::from_fn(k, k, |i, j| {
                    root_s * (m[(i, j)] - overall_mean[(i, j)]) + overall_mean[(i, j)]
                })
            })
            .collect();
        Self {
            batch_size,
            overall_mean,
            values,
        }
    }

    pub fn n_batches(&self) -> usize {
        self.values.len()
    }

    /// The l transformed values of one pair.
    pub fn pair_values(&self, i: usize, j: usize) -> Vec<f64> {
        self.values.iter().map(|m| m[(i, j)]).collect()
    }

    /// Shortest credible intervals over the transformed batch values.
    pub fn to_graph(&self, prob: f64) -> Result<EdgeGraph> {
        let k = self.overall_mean.nrows();
        let mut intervals = Vec::with_capacity(k * (k - 1) / 2);
        for i in 0..k {
            for j in (i + 1)..k {
                let (lo, hi) = hpd_interval(&self.pair_values(i, j), prob)?;
                intervals.push((i, j, lo, hi));
            }
        }
        Ok(EdgeGraph::from_intervals(
            k,
            prob,
            DetectionMethod::BatchClt,
            intervals,
        ))
    }
}

/// Detection settings: ensemble budget (m draws, weights clipped at
/// m^clip_exp), batch layout (l batches of s draws), credibility level, the
/// number of exact draws used for the separate overall-mean run, and whether
/// to skip that run and reuse the batch draws' own grand mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectConfig {
    pub m: usize,
    pub clip_exp: f64,
    pub l: usize,
    pub s: usize,
    pub prob: f64,
    pub mean_draws: usize,
    pub reuse_mean: bool,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            m: 10_000,
            clip_exp: 0.6,
            l: 1_000,
            s: 500,
            prob: 0.9,
            mean_draws: 2_000,
            reuse_mean: false,
        }
    }
}

impl DetectConfig {
    pub fn validate(&self) -> Result<()> {
        if self.s < 30 {
            return Err(Error::ConfigError(format!(
                "batch size must be at least 30 for the CLT transform; got {}",
                self.s
            )));
        }
        if self.l < 10 {
            return Err(Error::ConfigError(format!(
                "need at least 10 batches; got {}",
                self.l
            )));
        }
        if !(self.prob > 0.0 && self.prob < 1.0) {
            return Err(Error::ConfigError(format!(
                "credibility level {} outside (0,1)",
                self.prob
            )));
        }
        if self.m == 0 || self.mean_draws == 0 {
            return Err(Error::ConfigError("draw budgets must be positive".into()));
        }
        Ok(())
    }

    pub fn is_config(&self) -> IsConfig {
        IsConfig::new(self.m, self.clip_exp)
    }
}

/// Per-pair shortest credible set over raw posterior samples; an edge is kept
/// exactly when 0 falls outside the set.
pub fn detect_edges_direct(samples: &PosteriorSamples, prob: f64) -> Result<EdgeGraph> {
    if samples.corr.len() < 500 {
        return Err(Error::DataError(format!(
            "direct detection needs at least 500 samples; got {}",
            samples.corr.len()
        )));
    }
    let k = samples.corr[0].dim();
    let mut intervals = Vec::with_capacity(k * (k - 1) / 2);
    let mut values = vec![0.0_f64; samples.corr.len()];
    for i in 0..k {
        for j in (i + 1)..k {
            for (v, r) in values.iter_mut().zip(&samples.corr) {
                *v = r.matrix()[(i, j)];
            }
            let (lo, hi) = hpd_interval(&values, prob)?;
            intervals.push((i, j, lo, hi));
        }
    }
    Ok(EdgeGraph::from_intervals(
        k,
        prob,
        DetectionMethod::Direct,
        intervals,
    ))
}

/// Applies the sqrt(S) recentering to per-batch means of the given samples.
/// The overall mean should come from a higher-precision estimate than the
/// samples themselves when available.
pub fn batch_clt_transform(
    samples: &[CorrelationMatrix],
    l: usize,
    s: usize,
    overall_mean: &DMatrix<f64>,
) -> Result<BatchEstimates> {
    if l == 0 || s == 0 {
        return Err(Error::InvalidInput("batch layout must be nonempty".into()));
    }
    if l * s > samples.len() {
        return Err(Error::DataError(format!(
            "batch layout {l} x {s} needs {} samples; got {}",
            l * s,
            samples.len()
        )));
    }
    let k = overall_mean.nrows();
    let mut means = Vec::with_capacity(l);
    for b in 0..l {
        let mut acc = DMatrix::zeros(k, k);
        for r in &samples[b * s..(b + 1) * s] {
            acc += r.matrix();
        }
        means.push(acc / s as f64);
    }
    Ok(BatchEstimates::from_batch_means(
        means,
        s,
        overall_mean.clone(),
    ))
}

struct MixtureDrawer {
    eta: f64,
    iw: Option<IwSampler>,
    corrs: Option<Vec<DMatrix<f64>>>,
    cumulative: Option<Vec<f64>>,
    rng: rand_chacha::ChaCha8Rng,
}

impl MixtureDrawer {
    fn draw_correlation(&mut self) -> DMatrix<f64> {
        use rand::Rng;
        let pick_iw = self.rng.random::<f64>() < self.eta;
        if pick_iw {
            let cov = self.iw.as_ref().expect("eta > 0").draw(&mut self.rng);
            CorrelationMatrix::from_spd_covariance(&cov).matrix().clone()
        } else {
            let idx = uniform_index(
                self.cumulative.as_ref().expect("eta < 1"),
                &mut self.rng,
            );
            self.corrs.as_ref().expect("eta < 1")[idx].clone()
        }
    }
}

/// Mixture-posterior edge detection: one proposal ensemble, l batches of s
/// component-allocated resampled correlation draws, the batch-mean transform
/// around a separately estimated overall mean, and shortest credible sets over
/// the transformed values.
pub fn detect_edges_mixture(
    state: &PosteriorState,
    config: &DetectConfig,
    seed: RngSeed,
) -> Result<EdgeGraph> {
    config.validate()?;
    let k = state.dim()?;
    let eta = state.eta_post;

    let iw = if eta > 0.0 {
        let p = state
            .iw_post
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("state lacks an IW component".into()))?;
        Some(IwSampler::new(&p.scale()?, p.nu())?)
    } else {
        None
    };
    // Materialize the ensemble's induced correlations once; every resample is
    // then an index lookup.
    let (corrs, weights) = if eta < 1.0 {
        let ens = posterior_siw_ensemble(state, &config.is_config(), seed.substream(0xed9e))?;
        let corrs: Vec<DMatrix<f64>> = (0..ens.len())
            .map(|m| {
                CorrelationMatrix::from_spd_covariance(&ens.covariance(m))
                    .matrix()
                    .clone()
            })
            .collect();
        let weights = ens.weights().to_vec();
        (Some(corrs), Some(weights))
    } else {
        (None, None)
    };
    let cumulative = weights.as_ref().map(|w| {
        let mut acc = 0.0;
        let mut c: Vec<f64> = w
            .iter()
            .map(|v| {
                acc += v;
                acc
            })
            .collect();
        let last = c.len() - 1;
        c[last] = 1.0;
        c
    });

    // Overall mean: mixture of the exact-draw IW mean and the importance
    // weighted ensemble mean, each at higher precision than one batch.
    let overall_mean = if config.reuse_mean {
        None
    } else {
        let mut mean = DMatrix::zeros(k, k);
        if eta > 0.0 {
            let sampler = iw.as_ref().expect("eta > 0");
            let mut rng = seed.substream(0xbea7).rng();
            let mut acc = DMatrix::zeros(k, k);
            for _ in 0..config.mean_draws {
                acc += CorrelationMatrix::from_spd_covariance(&sampler.draw(&mut rng)).matrix();
            }
            mean += eta * acc / config.mean_draws as f64;
        }
        if eta < 1.0 {
            let corrs = corrs.as_ref().expect("eta < 1");
            let weights = weights.as_ref().expect("eta < 1");
            let mut acc = DMatrix::zeros(k, k);
            for (w, r) in weights.iter().zip(corrs) {
                acc += *w * r;
            }
            mean += (1.0 - eta) * acc;
        }
        Some(mean)
    };

    let mut drawer = MixtureDrawer {
        eta,
        iw,
        corrs,
        cumulative,
        rng: seed.substream(0xba7c).rng(),
    };

    // Stream the l x s draws: only per-batch sums are kept.
    let mut batch_means = Vec::with_capacity(config.l);
    for _ in 0..config.l {
        let mut acc = DMatrix::zeros(k, k);
        for _ in 0..config.s {
            acc += drawer.draw_correlation();
        }
        batch_means.push(acc / config.s as f64);
    }
    let overall_mean = overall_mean.unwrap_or_else(|| {
        let mut grand = DMatrix::zeros(k, k);
        for m in &batch_means {
            grand += m;
        }
        grand / config.l as f64
    });
    BatchEstimates::from_batch_means(batch_means, config.s, overall_mean).to_graph(config.prob)
}
