//! Dataset ingestion, synthetic-data simulation, the binary posterior-sample
//! store, run configuration, and the end-to-end pipeline that ties the stages
//! together and writes its artifacts to disk.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::core_math::{
    compound_symmetry, sufficient_stats, CorrelationMatrix, CovarianceMatrix, SufficientStats,
};
use crate::edge::{detect_edges_direct, detect_edges_mixture, DetectConfig, EdgeGraph};
use crate::elicitation::{
    elicit_iw, elicit_mixture, elicit_siw1, sigma_empirical_iw, sigma_match_siw1,
    ElicitationTarget, MeanTarget, MixtureSplit,
};
use crate::error::{Error, Result};
use crate::inference::{
    fit_iw, fit_siw1, fixed_weight_posterior, mixture_posterior, model_score_elpd,
    posterior_corr_moments, sample_posterior_correlations, IsConfig, ModelKind, PosteriorState,
    ScoreResult,
};
use crate::priors::{CalibrationTable, IwParams, MixtureParams, Siw1Params};
use crate::samplers::{sample_mvn, RngSeed};

/// In-memory time-series table: n rows (time steps) by K columns (regions).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub data: DMatrix<f64>,
    pub labels: Vec<String>,
    /// Per-column multipliers applied at load time, if any.
    pub rescale: Option<Vec<f64>>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn stats(&self) -> Result<SufficientStats> {
        sufficient_stats(&self.data)
    }
}

/// Load-time preprocessing switches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadOptions {
    /// Subtract each column's mean.
    pub center: bool,
    /// Rescale every column to the average sample variance, so all S_kk are
    /// equal afterwards. Correlations are unchanged by this.
    pub rescale_common_variance: bool,
}

/// Reads a header-row CSV of reals into a `Dataset`, reporting malformed cells
/// with their one-based row and column.
pub fn load_timeseries_csv(path: &Path, options: &LoadOptions) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)?;
    let labels: Vec<String> = reader
        .headers()?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    let k = labels.len();
    if k < 2 {
        return Err(Error::DataError(format!(
            "need at least 2 columns; header has {k}"
        )));
    }
    for (i, a) in labels.iter().enumerate() {
        if labels[i + 1..].contains(a) {
            return Err(Error::ParseError {
                row: 1,
                col: i + 1,
                message: format!("duplicate column label `{a}`"),
            });
        }
    }
    let mut rows: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for (ridx, record) in reader.records().enumerate() {
        let record = record?;
        let row = ridx + 2; // one-based, after the header
        if record.len() != k {
            return Err(Error::ParseError {
                row,
                col: record.len().min(k),
                message: format!("expected {k} fields, found {}", record.len()),
            });
        }
        for (cidx, field) in record.iter().enumerate() {
            let value: f64 = field.trim().parse().map_err(|_| Error::ParseError {
                row,
                col: cidx + 1,
                message: format!("`{field}` is not a number"),
            })?;
            if !value.is_finite() {
                return Err(Error::ParseError {
                    row,
                    col: cidx + 1,
                    message: format!("non-finite value {value}"),
                });
            }
            rows.push(value);
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::DataError("file has no data rows".into()));
    }
    let mut data = DMatrix::from_row_slice(n, k, &rows);

    if options.center {
        for mut col in data.column_iter_mut() {
            let mean = col.iter().sum::<f64>() / n as f64;
            for v in col.iter_mut() {
                *v -= mean;
            }
        }
    }
    let rescale = if options.rescale_common_variance {
        let vars: Vec<f64> = (0..k)
            .map(|j| data.column(j).iter().map(|v| v * v).sum::<f64>() / n as f64)
            .collect();
        if vars.iter().any(|&v| v <= 0.0) {
            return Err(Error::DataError(
                "a column has zero sample variance; cannot rescale".into(),
            ));
        }
        let target = vars.iter().sum::<f64>() / k as f64;
        let factors: Vec<f64> = vars.iter().map(|&v| (target / v).sqrt()).collect();
        for (j, &f) in factors.iter().enumerate() {
            for v in data.column_mut(j).iter_mut() {
                *v *= f;
            }
        }
        Some(factors)
    } else {
        None
    };
    Ok(Dataset {
        data,
        labels,
        rescale,
    })
}

/// Synthetic-data correlation structures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Generator {
    Identity,
    Compound { rho: f64 },
    Blocks { sizes: Vec<usize>, rho_in: f64 },
}

impl Generator {
    pub fn correlation(&self, k: usize) -> Result<CorrelationMatrix> {
        match self {
            Generator::Identity => CorrelationMatrix::new(DMatrix::identity(k, k)),
            Generator::Compound { rho } => {
                if *rho == 0.0 {
                    CorrelationMatrix::new(DMatrix::identity(k, k))
                } else {
                    compound_symmetry(k, *rho)
                }
            }
            Generator::Blocks { sizes, rho_in } => {
                if sizes.iter().sum::<usize>() != k {
                    return Err(Error::DomainError(format!(
                        "block sizes sum to {}, expected {k}",
                        sizes.iter().sum::<usize>()
                    )));
                }
                let block_of = Self::block_index(sizes, k);
                let m = DMatrix::from_fn(k, k, |i, j| {
                    if i == j {
                        1.0
                    } else if block_of[i] == block_of[j] {
                        *rho_in
                    } else {
                        0.0
                    }
                });
                let c = CorrelationMatrix::new(m)?;
                c.require_positive_definite()?;
                Ok(c)
            }
        }
    }

    /// Ground-truth adjacency: 1 exactly where the generating correlation is
    /// nonzero off the diagonal.
    pub fn truth_adjacency(&self, k: usize) -> Result<Vec<Vec<u8>>> {
        let r = self.correlation(k)?;
        let mut adj = vec![vec![0u8; k]; k];
        for i in 0..k {
            for j in 0..k {
                if i != j && r.matrix()[(i, j)] != 0.0 {
                    adj[i][j] = 1;
                }
            }
        }
        Ok(adj)
    }

    fn block_index(sizes: &[usize], k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        for (b, &s) in sizes.iter().enumerate() {
            out.extend(std::iter::repeat(b).take(s));
        }
        out
    }
}

/// Writes `n` unit-variance MVN rows with the generator's correlation to a CSV
/// at `out_path`, plus a `<out_path>.truth.json` sidecar holding the
/// ground-truth adjacency. Returns the dataset that was written.
pub fn simulate(
    k: usize,
    n: usize,
    generator: &Generator,
    seed: RngSeed,
    out_path: &Path,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::DomainError("need at least one row".into()));
    }
    let corr = generator.correlation(k)?;
    let cov = CovarianceMatrix::new(corr.matrix().clone())?;
    let data = sample_mvn(&cov, n, seed)?;
    let labels: Vec<String> = (1..=k).map(|i| format!("x{i}")).collect();

    let mut writer = csv::Writer::from_path(out_path)?;
    writer.write_record(&labels)?;
    for i in 0..n {
        let row: Vec<String> = (0..k).map(|j| format!("{}", data[(i, j)])).collect();
        writer.write_record(&row)?;
    }
    writer.flush()?;

    let sidecar = serde_json::json!({
        "K": k,
        "generator": generator,
        "adjacency": generator.truth_adjacency(k)?,
    });
    let truth_path = sidecar_path(out_path);
    std::fs::write(&truth_path, serde_json::to_string_pretty(&sidecar)?)?;

    Ok(Dataset {
        data,
        labels,
        rescale: None,
    })
}

/// `<path>.truth.json` next to a simulated CSV.
pub fn sidecar_path(out_path: &Path) -> PathBuf {
    let mut s = out_path.as_os_str().to_os_string();
    s.push(".truth.json");
    PathBuf::from(s)
}

const SAMPLES_MAGIC: &[u8; 8] = b"CORRSMP1";

/// Writes correlation samples as little-endian doubles: an 8-byte magic,
/// u32 K, u64 N, then N row-major K x K matrices.
pub fn write_samples_bin(path: &Path, samples: &[CorrelationMatrix]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("no samples to write".into()));
    }
    let k = samples[0].dim();
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(SAMPLES_MAGIC)?;
    w.write_all(&(k as u32).to_le_bytes())?;
    w.write_all(&(samples.len() as u64).to_le_bytes())?;
    for s in samples {
        for i in 0..k {
            for j in 0..k {
                w.write_all(&s.matrix()[(i, j)].to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples_bin(path: &Path) -> Result<Vec<CorrelationMatrix>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != SAMPLES_MAGIC {
        return Err(Error::DataError(format!(
            "{} is not a sample store (bad magic)",
            path.display()
        )));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let k = u32::from_le_bytes(b4) as usize;
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let n = u64::from_le_bytes(b8) as usize;
    if k < 2 || n == 0 {
        return Err(Error::DataError("sample store header is degenerate".into()));
    }
    let mut out = Vec::with_capacity(n);
    let mut buf = vec![0u8; k * k * 8];
    for _ in 0..n {
        r.read_exact(&mut buf)?;
        let m = DMatrix::from_fn(k, k, |i, j| {
            let off = (i * k + j) * 8;
            f64::from_le_bytes(buf[off..off + 8].try_into().unwrap())
        });
        out.push(CorrelationMatrix::from_spd_covariance(&m));
    }
    Ok(out)
}

/// How the scale vector sigma is designated from data.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaStrategy {
    /// IW components: sigma_k = sqrt((nu - K - 1) S_kk). Shrinkage components
    /// fall back to sigma_k = sqrt(S_kk).
    #[default]
    Empirical,
    /// Shrinkage components invert the calibrated E[Sigma_kk] map; IW
    /// components still use the empirical rule.
    SiwMatch,
    /// Use `sigma_values` verbatim for every component.
    Explicit,
}

fn default_seed() -> u64 {
    1
}

fn default_samples() -> usize {
    2_000
}

fn default_score_draws() -> usize {
    400
}

/// Pipeline configuration. Each prior component is specified either through
/// elicitation targets (`target_mean`/`target_var`) or through explicit
/// hyperparameters (`rho0`/`nu0` for the IW component, `rho1`/`nu1` for the
/// shrinkage component) — never both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelKind,
    #[serde(default)]
    pub eta: Option<f64>,
    #[serde(default)]
    pub target_mean: Option<f64>,
    #[serde(default)]
    pub target_var: Option<f64>,
    #[serde(default)]
    pub rho0: Option<f64>,
    #[serde(default)]
    pub nu0: Option<f64>,
    #[serde(default)]
    pub rho1: Option<f64>,
    #[serde(default)]
    pub nu1: Option<f64>,
    #[serde(default)]
    pub sigma: SigmaStrategy,
    #[serde(default)]
    pub sigma_values: Option<Vec<f64>>,
    #[serde(default)]
    pub is: IsConfig,
    #[serde(default)]
    pub detect: DetectConfig,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub center: bool,
    #[serde(default)]
    pub rescale: bool,
    #[serde(default)]
    pub calibration: Option<PathBuf>,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_score_draws")]
    pub score_draws: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Iw,
            eta: None,
            target_mean: None,
            target_var: None,
            rho0: None,
            nu0: None,
            rho1: None,
            nu1: None,
            sigma: SigmaStrategy::default(),
            sigma_values: None,
            is: IsConfig::default(),
            detect: DetectConfig::default(),
            seed: default_seed(),
            center: false,
            rescale: false,
            calibration: None,
            samples: default_samples(),
            score_draws: default_score_draws(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: RunConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let has_target = self.target_mean.is_some() || self.target_var.is_some();
        if has_target && (self.target_mean.is_none() || self.target_var.is_none()) {
            return Err(Error::ConfigError(
                "elicitation needs both target_mean and target_var".into(),
            ));
        }
        let iw_explicit = self.rho0.is_some() || self.nu0.is_some();
        let siw_explicit = self.rho1.is_some() || self.nu1.is_some();
        match self.model {
            ModelKind::Iw => {
                if has_target == iw_explicit {
                    return Err(Error::ConfigError(
                        "specify exactly one of {target_mean/target_var, rho0/nu0}".into(),
                    ));
                }
                if iw_explicit && (self.rho0.is_none() || self.nu0.is_none()) {
                    return Err(Error::ConfigError("explicit IW needs rho0 and nu0".into()));
                }
            }
            ModelKind::Siw1 => {
                if has_target == siw_explicit {
                    return Err(Error::ConfigError(
                        "specify exactly one of {target_mean/target_var, rho1/nu1}".into(),
                    ));
                }
                if siw_explicit && (self.rho1.is_none() || self.nu1.is_none()) {
                    return Err(Error::ConfigError(
                        "explicit shrinkage prior needs rho1 and nu1".into(),
                    ));
                }
            }
            ModelKind::Mixture | ModelKind::FixedWeightMixture => {
                let eta = self.eta.ok_or_else(|| {
                    Error::ConfigError("mixture models need a prior weight eta".into())
                })?;
                if !(0.0..=1.0).contains(&eta) {
                    return Err(Error::ConfigError(format!(
                        "eta = {eta} outside [0,1]"
                    )));
                }
                // Target mode may pin rho1/nu1 as split hints; explicit mode
                // must fully determine the IW component.
                if !has_target {
                    if self.rho0.is_none()
                        || self.nu0.is_none()
                        || self.rho1.is_none()
                        || self.nu1.is_none()
                    {
                        return Err(Error::ConfigError(
                            "explicit mixture needs rho0, nu0, rho1, and nu1".into(),
                        ));
                    }
                } else if iw_explicit {
                    return Err(Error::ConfigError(
                        "mixture elicitation and explicit rho0/nu0 are mutually exclusive".into(),
                    ));
                }
            }
        }
        if self.sigma == SigmaStrategy::Explicit && self.sigma_values.is_none() {
            return Err(Error::ConfigError(
                "sigma strategy `explicit` needs sigma_values".into(),
            ));
        }
        if self.sigma != SigmaStrategy::Explicit && self.sigma_values.is_some() {
            return Err(Error::ConfigError(
                "sigma_values given but sigma strategy is not `explicit`".into(),
            ));
        }
        self.detect.validate()?;
        Ok(())
    }

    fn needs_calibration(&self) -> bool {
        !matches!(self.model, ModelKind::Iw)
    }

    /// Loads the table from `calibration`, or falls back to the bundled table
    /// when the dimension has one.
    pub fn resolve_calibration(&self, dim: usize) -> Result<Option<CalibrationTable>> {
        if !self.needs_calibration() {
            return Ok(None);
        }
        if let Some(path) = &self.calibration {
            let table = CalibrationTable::from_json(&std::fs::read_to_string(path)?)?;
            if table.dim != dim {
                return Err(Error::ConfigError(format!(
                    "calibration table is for K = {}, data has K = {dim}",
                    table.dim
                )));
            }
            return Ok(Some(table));
        }
        CalibrationTable::shipped(dim)
            .cloned()
            .map(Some)
            .ok_or(Error::CalibrationRequired(dim))
    }
}

fn explicit_correlation(k: usize, rho: f64) -> Result<CorrelationMatrix> {
    if rho == 0.0 {
        CorrelationMatrix::new(DMatrix::identity(k, k))
    } else {
        compound_symmetry(k, rho)
    }
}

/// Fully designated prior for one run.
#[derive(Debug, Clone)]
pub enum BuiltPrior {
    Iw(IwParams),
    Siw1(Siw1Params),
    Mixture { eta: f64, params: MixtureParams },
}

/// Builds the prior a config describes, eliciting where targets are given and
/// designating sigma from the data stats.
pub fn build_prior(
    config: &RunConfig,
    stats: &SufficientStats,
    calib: Option<&CalibrationTable>,
) -> Result<BuiltPrior> {
    config.validate()?;
    let k = stats.dim();
    let target = match (config.target_mean, config.target_var) {
        (Some(mean), Some(var)) => Some(ElicitationTarget::new(
            MeanTarget::Scalar(mean),
            var,
            k,
        )?),
        _ => None,
    };
    let require_calib = || calib.ok_or(Error::CalibrationRequired(k));

    let sigma_iw = |nu: f64| -> Result<Vec<f64>> {
        match config.sigma {
            SigmaStrategy::Explicit => {
                let v = config.sigma_values.clone().expect("validated");
                if v.len() != k {
                    return Err(Error::ConfigError(format!(
                        "sigma_values has length {}, data has K = {k}",
                        v.len()
                    )));
                }
                Ok(v)
            }
            _ => sigma_empirical_iw(nu, k, stats),
        }
    };
    let sigma_siw = |nu: f64| -> Result<Vec<f64>> {
        match config.sigma {
            SigmaStrategy::Explicit => sigma_iw(nu),
            SigmaStrategy::SiwMatch => sigma_match_siw1(nu, k, stats, require_calib()?),
            SigmaStrategy::Empirical => (0..k)
                .map(|i| {
                    let s = stats.mean_cross()[(i, i)];
                    if s > 0.0 {
                        Ok(s.sqrt())
                    } else {
                        Err(Error::DataError(format!(
                            "component {i} has non-positive sample variance"
                        )))
                    }
                })
                .collect(),
        }
    };

    match config.model {
        ModelKind::Iw => {
            let bare = match &target {
                Some(t) => elicit_iw(t)?.params,
                None => IwParams::without_sigma(
                    explicit_correlation(k, config.rho0.expect("validated"))?,
                    config.nu0.expect("validated"),
                )?,
            };
            let sigma = sigma_iw(bare.nu())?;
            Ok(BuiltPrior::Iw(bare.with_sigma(sigma)?))
        }
        ModelKind::Siw1 => {
            let bare = match &target {
                Some(t) => elicit_siw1(t, require_calib()?)?.params,
                None => Siw1Params::without_sigma(
                    explicit_correlation(k, config.rho1.expect("validated"))?,
                    config.nu1.expect("validated"),
                )?,
            };
            let sigma = sigma_siw(bare.nu())?;
            Ok(BuiltPrior::Siw1(bare.with_sigma(sigma)?))
        }
        ModelKind::Mixture | ModelKind::FixedWeightMixture => {
            let eta = config.eta.expect("validated");
            let bare = match &target {
                Some(t) => {
                    let split = MixtureSplit {
                        rho1: config.rho1,
                        nu1: config.nu1,
                    };
                    elicit_mixture(t, eta, require_calib()?, &split)?.params
                }
                None => MixtureParams::new(
                    eta,
                    IwParams::without_sigma(
                        explicit_correlation(k, config.rho0.expect("validated"))?,
                        config.nu0.expect("validated"),
                    )?,
                    Siw1Params::without_sigma(
                        explicit_correlation(k, config.rho1.expect("validated"))?,
                        config.nu1.expect("validated"),
                    )?,
                )?,
            };
            let iw = bare.iw.with_sigma(sigma_iw(bare.iw.nu())?)?;
            let siw = bare.siw.with_sigma(sigma_siw(bare.siw.nu())?)?;
            Ok(BuiltPrior::Mixture {
                eta,
                params: MixtureParams::new(eta, iw, siw)?,
            })
        }
    }
}

/// Fits the configured model to the data's sufficient statistics.
pub fn fit_prior(
    config: &RunConfig,
    prior: &BuiltPrior,
    stats: &SufficientStats,
    seed: RngSeed,
) -> Result<PosteriorState> {
    match prior {
        BuiltPrior::Iw(p) => fit_iw(p, stats),
        BuiltPrior::Siw1(p) => fit_siw1(p, stats),
        BuiltPrior::Mixture { params, .. } => match config.model {
            ModelKind::FixedWeightMixture => fixed_weight_posterior(params, stats),
            _ => mixture_posterior(params, stats, &config.is, seed),
        },
    }
}

/// Filenames the pipeline writes into its output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunArtifacts {
    pub state: PathBuf,
    pub moments: PathBuf,
    pub samples: PathBuf,
    pub graph: PathBuf,
    pub score: PathBuf,
    pub manifest: PathBuf,
}

/// Everything the pipeline produced, with the on-disk artifact paths.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub state: PosteriorState,
    pub graph: EdgeGraph,
    pub score: ScoreResult,
    pub artifacts: RunArtifacts,
}

fn stage<T>(name: &'static str, result: Result<T>) -> Result<T> {
    result.map_err(|e| match e {
        e @ Error::Stage { .. } => e,
        other => Error::Stage {
            stage: name,
            source: Box::new(other),
        },
    })
}

fn write_moments_csv(path: &Path, mean: &DMatrix<f64>, var: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["k", "k_prime", "mean", "var"])?;
    let k = mean.nrows();
    for i in 0..k {
        for j in (i + 1)..k {
            w.write_record([
                format!("{}", i + 1),
                format!("{}", j + 1),
                format!("{}", mean[(i, j)]),
                format!("{}", var[(i, j)]),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Runs the full workflow — load, designate the prior, fit, summarize, sample,
/// detect, score — writing every artifact into `out_dir`. Artifacts written
/// before a failing stage are left in place.
pub fn run_pipeline(config: &RunConfig, data_path: &Path, out_dir: &Path) -> Result<RunOutput> {
    stage("setup", config.validate().and_then(|_| {
        std::fs::create_dir_all(out_dir)?;
        Ok(())
    }))?;
    let artifacts = RunArtifacts {
        state: out_dir.join("state.json"),
        moments: out_dir.join("moments.csv"),
        samples: out_dir.join("samples.bin"),
        graph: out_dir.join("graph.json"),
        score: out_dir.join("score.json"),
        manifest: out_dir.join("manifest.json"),
    };
    let seed = RngSeed::new(config.seed, 0);

    let dataset = stage(
        "load",
        load_timeseries_csv(
            data_path,
            &LoadOptions {
                center: config.center,
                rescale_common_variance: config.rescale,
            },
        ),
    )?;
    let stats = stage("load", dataset.stats())?;
    let calib = stage("elicit", config.resolve_calibration(dataset.dim()))?;
    let prior = stage("elicit", build_prior(config, &stats, calib.as_ref()))?;

    let state = stage(
        "fit",
        fit_prior(config, &prior, &stats, seed.substream(0xf17)),
    )?;
    stage(
        "fit",
        serde_json::to_string_pretty(&state)
            .map_err(Error::from)
            .and_then(|s| std::fs::write(&artifacts.state, s).map_err(Error::from)),
    )?;

    let moments = stage("moments", posterior_corr_moments(&state, calib.as_ref()))?;
    stage(
        "moments",
        write_moments_csv(&artifacts.moments, &moments.0, &moments.1),
    )?;

    let samples = stage(
        "sample",
        sample_posterior_correlations(&state, config.samples, &config.is, seed.substream(0x5a3)),
    )?;
    stage("sample", write_samples_bin(&artifacts.samples, &samples.corr))?;

    // Unimodal posteriors use direct credible sets over the stored samples;
    // mixtures go through the batch-mean transform.
    let graph = stage(
        "detect",
        match state.kind {
            ModelKind::Iw | ModelKind::Siw1 => detect_edges_direct(&samples, config.detect.prob),
            _ => {
                if state.eta_post == 0.0 || state.eta_post == 1.0 {
                    detect_edges_direct(&samples, config.detect.prob)
                } else {
                    detect_edges_mixture(&state, &config.detect, seed.substream(0xde7))
                }
            }
        },
    )?;
    stage(
        "detect",
        serde_json::to_string_pretty(&graph)
            .map_err(Error::from)
            .and_then(|s| std::fs::write(&artifacts.graph, s).map_err(Error::from)),
    )?;

    let score = stage(
        "score",
        model_score_elpd(
            &state,
            &dataset.data,
            config.score_draws,
            &config.is,
            seed.substream(0x5c0),
        ),
    )?;
    stage(
        "score",
        serde_json::to_string_pretty(&score)
            .map_err(Error::from)
            .and_then(|s| std::fs::write(&artifacts.score, s).map_err(Error::from)),
    )?;

    let manifest = serde_json::json!({
        "version": env!("CARGO_PKG_VERSION"),
        "seed": config.seed,
        "data": data_path,
        "config": config,
        "low_ess": samples.low_ess,
        "artifacts": artifacts,
    });
    stage(
        "manifest",
        std::fs::write(&artifacts.manifest, serde_json::to_string_pretty(&manifest)?)
            .map_err(Error::from),
    )?;

    Ok(RunOutput {
        state,
        graph,
        score,
        artifacts,
    })
}
