use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use corrnet::edge::{detect_edges_direct, detect_edges_mixture, DetectConfig};
use corrnet::elicitation::{
    calibrate_table, elicit_iw, elicit_mixture, elicit_siw1, CalibrationGrid, ElicitationTarget,
    MeanTarget, MixtureSplit,
};
use corrnet::error::{Error, Result};
use corrnet::inference::{model_score_elpd, IsConfig, ModelKind, PosteriorSamples, PosteriorState};
use corrnet::io::{
    build_prior, fit_prior, load_timeseries_csv, read_samples_bin, run_pipeline, simulate,
    Generator, LoadOptions, RunConfig,
};
use corrnet::priors::CalibrationTable;
use corrnet::samplers::RngSeed;

#[derive(Parser)]
#[command(
    name = "corrnet",
    about = "Bayesian correlation-network inference from multivariate time series",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModelArg {
    Iw,
    Siw1,
    Mixture,
    #[value(alias = "fixed-mixture")]
    FixedWeightMixture,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Iw => ModelKind::Iw,
            ModelArg::Siw1 => ModelKind::Siw1,
            ModelArg::Mixture => ModelKind::Mixture,
            ModelArg::FixedWeightMixture => ModelKind::FixedWeightMixture,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Fit the moment constants of the shrinkage prior for a dimension.
    Calibrate(CalibrateArgs),
    /// Turn target correlation moments into prior hyperparameters.
    Elicit(ElicitArgs),
    /// Write a synthetic dataset with a known network.
    Simulate(SimulateArgs),
    /// Fit a posterior to a dataset and write state.json.
    Fit(FitArgs),
    /// Decide significant edges from a fitted state or stored samples.
    Detect(DetectArgs),
    /// Predictive scores (IS-LOO elpd and WAIC) of a fitted state on data.
    Score(ScoreArgs),
    /// Full pipeline: load, elicit, fit, summarize, sample, detect, score.
    Run(RunArgs),
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    dim: usize,
    /// Degrees-of-freedom grid (comma-separated); defaults to the standard
    /// 13-point grid.
    #[arg(long, value_delimiter = ',')]
    nus: Option<Vec<f64>>,
    #[arg(long, default_value_t = 3)]
    configs: usize,
    #[arg(long, default_value_t = 20_000)]
    draws: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ElicitArgs {
    #[arg(long, value_enum)]
    model: ModelArg,
    #[arg(long)]
    dim: usize,
    /// Target prior mean of the off-diagonal correlations.
    #[arg(long)]
    mean: f64,
    /// Target prior variance of the off-diagonal correlations.
    #[arg(long)]
    var: f64,
    /// Mixture prior weight on the IW component.
    #[arg(long)]
    eta: Option<f64>,
    /// Pin the shrinkage component's equicorrelation in a mixture split.
    #[arg(long)]
    rho1: Option<f64>,
    /// Pin the shrinkage component's degrees of freedom in a mixture split.
    #[arg(long)]
    nu1: Option<f64>,
    /// Calibration table JSON; defaults to the bundled table when available.
    #[arg(long)]
    calibration: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    dim: usize,
    #[arg(long)]
    n: usize,
    /// `identity`, `compound:RHO`, or `blocks:S1,S2,...:RHO`.
    #[arg(long)]
    generator: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    /// Run configuration JSON (model, priors, sigma strategy, seeds).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    state: PathBuf,
    /// Stored posterior correlation samples; direct credible sets are used
    /// when given, the batch-mean procedure otherwise.
    #[arg(long)]
    samples: Option<PathBuf>,
    #[arg(long, default_value_t = 0.9)]
    prob: f64,
    #[arg(long, default_value_t = 10_000)]
    m: usize,
    #[arg(long, default_value_t = 1_000)]
    l: usize,
    #[arg(long, default_value_t = 500)]
    s: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    state: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 400)]
    draws: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    center: bool,
    #[arg(long)]
    rescale: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

fn parse_generator(text: &str) -> Result<Generator> {
    let parts: Vec<&str> = text.split(':').collect();
    match parts.as_slice() {
        ["identity"] => Ok(Generator::Identity),
        ["compound", rho] => Ok(Generator::Compound {
            rho: rho
                .parse()
                .map_err(|_| Error::ConfigError(format!("bad rho `{rho}`")))?,
        }),
        ["blocks", sizes, rho] => {
            let sizes = sizes
                .split(',')
                .map(|s| {
                    s.parse()
                        .map_err(|_| Error::ConfigError(format!("bad block size `{s}`")))
                })
                .collect::<Result<Vec<usize>>>()?;
            Ok(Generator::Blocks {
                sizes,
                rho_in: rho
                    .parse()
                    .map_err(|_| Error::ConfigError(format!("bad rho `{rho}`")))?,
            })
        }
        _ => Err(Error::ConfigError(format!(
            "unknown generator `{text}`; use identity, compound:RHO, or blocks:S1,S2:RHO"
        ))),
    }
}

fn load_calibration(path: Option<&PathBuf>, dim: usize) -> Result<CalibrationTable> {
    match path {
        Some(p) => {
            let table = CalibrationTable::from_json(&std::fs::read_to_string(p)?)?;
            if table.dim != dim {
                return Err(Error::ConfigError(format!(
                    "calibration table is for K = {}, requested K = {dim}",
                    table.dim
                )));
            }
            Ok(table)
        }
        None => CalibrationTable::shipped(dim)
            .cloned()
            .ok_or(Error::CalibrationRequired(dim)),
    }
}

fn emit(out: Option<&PathBuf>, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => println!("{text}"),
    }
    Ok(())
}

fn cmd_calibrate(args: &CalibrateArgs) -> Result<()> {
    let mut grid = CalibrationGrid::default();
    if let Some(nus) = &args.nus {
        grid.nus = nus.clone();
    }
    grid.configs_per_nu = args.configs;
    grid.draws_per_config = args.draws;
    let table = calibrate_table(args.dim, &grid, RngSeed::new(args.seed, 0))?;
    std::fs::write(&args.out, serde_json::to_string_pretty(&table)?)?;
    eprintln!(
        "calibrated K = {}: slope {:.4}, variance curve a = {:.4}",
        table.dim, table.slope, table.var_a
    );
    Ok(())
}

fn cmd_elicit(args: &ElicitArgs) -> Result<()> {
    let target = ElicitationTarget::new(MeanTarget::Scalar(args.mean), args.var, args.dim)?;
    let value = match args.model {
        ModelArg::Iw => {
            let e = elicit_iw(&target)?;
            serde_json::json!({
                "model": "iw",
                "params": e.params,
                "nu_floored": e.nu_floored,
            })
        }
        ModelArg::Siw1 => {
            let calib = load_calibration(args.calibration.as_ref(), args.dim)?;
            let e = elicit_siw1(&target, &calib)?;
            serde_json::json!({
                "model": "siw1",
                "params": e.params,
                "nu_floored": e.nu_floored,
            })
        }
        ModelArg::Mixture | ModelArg::FixedWeightMixture => {
            let eta = args
                .eta
                .ok_or_else(|| Error::ConfigError("mixture elicitation needs --eta".into()))?;
            let calib = load_calibration(args.calibration.as_ref(), args.dim)?;
            let split = MixtureSplit {
                rho1: args.rho1,
                nu1: args.nu1,
            };
            let e = elicit_mixture(&target, eta, &calib, &split)?;
            serde_json::json!({
                "model": "mixture",
                "params": e.params,
                "nu_floored": e.nu_floored,
            })
        }
    };
    emit(args.out.as_ref(), &value)
}

fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let generator = parse_generator(&args.generator)?;
    simulate(
        args.dim,
        args.n,
        &generator,
        RngSeed::new(args.seed, 0),
        &args.out,
    )?;
    eprintln!(
        "wrote {} rows x {} columns to {}",
        args.n,
        args.dim,
        args.out.display()
    );
    Ok(())
}

fn cmd_fit(args: &FitArgs) -> Result<()> {
    let config = RunConfig::from_json(&std::fs::read_to_string(&args.config)?)?;
    let dataset = load_timeseries_csv(
        &args.data,
        &LoadOptions {
            center: config.center,
            rescale_common_variance: config.rescale,
        },
    )?;
    let stats = dataset.stats()?;
    let calib = config.resolve_calibration(dataset.dim())?;
    let prior = build_prior(&config, &stats, calib.as_ref())?;
    let state = fit_prior(
        &config,
        &prior,
        &stats,
        RngSeed::new(config.seed, 0).substream(0xf17),
    )?;
    std::fs::write(&args.out, serde_json::to_string_pretty(&state)?)?;
    eprintln!(
        "fitted {:?} posterior (n = {}, eta_n = {:.4})",
        state.kind, state.n, state.eta_post
    );
    Ok(())
}

fn cmd_detect(args: &DetectArgs) -> Result<()> {
    let state: PosteriorState =
        serde_json::from_str(&std::fs::read_to_string(&args.state)?)?;
    let graph = match &args.samples {
        Some(path) => {
            let corr = read_samples_bin(path)?;
            let labels = vec![state.kind; corr.len()];
            let samples = PosteriorSamples {
                corr,
                labels,
                seed: RngSeed::new(args.seed, 0),
                low_ess: false,
            };
            detect_edges_direct(&samples, args.prob)?
        }
        None => {
            let config = DetectConfig {
                m: args.m,
                l: args.l,
                s: args.s,
                prob: args.prob,
                ..DetectConfig::default()
            };
            detect_edges_mixture(&state, &config, RngSeed::new(args.seed, 0))?
        }
    };
    std::fs::write(&args.out, serde_json::to_string_pretty(&graph)?)?;
    eprintln!(
        "{} significant edges out of {} pairs at prob {}",
        graph.edge_count(),
        graph.pair_count(),
        args.prob
    );
    Ok(())
}

fn cmd_score(args: &ScoreArgs) -> Result<()> {
    let state: PosteriorState =
        serde_json::from_str(&std::fs::read_to_string(&args.state)?)?;
    let dataset = load_timeseries_csv(
        &args.data,
        &LoadOptions {
            center: args.center,
            rescale_common_variance: args.rescale,
        },
    )?;
    let score = model_score_elpd(
        &state,
        &dataset.data,
        args.draws,
        &IsConfig::default(),
        RngSeed::new(args.seed, 0),
    )?;
    emit(args.out.as_ref(), &serde_json::to_value(&score)?)
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let config = RunConfig::from_json(&std::fs::read_to_string(&args.config)?)?;
    let out = run_pipeline(&config, &args.data, &args.out_dir)?;
    eprintln!(
        "run complete: eta_n = {:.4}, {} edges, elpd = {:.3}; artifacts in {}",
        out.state.eta_post,
        out.graph.edge_count(),
        out.score.elpd_loo,
        args.out_dir.display()
    );
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Elicit(a) => cmd_elicit(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Detect(a) => cmd_detect(a),
        Command::Score(a) => cmd_score(a),
        Command::Run(a) => cmd_run(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
