//! Command-line interface.
//!
//! Exit codes: 0 on success, 2 on usage or input validation errors, 3 on
//! numerical failures.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::asymptotics::{
    estimate_hessian, estimate_score_cov, sample_limit_distribution, LimitModel,
};
use crate::bootstrap::fppe::{
    constrained_proximal_bootstrap, multinomial_failure_demo, numerical_bootstrap_fppe,
    proximal_bootstrap_fppe,
};
use crate::bootstrap::lfm::{
    exchangeable_bootstrap, numerical_bootstrap_lfm, proximal_bootstrap_lfm,
};
use crate::bootstrap::BootstrapMethod;
use crate::conf_region::{default_kappa, region_quantile, statistic_t_gamma, RegionConfig};
use crate::error::{Error, Result};
use crate::generator::{generate_market, GeneratorSpec};
use crate::harness::{
    clipped_eta, histogram_csv, run_coverage_experiment, run_true_resampling, CoverageReport,
    ExperimentConfig,
};
use crate::market::{load_market, MarketFormat, MarketInstance};
use crate::resampling::{IidDist, WeightScheme};
use crate::solver::{classify_buyers, recover_duals, solve_weighted, Mode, SolverConfig};

#[derive(Parser)]
#[command(
    name = "eqboot",
    version,
    about = "Pacing equilibria and bootstrap inference"
)]
struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Lfm,
    Fppe,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Lfm => Mode::Lfm,
            ModeArg::Fppe => Mode::Fppe,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Exchangeable,
    Numerical,
    Proximal,
    Constrained,
}

#[derive(Args)]
struct MarketSource {
    /// Market file (.json or .csv).
    #[arg(long)]
    market: Option<PathBuf>,
    /// Generator spec file (JSON); the market is generated from it.
    #[arg(long = "gen")]
    generator: Option<PathBuf>,
}

impl MarketSource {
    fn load(&self) -> Result<MarketInstance> {
        match (&self.market, &self.generator) {
            (Some(path), None) => {
                let format = match path.extension().and_then(|e| e.to_str()) {
                    Some("csv") => MarketFormat::Csv,
                    _ => MarketFormat::Json,
                };
                load_market(path, format)
            }
            (None, Some(path)) => {
                let spec: GeneratorSpec = serde_json::from_str(&fs::read_to_string(path)?)?;
                generate_market(&spec)
            }
            _ => Err(Error::Invalid(
                "provide exactly one of --market or --gen".into(),
            )),
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve a market and emit the equilibrium as JSON.
    Solve {
        #[command(flatten)]
        source: MarketSource,
        #[arg(long, value_enum, default_value = "fppe")]
        mode: ModeArg,
        /// Objective-gap target.
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a bootstrap estimator on one solved market.
    Bootstrap {
        #[command(flatten)]
        source: MarketSource,
        #[arg(long, value_enum, default_value = "fppe")]
        mode: ModeArg,
        #[arg(long, value_enum)]
        method: MethodArg,
        /// Replicates.
        #[arg(long = "B", default_value_t = 200)]
        replicates: usize,
        /// Stepsize exponent: eps = t^-d.
        #[arg(long, default_value_t = 0.3)]
        d: f64,
        /// Weight scheme for the exchangeable method:
        /// multinomial | wor:ALPHA | exp:RATE | poisson:LAMBDA.
        #[arg(long, default_value = "multinomial")]
        scheme: String,
        #[arg(long = "eta-exponent", default_value_t = 1.0 / 6.0)]
        eta_exponent: f64,
        /// delta_t = delta-scale / sqrt(t).
        #[arg(long = "delta-scale", default_value_t = 1.0)]
        delta_scale: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate the limit model and sample the limit distribution.
    LimitDist {
        #[command(flatten)]
        source: MarketSource,
        #[arg(long, value_enum, default_value = "fppe")]
        mode: ModeArg,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long = "eta-exponent", default_value_t = 1.0 / 6.0)]
        eta_exponent: f64,
        #[arg(long = "delta-scale", default_value_t = 1.0)]
        delta_scale: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Confidence-region quantile and membership queries.
    Region {
        #[command(flatten)]
        source: MarketSource,
        /// JSON file with query points: [{"beta": [...], "delta": [...]}].
        #[arg(long)]
        queries: Option<PathBuf>,
        /// Ball radius; 0 means the 10 sqrt(n) stand-in for infinity.
        #[arg(long, default_value_t = 0.0)]
        kappa: f64,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long = "B", default_value_t = 200)]
        replicates: usize,
        #[arg(long, default_value_t = 0.3)]
        d: f64,
        #[arg(long = "eta-exponent", default_value_t = 1.0 / 6.0)]
        eta_exponent: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Coverage experiment over one or more parameter cells.
    Coverage {
        /// Experiment spec: either one cell or {"cells": [...]}.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the wide coverage table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// One-buyer demonstration that multinomial resampling is inconsistent.
    DemoFailure {
        #[arg(long, default_value_t = 10_000)]
        t: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "B", default_value_t = 2000)]
        replicates: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// True-resampling reference distribution.
    Truth {
        /// Generator spec file (JSON).
        #[arg(long = "gen")]
        generator: PathBuf,
        #[arg(long, value_enum, default_value = "fppe")]
        mode: ModeArg,
        /// Outer repetitions.
        #[arg(long = "R", default_value_t = 100)]
        repetitions: usize,
        #[arg(long = "t-ref", default_value_t = 100_000)]
        t_ref: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Histogram CSV of the scaled deviations.
        #[arg(long)]
        hist: Option<PathBuf>,
    },
}

fn parse_scheme(s: &str) -> Result<WeightScheme> {
    let bad = |m: &str| Error::Invalid(format!("bad scheme '{s}': {m}"));
    if s == "multinomial" {
        return Ok(WeightScheme::Multinomial);
    }
    if let Some(rest) = s.strip_prefix("wor:") {
        let alpha: f64 = rest.parse().map_err(|_| bad("expected wor:ALPHA"))?;
        return Ok(WeightScheme::WithoutReplacement { alpha });
    }
    if let Some(rest) = s.strip_prefix("exp:") {
        let rate: f64 = rest.parse().map_err(|_| bad("expected exp:RATE"))?;
        return Ok(WeightScheme::IidNormalized {
            dist: IidDist::Exponential { rate },
        });
    }
    if let Some(rest) = s.strip_prefix("poisson:") {
        let lambda: f64 = rest.parse().map_err(|_| bad("expected poisson:LAMBDA"))?;
        return Ok(WeightScheme::IidNormalized {
            dist: IidDist::Poisson { lambda },
        });
    }
    Err(bad(
        "expected multinomial | wor:ALPHA | exp:RATE | poisson:LAMBDA",
    ))
}

fn emit(body: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => fs::write(path, body)?,
        None => println!("{body}"),
    }
    Ok(())
}

#[derive(Deserialize)]
struct QueryPoint {
    beta: Vec<f64>,
    delta: Vec<f64>,
}

#[derive(Serialize)]
struct QueryAnswer {
    beta: Vec<f64>,
    delta: Vec<f64>,
    #[serde(rename = "T_gamma")]
    t_gamma: f64,
    member: bool,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum CoverageSpecFile {
    Grid { cells: Vec<ExperimentConfig> },
    Single(Box<ExperimentConfig>),
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Solve {
            source,
            mode,
            tol,
            out,
        } => {
            let market = source.load()?;
            let cfg = SolverConfig {
                tol,
                ..SolverConfig::default()
            };
            let eq = solve_weighted(&market, None, mode.into(), &cfg, None)?;
            emit(&eq.to_json_string(), out.as_deref())
        }
        Cmd::Bootstrap {
            source,
            mode,
            method,
            replicates,
            d,
            scheme,
            eta_exponent,
            delta_scale,
            seed,
            out,
        } => {
            let market = source.load()?;
            let mode: Mode = mode.into();
            let eq = solve_weighted(&market, None, mode, &SolverConfig::default(), None)?;
            let t = market.t() as f64;
            let eps = t.powf(-d);
            let hessian = || -> Result<nalgebra::DMatrix<f64>> {
                let eta = clipped_eta(market.t(), eta_exponent, &eq.beta);
                estimate_hessian(&market, &eq.beta, eta)
            };
            let run = match (method, mode) {
                (MethodArg::Exchangeable, Mode::Lfm) => exchangeable_bootstrap(
                    &market,
                    &eq.beta,
                    &parse_scheme(&scheme)?,
                    replicates,
                    seed,
                )?,
                (MethodArg::Exchangeable, Mode::Fppe) => {
                    return Err(Error::Invalid(
                        "the exchangeable method applies to lfm mode".into(),
                    ))
                }
                (MethodArg::Numerical, Mode::Lfm) => {
                    numerical_bootstrap_lfm(&market, &eq.beta, eps, replicates, seed)?
                }
                (MethodArg::Numerical, Mode::Fppe) => {
                    numerical_bootstrap_fppe(&market, &eq.beta, eps, replicates, seed)?
                }
                (MethodArg::Proximal, Mode::Lfm) => {
                    proximal_bootstrap_lfm(&market, &eq.beta, &hessian()?, eps, replicates, seed)?
                }
                (MethodArg::Proximal, Mode::Fppe) => {
                    proximal_bootstrap_fppe(&market, &eq.beta, &hessian()?, eps, replicates, seed)?
                }
                (MethodArg::Constrained, Mode::Fppe) => constrained_proximal_bootstrap(
                    &market,
                    &eq.beta,
                    &hessian()?,
                    eps,
                    delta_scale / t.sqrt(),
                    replicates,
                    seed,
                )?,
                (MethodArg::Constrained, Mode::Lfm) => {
                    return Err(Error::Invalid(
                        "the constrained method applies to fppe mode".into(),
                    ))
                }
            };
            emit(&run.to_json_string(), out.as_deref())
        }
        Cmd::LimitDist {
            source,
            mode,
            samples,
            eta_exponent,
            delta_scale,
            seed,
            out,
        } => {
            let market = source.load()?;
            let mode: Mode = mode.into();
            let eq = solve_weighted(&market, None, mode, &SolverConfig::default(), None)?;
            let eta = clipped_eta(market.t(), eta_exponent, &eq.beta);
            let hessian = estimate_hessian(&market, &eq.beta, eta)?;
            let score_cov = estimate_score_cov(&market, &eq.beta)?;
            let active = match mode {
                Mode::Lfm => crate::asymptotics::ActiveSets::all_paced(market.n()),
                Mode::Fppe => {
                    let delta_t = delta_scale / (market.t() as f64).sqrt();
                    classify_buyers(&eq, delta_t)
                }
            };
            let model = LimitModel::new(hessian, score_cov, active, eq.beta.clone())?;
            let mut rng = crate::rng::stream(seed, 0);
            let draws = sample_limit_distribution(&model, samples, &mut rng, mode)?;
            #[derive(Serialize)]
            struct Doc {
                model: serde_json::Value,
                samples: Vec<Vec<f64>>,
            }
            let body = serde_json::to_string_pretty(&Doc {
                model: serde_json::from_str(&model.to_json_string())?,
                samples: crate::linalg::to_rows(&draws),
            })?;
            emit(&body, out.as_deref())
        }
        Cmd::Region {
            source,
            queries,
            kappa,
            alpha,
            replicates,
            d,
            eta_exponent,
            seed,
            out,
        } => {
            let market = source.load()?;
            let eq = solve_weighted(&market, None, Mode::Fppe, &SolverConfig::default(), None)?;
            let kappa = if kappa > 0.0 {
                kappa
            } else {
                default_kappa(market.n())
            };
            let eps = (market.t() as f64).powf(-d);
            let eta = clipped_eta(market.t(), eta_exponent, &eq.beta);
            let hessian = estimate_hessian(&market, &eq.beta, eta)?;
            let config = RegionConfig {
                kappa,
                alpha,
                eps,
                replicates,
            };
            let c = region_quantile(&market, &eq.beta, &hessian, &config, seed)?;
            let points: Vec<QueryPoint> = match queries {
                Some(path) => serde_json::from_str(&fs::read_to_string(path)?)?,
                None => {
                    let (delta, _) = recover_duals(&market, &eq.beta)?;
                    vec![QueryPoint {
                        beta: eq.beta.as_slice().to_vec(),
                        delta: delta.as_slice().to_vec(),
                    }]
                }
            };
            let mut answers = Vec::with_capacity(points.len());
            for p in points {
                let beta = DVector::from_vec(p.beta.clone());
                let delta = DVector::from_vec(p.delta.clone());
                let stat = statistic_t_gamma(&market, &beta, &delta, kappa)?;
                answers.push(QueryAnswer {
                    beta: p.beta,
                    delta: p.delta,
                    t_gamma: stat.value,
                    member: stat.value <= c,
                });
            }
            #[derive(Serialize)]
            struct Doc {
                c_quantile: f64,
                queries: Vec<QueryAnswer>,
            }
            let body = serde_json::to_string_pretty(&Doc {
                c_quantile: c,
                queries: answers,
            })?;
            emit(&body, out.as_deref())
        }
        Cmd::Coverage { spec, out, csv } => {
            let parsed: CoverageSpecFile = serde_json::from_str(&fs::read_to_string(spec)?)?;
            let cells_cfg = match parsed {
                CoverageSpecFile::Grid { cells } => cells,
                CoverageSpecFile::Single(cell) => vec![*cell],
            };
            let mut cells = Vec::with_capacity(cells_cfg.len());
            for cfg in &cells_cfg {
                cells.push(run_coverage_experiment(cfg)?);
            }
            let report = CoverageReport { cells };
            if let Some(path) = csv {
                fs::write(path, report.to_csv_table())?;
            }
            emit(&report.to_json_string(), out.as_deref())
        }
        Cmd::DemoFailure {
            t,
            seed,
            replicates,
            out,
        } => {
            let report = multinomial_failure_demo(t, seed, replicates)?;
            emit(&report.to_json_string(), out.as_deref())
        }
        Cmd::Truth {
            generator,
            mode,
            repetitions,
            t_ref,
            out,
            hist,
        } => {
            let spec: GeneratorSpec = serde_json::from_str(&fs::read_to_string(generator)?)?;
            let config = ExperimentConfig {
                generator: spec,
                mode: mode.into(),
                method: BootstrapMethod::ConstrainedProximal,
                d: 0.3,
                replicates: 1,
                repetitions,
                alpha_nominal: 0.05,
                target: crate::harness::CoverageTarget::SumBeta,
                t_ref,
                eta_exponent: 1.0 / 6.0,
                delta_scale: 1.0,
            };
            let truth = run_true_resampling(&config)?;
            if let Some(path) = hist {
                fs::write(path, histogram_csv(&truth.samples, 30))?;
            }
            emit(&truth.to_json_string(), out.as_deref())
        }
    }
}

/// Parse and execute; returns the process exit code.
pub fn cli_dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders its own usage/help text; --help and --version are
            // successful exits
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Some(workers) = cli.workers {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global();
    }
    match run(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                3
            } else {
                2
            }
        }
    }
}
