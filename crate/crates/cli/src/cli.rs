//! Argument parsing and command dispatch.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use samsel::basis::{build_proximity, moran_eigen, DEFAULT_EPS_EIG};
use samsel::selection::CostKind;
use samsel::sim::{BenchConfig, DgpConfig, DgpScaling, ExperimentConfig};

use crate::config::{FitConfig, Mode, Overrides};
use crate::data::{fmt_f64, ingest_csv, lag_table, read_table, write_csv};
use crate::error::{CliError, Result};
use crate::fit::{prepare, run, write_outputs};
use crate::predict::{load_model, predict_rows, prediction_table};
use crate::simulate::{bench, experiment, generate_csv, load_toml};

/// Exit status of a selection that did not converge.
pub const EXIT_NOT_CONVERGED: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "samsel", version, about = "Spatial and non-spatial varying coefficient models with REML-based type selection")]
pub struct Cli {
    /// Debug logging, and a trace.jsonl of accepted selection steps.
    #[arg(long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model (no selection unless --mode says otherwise).
    Fit(FitArgs),
    /// Select coefficient types (simple sweep unless --mode says otherwise).
    Select(FitArgs),
    /// Predict at training sites from a saved model.
    Predict(PredictArgs),
    /// Run the comparison experiment on synthetic data.
    Simulate(SimulateArgs),
    /// Time basis construction, precompute and selection over sample sizes.
    Bench(BenchArgs),
    /// Write a synthetic data set.
    Generate(GenerateArgs),
    /// Export the Moran eigenvectors of the sites in a data set.
    Basis(BasisArgs),
    /// Add a one-period lag of a column within each site.
    Lag(LagArgs),
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Input CSV (overrides `data_path` in the config).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long, value_parser = parse_cost)]
    pub cost: Option<CostKind>,
    #[arg(long, env = "SAMSEL_WORKERS")]
    pub workers: Option<usize>,
    /// Exit with status 0 and write coefficients even if selection did not converge.
    #[arg(long)]
    pub allow_nonconverged: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// CSV with the site column, every covariate and the included group columns.
    #[arg(long)]
    pub request: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Experiment settings (TOML); defaults apply to anything missing.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long, env = "SAMSEL_WORKERS")]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Timing table (CSV).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub repeats: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub p: usize,
    #[arg(long, default_value_t = 0.5)]
    pub tau1: f64,
    #[arg(long, default_value_t = 0.5)]
    pub tau2: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Use the literal (unnormalized) moving-average and polynomial surfaces.
    #[arg(long)]
    pub literal: bool,
}

#[derive(Debug, Args)]
pub struct BasisArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct LagArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Site id column.
    #[arg(long)]
    pub site: String,
    /// Column to lag.
    #[arg(long)]
    pub lag: String,
    /// Period column.
    #[arg(long)]
    pub by: String,
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    s.parse().map_err(|e: CliError| e.to_string())
}

fn parse_cost(s: &str) -> std::result::Result<CostKind, String> {
    s.parse().map_err(|e: samsel::Error| e.to_string())
}

/// Loads the config named by `args`, applies the flags and ingests the data.
pub fn load_fit_config(args: &FitArgs) -> Result<FitConfig> {
    let mut cfg = FitConfig::load(&args.config)?;
    Overrides {
        data: args.data.clone(),
        seed: args.seed,
        mode: args.mode,
        replicates: args.replicates,
        cost: args.cost,
        workers: args.workers,
    }
    .apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn data_path(cfg: &FitConfig) -> Result<&Path> {
    cfg.data_path
        .as_deref()
        .ok_or_else(|| CliError::Config("no input file: set `data_path` or pass --data".into()))
}

fn fit_command(args: &FitArgs, default_mode: Mode, verbose: bool) -> Result<ExitCode> {
    let cfg = load_fit_config(args)?;
    let mode = cfg.mode.unwrap_or(default_mode);
    let ds = ingest_csv(data_path(&cfg)?, &cfg.data)?;
    let prep = prepare(ds, &cfg)?;
    let out = run(&prep, &cfg, mode)?;
    write_outputs(&args.out, &prep, &cfg, &out, verbose, args.allow_nonconverged)?;
    if !out.converged() {
        if args.allow_nonconverged {
            log::warn!("fit did not converge");
        } else {
            eprintln!("error: fit did not converge (pass --allow-nonconverged to accept it)");
            return Ok(ExitCode::from(EXIT_NOT_CONVERGED));
        }
    }
    Ok(ExitCode::SUCCESS)
}

pub fn execute(cli: &Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Fit(a) => fit_command(a, Mode::None, cli.verbose),
        Command::Select(a) => fit_command(a, Mode::Simple, cli.verbose),
        Command::Predict(a) => {
            let model = load_model(&a.model)?;
            let preds = predict_rows(&model, &a.request)?;
            let flagged = preds.iter().filter(|p| !p.unseen.is_empty()).count();
            if flagged > 0 {
                log::warn!("{flagged} rows have group levels not seen in training");
            }
            let (headers, rows) = prediction_table(&preds);
            write_csv(&a.out, &headers, &rows)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Simulate(a) => {
            let mut cfg: ExperimentConfig = load_toml(a.config.as_deref())?;
            if let Some(s) = a.seed {
                cfg.dgp.seed = s;
            }
            if let Some(i) = a.iterations {
                cfg.iterations = i;
            }
            if let Some(w) = a.workers {
                cfg.workers = w;
            }
            experiment(&cfg, &a.out)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Bench(a) => {
            let mut cfg: BenchConfig = load_toml(a.config.as_deref())?;
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            if let Some(r) = a.repeats {
                cfg.repeats = r;
            }
            bench(&cfg, &a.out)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Generate(a) => {
            let cfg = DgpConfig {
                n: a.n,
                p: a.p,
                tau1: a.tau1,
                tau2: a.tau2,
                seed: a.seed,
                scaling: if a.literal {
                    DgpScaling::Literal
                } else {
                    DgpScaling::Normalized
                },
            };
            generate_csv(&cfg, &a.out)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Basis(a) => {
            let mut cfg = FitConfig::load(&a.config)?;
            if let Some(d) = &a.data {
                cfg.data_path = Some(d.clone());
            }
            cfg.validate()?;
            let ds = ingest_csv(data_path(&cfg)?, &cfg.data)?;
            let sites = ds.sites();
            let coords = samsel::basis::SiteCoords::new(sites.coords.clone())?;
            let range = cfg.range.unwrap_or_else(|| coords.max_nearest_neighbor_distance());
            let moran = moran_eigen(&build_proximity(&coords, range)?, cfg.l_max, DEFAULT_EPS_EIG)?;
            let mut headers = vec![cfg.data.site.clone()];
            headers.extend((1..=moran.len()).map(|l| format!("e{l}")));
            let v = moran.vectors();
            let rows: Vec<Vec<String>> = (0..v.nrows())
                .map(|i| {
                    let mut r = vec![sites.ids[i].clone()];
                    r.extend(v.row(i).iter().map(|&e| fmt_f64(e)));
                    r
                })
                .collect();
            write_csv(&a.out, &headers, &rows)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Lag(a) => {
            let table = read_table(&a.input)?;
            let lagged = lag_table(&table, &a.input, &a.site, &a.lag, &a.by)?;
            write_csv(&a.out, &lagged.headers, &lagged.rows)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}
