//! `seqtriage` command line.
//!
//! Exit codes: 0 success, 2 invalid input or configuration, 3 a fit did not
//! converge, 4 file or network IO. Log level comes from `SEQTRIAGE_LOG`
//! (`env_logger` syntax, default `info`).

pub mod commands;
pub mod config;
pub mod error;
pub mod plot;

use clap::{Args, Parser, Subcommand};
use config::{
    resolve_fit, resolve_simulation, FileConfig, FitConfig, Method, PredictConfig, Profile, Provenance, RunConfig,
    ServeConfig, SimulateConfig, StudyConfig,
};
use error::CliError;
use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(name = "seqtriage", version, about = "Multistage ordinal triage: simulate, fit, study, predict, serve")]
pub struct Cli {
    /// TOML file whose keys mirror the long flags (`n_stage1 = 2000`).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct SimArgs {
    /// Preset design; `paper` unless a config file says otherwise.
    #[arg(long, value_enum)]
    pub profile: Option<Profile>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_stage1: Option<usize>,
    #[arg(long)]
    pub replications: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub max_iterations: Option<usize>,
    #[arg(long)]
    pub gradient_tolerance: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write simulated cohorts and the true parameters.
    Simulate {
        #[command(flatten)]
        sim: SimArgs,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit a model to a cohort CSV.
    Fit {
        /// Cohort CSV.
        cohort: Option<PathBuf>,
        #[arg(long, value_enum)]
        method: Option<Method>,
        /// Model file; baseline fits add `_stage<k>` before the extension.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Center and scale continuous features before fitting.
        #[arg(long)]
        standardize: bool,
        #[command(flatten)]
        fit: FitArgs,
    },
    /// Monte Carlo comparison of the joint and stagewise estimators.
    Study {
        #[command(flatten)]
        sim: SimArgs,
        #[command(flatten)]
        fit: FitArgs,
        /// Parallel replications; 0 uses every core.
        #[arg(long)]
        jobs: Option<usize>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score one patient at one stage.
    Predict {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        stage: Option<usize>,
        /// `name=value`, repeatable; cover every feature up to the stage.
        #[arg(long = "feature", value_parser = parse_feature)]
        features: Vec<(String, f64)>,
        /// JSON object of name: value, merged with `--feature`.
        #[arg(long)]
        features_file: Option<PathBuf>,
    },
    /// Host the triage HTTP API for a joint model.
    Serve {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Name clients may pass when creating sessions; defaults to the file stem.
        #[arg(long)]
        model_id: Option<String>,
        #[arg(long)]
        host: Option<String>,
        #[arg(long)]
        port: Option<u16>,
        /// Session snapshot file, loaded on start and rewritten on change.
        #[arg(long)]
        snapshot: Option<PathBuf>,
    },
}

fn parse_feature(s: &str) -> Result<(String, f64), String> {
    let (name, value) = s.split_once('=').ok_or_else(|| format!("expected name=value, got {s:?}"))?;
    let v: f64 = value
        .trim()
        .parse()
        .map_err(|_| format!("feature {name}: {value:?} is not a number"))?;
    if !v.is_finite() {
        return Err(format!("feature {name} must be finite"));
    }
    Ok((name.trim().to_string(), v))
}

fn required<T>(v: Option<T>, what: &str) -> Result<T, CliError> {
    v.ok_or_else(|| CliError::Validation(format!("missing {what} (flag or config key)")))
}

fn read_features_file(path: &Path) -> Result<BTreeMap<String, f64>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let raw: BTreeMap<String, serde_json::Value> =
        serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    raw.into_iter()
        .map(|(k, v)| match v.as_f64() {
            Some(x) => Ok((k, x)),
            None => Err(CliError::Validation(format!("feature {k} is not a number"))),
        })
        .collect()
}

/// Applies file settings under the flags, producing the run to execute.
pub fn resolve(cli: &Cli) -> Result<(RunConfig, BTreeMap<String, f64>), CliError> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let mut features = BTreeMap::new();
    let run = match &cli.command {
        Command::Simulate { sim, out } => {
            let (profile, simulation) =
                resolve_simulation(sim.profile, &file, sim.seed, sim.n_stage1, sim.replications, Some(1))?;
            RunConfig::Simulate(SimulateConfig {
                profile,
                simulation,
                out: out.clone().or(file.out.clone()).unwrap_or_else(|| "simulated".into()),
            })
        }
        Command::Fit {
            cohort,
            method,
            out,
            standardize,
            fit,
        } => RunConfig::Fit(FitConfig {
            cohort: required(cohort.clone().or(file.cohort.clone()), "cohort path")?,
            method: method.or(file.method).unwrap_or_default(),
            standardize: *standardize || file.standardize.unwrap_or(false),
            fit: resolve_fit(&file, fit.max_iterations, fit.gradient_tolerance)?,
            out: out.clone().or(file.out.clone()).unwrap_or_else(|| "model.json".into()),
        }),
        Command::Study { sim, fit, jobs, out } => {
            let (profile, simulation) =
                resolve_simulation(sim.profile, &file, sim.seed, sim.n_stage1, sim.replications, None)?;
            RunConfig::Study(StudyConfig {
                profile,
                simulation,
                fit: resolve_fit(&file, fit.max_iterations, fit.gradient_tolerance)?,
                jobs: jobs.or(file.jobs).unwrap_or(0),
                out: out.clone().or(file.out.clone()).unwrap_or_else(|| "study".into()),
            })
        }
        Command::Predict {
            model,
            stage,
            features: flags,
            features_file,
        } => {
            if let Some(p) = features_file {
                features = read_features_file(p)?;
            }
            for (k, v) in flags {
                if features.insert(k.clone(), *v).is_some() {
                    return Err(CliError::Validation(format!("feature {k} given twice")));
                }
            }
            RunConfig::Predict(PredictConfig {
                model: required(model.clone().or(file.model.clone()), "model path")?,
                stage: required(stage.or(file.stage), "stage")?,
            })
        }
        Command::Serve {
            model,
            model_id,
            host,
            port,
            snapshot,
        } => {
            let model = required(model.clone().or(file.model.clone()), "model path")?;
            let model_id = model_id
                .clone()
                .or(file.model_id.clone())
                .or_else(|| model.file_stem().map(|s| s.to_string_lossy().into_owned()))
                .unwrap_or_else(|| "model".into());
            RunConfig::Serve(ServeConfig {
                model,
                model_id,
                host: host.clone().or(file.host.clone()).unwrap_or_else(|| "127.0.0.1".into()),
                port: port.or(file.port).unwrap_or(8080),
                snapshot: snapshot.clone().or(file.snapshot.clone()),
            })
        }
    };
    Ok((run, features))
}

pub fn execute(run: &RunConfig, features: &BTreeMap<String, f64>) -> Result<(), CliError> {
    match run {
        RunConfig::Simulate(c) => {
            let files = commands::cmd_simulate(c, run)?;
            println!("wrote {} cohort file(s) to {}", files.len(), c.out.display());
        }
        RunConfig::Fit(c) => {
            commands::cmd_fit(c, run)?;
        }
        RunConfig::Study(c) => {
            commands::cmd_study(c, run)?;
        }
        RunConfig::Predict(c) => {
            let d = commands::cmd_predict(c, features)?;
            let out = commands::PredictOutput {
                provenance: Provenance::new(run),
                decision: &d,
            };
            println!("{}", serde_json::to_string_pretty(&out).expect("decision serializes"));
        }
        RunConfig::Serve(c) => commands::cmd_serve(c)?,
    }
    Ok(())
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("SEQTRIAGE_LOG", "info");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    init_logging();
    match resolve(&cli).and_then(|(run, features)| execute(&run, &features)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
