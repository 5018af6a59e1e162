//! Run settings: command-line flags over an optional TOML file over the
//! chosen profile. The fully resolved [`RunConfig`] is echoed into every
//! output.

use crate::error::CliError;
use clap::ValueEnum;
use seqtriage_core::simgen::SimConfig;
use seqtriage_core::FitOptions;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum, Default)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// N₁ = 10,000 and 100 replications.
    #[default]
    Paper,
    /// N₁ = 2,000 and 30 replications.
    Desk,
}

impl Profile {
    pub fn sim_config(self) -> SimConfig {
        match self {
            Profile::Paper => SimConfig::paper(),
            Profile::Desk => SimConfig::desk(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum, Default)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Joint,
    Baseline,
}

/// Keys mirror the long flags with `-` written as `_`. A `[simulation]`
/// table replaces the profile's design wholesale.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub profile: Option<Profile>,
    pub seed: Option<u64>,
    pub n_stage1: Option<usize>,
    pub replications: Option<usize>,
    pub jobs: Option<usize>,
    pub out: Option<PathBuf>,
    pub method: Option<Method>,
    pub standardize: Option<bool>,
    pub max_iterations: Option<usize>,
    pub gradient_tolerance: Option<f64>,
    pub relative_objective_tolerance: Option<f64>,
    pub cohort: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub model_id: Option<String>,
    pub stage: Option<usize>,
    pub host: Option<String>,
    pub port: Option<u16>,
    pub snapshot: Option<PathBuf>,
    pub simulation: Option<SimConfig>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
    }
}

/// Serializable view of [`FitOptions`] (always starting from zeros and
/// empirical quantiles).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSettings {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub relative_objective_tolerance: f64,
    pub threshold_reparameterization: bool,
}

impl Default for FitSettings {
    fn default() -> Self {
        let d = FitOptions::default();
        Self {
            max_iterations: d.max_iterations,
            gradient_tolerance: d.gradient_tolerance,
            relative_objective_tolerance: d.relative_objective_tolerance,
            threshold_reparameterization: d.threshold_reparameterization,
        }
    }
}

impl FitSettings {
    pub fn options(&self) -> Result<FitOptions, CliError> {
        let o = FitOptions {
            max_iterations: self.max_iterations,
            gradient_tolerance: self.gradient_tolerance,
            relative_objective_tolerance: self.relative_objective_tolerance,
            threshold_reparameterization: self.threshold_reparameterization,
            ..FitOptions::default()
        };
        o.validate()?;
        Ok(o)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateConfig {
    pub profile: Option<Profile>,
    pub simulation: SimConfig,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub cohort: PathBuf,
    pub method: Method,
    pub standardize: bool,
    pub fit: FitSettings,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub profile: Option<Profile>,
    pub simulation: SimConfig,
    pub fit: FitSettings,
    /// Worker threads for replications; 0 means one per core.
    pub jobs: usize,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictConfig {
    pub model: PathBuf,
    pub stage: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServeConfig {
    pub model: PathBuf,
    pub model_id: String,
    pub host: String,
    pub port: u16,
    pub snapshot: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum RunConfig {
    Simulate(SimulateConfig),
    Fit(FitConfig),
    Study(StudyConfig),
    Predict(PredictConfig),
    Serve(ServeConfig),
}

impl RunConfig {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&Provenance::new(self)).expect("run config serializes");
        s.push('\n');
        s
    }
}

/// A resolved run plus the tool version that executed it.
#[derive(Debug, Clone, Serialize)]
pub struct Provenance<'a> {
    pub tool_version: &'static str,
    pub run: &'a RunConfig,
}

impl<'a> Provenance<'a> {
    pub fn new(run: &'a RunConfig) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION"),
            run,
        }
    }
}

/// Resolves a simulation design: `[simulation]` table or profile, then the
/// scalar overrides.
pub fn resolve_simulation(
    profile: Option<Profile>,
    file: &FileConfig,
    seed: Option<u64>,
    n_stage1: Option<usize>,
    replications: Option<usize>,
    default_replications: Option<usize>,
) -> Result<(Option<Profile>, SimConfig), CliError> {
    let profile = profile.or(file.profile);
    let mut sim = match (&file.simulation, profile) {
        (Some(s), None) => s.clone(),
        (Some(_), Some(_)) => {
            return Err(CliError::Validation(
                "a [simulation] table and a profile are mutually exclusive".into(),
            ))
        }
        (None, p) => p.unwrap_or_default().sim_config(),
    };
    if let Some(s) = seed.or(file.seed) {
        sim.seed = s;
    }
    if let Some(n) = n_stage1.or(file.n_stage1) {
        sim.n_stage1 = n;
    }
    if let Some(r) = replications.or(file.replications).or(default_replications) {
        sim.replications = r;
    }
    sim.validate()?;
    Ok((profile, sim))
}

pub fn resolve_fit(
    file: &FileConfig,
    max_iterations: Option<usize>,
    gradient_tolerance: Option<f64>,
) -> Result<FitSettings, CliError> {
    let mut f = FitSettings::default();
    if let Some(m) = max_iterations.or(file.max_iterations) {
        f.max_iterations = m;
    }
    if let Some(g) = gradient_tolerance.or(file.gradient_tolerance) {
        f.gradient_tolerance = g;
    }
    if let Some(r) = file.relative_objective_tolerance {
        f.relative_objective_tolerance = r;
    }
    f.options()?;
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_over_profile() {
        let file: FileConfig = toml::from_str("profile = \"desk\"\nseed = 7\nn_stage1 = 900\n").unwrap();
        let (p, s) = resolve_simulation(None, &file, Some(9), None, None, Some(1)).unwrap();
        assert_eq!(p, Some(Profile::Desk));
        assert_eq!((s.seed, s.n_stage1, s.replications), (9, 900, 1));
        let (_, s) = resolve_simulation(Some(Profile::Paper), &file, None, None, None, None).unwrap();
        assert_eq!((s.n_stage1, s.replications, s.seed), (900, 100, 7));
    }

    #[test]
    fn file_rejects_unknown_keys_and_bad_values() {
        assert!(toml::from_str::<FileConfig>("seeed = 1").is_err());
        let file = FileConfig::default();
        assert!(resolve_simulation(None, &file, None, Some(0), None, None).is_err());
        assert!(resolve_fit(&file, Some(0), None).is_err());
    }

    #[test]
    fn simulation_table_replaces_profile() {
        let text = r#"
[simulation]
n_stage1 = 50
new_feature_counts = [1, 1]
feature_laws = [{ law = "bernoulli", p = 0.5 }, { law = "normal", mean = 0.0, variance = 1.0 }]
true_beta = [1.0, 2.0]
true_bands = [[-1.0, 1.0]]
true_final_cut = 0.0
noise_scales = [1.0, 1.0]
replications = 2
seed = 3
"#;
        let file: FileConfig = toml::from_str(text).unwrap();
        let (_, s) = resolve_simulation(None, &file, None, None, None, None).unwrap();
        assert_eq!((s.n_stage1, s.replications, s.true_beta.len()), (50, 2, 2));
        assert!(resolve_simulation(Some(Profile::Desk), &file, None, None, None, None).is_err());
    }
}
