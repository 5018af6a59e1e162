//! Maximum-likelihood fitting: the shared-coefficient joint model and the
//! independent per-stage baseline.
//!
//! Both run the same likelihood engine through [`crate::optimize`]. Band
//! cutoffs are optimized as `(L, log(U − L))` so the ordering constraint
//! never binds.

use crate::cohort::{CohortError, StageDataset};
use crate::likelihood::{self, GroupPartition, LikelihoodError};
use crate::model::{logit, Cutoffs, Label, ModelError, Parameters};
use crate::optimize::{self, BfgsOptions, StopReason};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Minimum gap enforced between initial lower and upper cutoffs.
pub const MIN_INITIAL_GAP: f64 = 1e-3;
/// `‖β‖₂` above this flags likely separation.
pub const DIVERGENCE_NORM: f64 = 1e3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("stage {stage} is degenerate: {reason}")]
    DegenerateStage { stage: usize, reason: String },
    #[error("invalid fit options: {0}")]
    InvalidOptions(String),
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error(transparent)]
    Likelihood(#[from] LikelihoodError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub enum Initialization {
    /// `β = 0`, cutoffs from empirical cumulative label frequencies.
    #[default]
    ZerosAndQuantiles,
    UserSupplied(Parameters),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub relative_objective_tolerance: f64,
    pub initialization: Initialization,
    pub threshold_reparameterization: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            gradient_tolerance: 1e-6,
            relative_objective_tolerance: 1e-10,
            initialization: Initialization::ZerosAndQuantiles,
            threshold_reparameterization: true,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<(), FitError> {
        if self.max_iterations == 0 {
            return Err(FitError::InvalidOptions("max_iterations must be at least 1".into()));
        }
        if !(self.gradient_tolerance > 0.0) || !(self.relative_objective_tolerance > 0.0) {
            return Err(FitError::InvalidOptions("tolerances must be positive".into()));
        }
        Ok(())
    }

    fn bfgs(&self) -> BfgsOptions {
        BfgsOptions {
            max_iterations: self.max_iterations,
            gradient_tolerance: self.gradient_tolerance,
            relative_objective_tolerance: self.relative_objective_tolerance,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FitMethod {
    Joint,
    BaselineStagewise { stage: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FitWarning {
    /// Coefficient norm ran past [`DIVERGENCE_NORM`]; the data may be separable.
    Divergence { beta_norm: f64 },
    LineSearchStalled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub params: Parameters,
    pub final_log_likelihood: f64,
    pub iterations_used: usize,
    pub converged: bool,
    /// Log-likelihood at the start point and after every accepted step.
    pub objective_trace: Vec<f64>,
    pub method: FitMethod,
    pub warnings: Vec<FitWarning>,
}

fn stage_fractions(data: &StageDataset, stage: usize) -> Result<(usize, [usize; 3]), FitError> {
    let mut counts = [0usize; 3];
    let view = data.stage_view(stage);
    for &i in &view {
        let l = data.records()[i]
            .label(stage)
            .ok_or_else(|| CohortError::MissingLabel {
                id: data.records()[i].id.clone(),
                stage,
            })?;
        counts[l.index()] += 1;
    }
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(FitError::DegenerateStage {
            stage,
            reason: if view.is_empty() {
                "no records reach this stage".into()
            } else {
                "all records share one label".into()
            },
        });
    }
    Ok((view.len(), counts))
}

/// Initial `(L, U)` for a banded stage with label counts `(n₀, n½, n₁)`.
///
/// Cumulative fractions are clamped to `[1/(2N), 1 − 1/(2N)]` so an empty
/// outer group still yields a finite start; the band is at least
/// [`MIN_INITIAL_GAP`] wide, centred on the midpoint.
pub fn initial_band(n: usize, counts: [usize; 3]) -> (f64, f64) {
    let nf = n as f64;
    let lo = 0.5 / nf;
    let clamp = |p: f64| p.clamp(lo, 1.0 - lo);
    let lower = logit(clamp(counts[0] as f64 / nf));
    let upper = logit(clamp((counts[0] + counts[1]) as f64 / nf));
    if upper - lower < MIN_INITIAL_GAP {
        let mid = 0.5 * (lower + upper);
        return (mid - 0.5 * MIN_INITIAL_GAP, mid + 0.5 * MIN_INITIAL_GAP);
    }
    (lower, upper)
}

fn initial_cutoffs(n: usize, counts: [usize; 3], banded: bool) -> Cutoffs {
    if banded {
        let (lower, upper) = initial_band(n, counts);
        Cutoffs::Band { lower, upper }
    } else {
        let lo = 0.5 / n as f64;
        Cutoffs::Single {
            cut: logit((counts[0] as f64 / n as f64).clamp(lo, 1.0 - lo)),
        }
    }
}

/// `β = 0` and cutoffs at the logit of each stage's cumulative label
/// fractions.
pub fn initialize_parameters(data: &StageDataset) -> Result<Parameters, FitError> {
    let layout = data.layout();
    let k_max = layout.num_stages();
    let mut cutoffs = Vec::with_capacity(k_max);
    for stage in 1..=k_max {
        let (n, counts) = stage_fractions(data, stage)?;
        cutoffs.push(initial_cutoffs(n, counts, stage < k_max));
    }
    Ok(Parameters::new(
        vec![0.0; layout.total_coefficients()],
        layout.stage_widths(),
        cutoffs,
    )?)
}

fn initialize_stage(data: &StageDataset, stage: usize) -> Result<Parameters, FitError> {
    let (n, counts) = stage_fractions(data, stage)?;
    let banded = stage < data.layout().num_stages();
    Ok(Parameters::single_stage(
        vec![0.0; data.layout().cumulative_count(stage)],
        initial_cutoffs(n, counts, banded),
    )?)
}

/// Maps natural parameters to unconstrained optimizer coordinates:
/// bands become `(L, log(U − L))`, single cuts and `β` pass through.
pub fn reparameterize(params: &Parameters) -> Vec<f64> {
    let mut z = params.beta().to_vec();
    for c in params.cutoffs() {
        match *c {
            Cutoffs::Band { lower, upper } => {
                z.push(lower);
                z.push((upper - lower).ln());
            }
            Cutoffs::Single { cut } => z.push(cut),
        }
    }
    z
}

/// Inverse of [`reparameterize`], shaped like `template`.
pub fn unreparameterize(template: &Parameters, z: &[f64]) -> Result<Parameters, ModelError> {
    template.with_flat(&natural_flat(template, z))
}

fn natural_flat(template: &Parameters, z: &[f64]) -> Vec<f64> {
    let nb = template.beta().len();
    let mut out = z[..nb].to_vec();
    let mut at = nb;
    for c in template.cutoffs() {
        match c {
            Cutoffs::Band { .. } => {
                let lower = z[at];
                out.push(lower);
                out.push(lower + z[at + 1].exp());
                at += 2;
            }
            Cutoffs::Single { .. } => {
                out.push(z[at]);
                at += 1;
            }
        }
    }
    out
}

/// Chain rule from a natural-coordinate gradient to `z` coordinates.
pub fn reparameterized_gradient(template: &Parameters, z: &[f64], natural_grad: &[f64]) -> Vec<f64> {
    let nb = template.beta().len();
    let mut out = natural_grad[..nb].to_vec();
    let mut at = nb;
    for c in template.cutoffs() {
        match c {
            Cutoffs::Band { .. } => {
                let (dl, du) = (natural_grad[at], natural_grad[at + 1]);
                out.push(dl + du);
                out.push(du * z[at + 1].exp());
                at += 2;
            }
            Cutoffs::Single { .. } => {
                out.push(natural_grad[at]);
                at += 1;
            }
        }
    }
    out
}

fn fit_partition(
    part: &GroupPartition,
    start: Parameters,
    opts: &FitOptions,
    method: FitMethod,
) -> Result<FitResult, FitError> {
    let bfgs = opts.bfgs();
    let n = start.num_free();
    let mut natural = vec![0.0; n];
    let mut g_nat = vec![0.0; n];

    let (outcome, params) = if opts.threshold_reparameterization {
        let z0 = reparameterize(&start);
        let out = optimize::minimize(
            |z, g| {
                natural.copy_from_slice(&natural_flat(&start, z));
                let ll = likelihood::eval_flat(part, &natural, Some(&mut g_nat));
                let gz = reparameterized_gradient(&start, z, &g_nat);
                for (gi, v) in g.iter_mut().zip(gz) {
                    *gi = -v;
                }
                -ll
            },
            &z0,
            &bfgs,
        );
        let p = unreparameterize(&start, &out.x)?;
        (out, p)
    } else {
        let x0 = start.to_flat();
        let out = optimize::minimize(
            |x, g| {
                let ll = likelihood::eval_flat(part, x, Some(g));
                g.iter_mut().for_each(|v| *v = -*v);
                -ll
            },
            &x0,
            &bfgs,
        );
        let p = start.with_flat(&out.x)?;
        (out, p)
    };

    let mut warnings = Vec::new();
    let beta_norm = params.beta().iter().map(|b| b * b).sum::<f64>().sqrt();
    if beta_norm > DIVERGENCE_NORM {
        log::warn!("fit diverging: |beta| = {beta_norm:.3e}");
        warnings.push(FitWarning::Divergence { beta_norm });
    }
    if outcome.reason == StopReason::LineSearchFailed {
        warnings.push(FitWarning::LineSearchStalled);
    }
    Ok(FitResult {
        final_log_likelihood: -outcome.value,
        iterations_used: outcome.iterations,
        converged: outcome.converged(),
        objective_trace: outcome.trace.iter().map(|v| -v).collect(),
        params,
        method,
        warnings,
    })
}

fn start_params(data_init: impl FnOnce() -> Result<Parameters, FitError>, opts: &FitOptions) -> Result<Parameters, FitError> {
    match &opts.initialization {
        Initialization::ZerosAndQuantiles => data_init(),
        Initialization::UserSupplied(p) => Ok(p.clone()),
    }
}

/// Fits all stages at once with shared coefficients.
pub fn fit_joint(data: &StageDataset, opts: &FitOptions) -> Result<FitResult, FitError> {
    opts.validate()?;
    let part = likelihood::group_partition(data)?;
    let start = start_params(|| initialize_parameters(data), opts)?;
    likelihood::joint_log_likelihood(&start, &part)?;
    fit_partition(&part, start, opts, FitMethod::Joint)
}

/// Fits stage `stage` alone on its own records with its own coefficients:
/// ordinal (three categories) before the last stage, binary at it.
pub fn fit_single_stage(data: &StageDataset, stage: usize, opts: &FitOptions) -> Result<FitResult, FitError> {
    opts.validate()?;
    let part = GroupPartition::single_stage(data, stage)?;
    let start = start_params(|| initialize_stage(data, stage), opts)?;
    likelihood::joint_log_likelihood(&start, &part)?;
    fit_partition(&part, start, opts, FitMethod::BaselineStagewise { stage })
}

/// Independent per-stage fits (no coefficient sharing), one per stage.
pub fn fit_baseline_stagewise(data: &StageDataset, opts: &FitOptions) -> Result<Vec<FitResult>, FitError> {
    (1..=data.layout().num_stages())
        .map(|k| fit_single_stage(data, k, &FitOptions {
            initialization: Initialization::ZerosAndQuantiles,
            ..opts.clone()
        }))
        .collect()
}

/// Labels predicted at `stage` by thresholding `βᵀx` for every record in the
/// stage view. Used for in-sample and held-out prediction metrics.
pub fn predict_stage_labels(params: &Parameters, params_stage: usize, data: &StageDataset, stage: usize) -> Result<Vec<(Label, Label)>, FitError> {
    let cut = params.stage_cutoffs(params_stage)?;
    let beta = params.stage_beta(params_stage)?;
    let mut out = Vec::new();
    for i in data.stage_view(stage) {
        let x = data.design_row(i, stage);
        if x.len() != beta.len() {
            return Err(ModelError::DimensionMismatch {
                stage,
                expected: beta.len(),
                found: x.len(),
            }
            .into());
        }
        let eta = crate::model::dot(beta, &x);
        let truth = data.records()[i].label(stage).ok_or_else(|| CohortError::MissingLabel {
            id: data.records()[i].id.clone(),
            stage,
        })?;
        out.push((truth, cut.classify(eta)));
    }
    Ok(out)
}
