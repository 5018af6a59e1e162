//! Synthetic multistage cohorts and the Monte Carlo comparison of the joint
//! and stagewise estimators.
//!
//! Replication `r` draws from `ChaCha8Rng` seeded with `seed ^ r`; stream 0
//! is the training cohort and stream 1 the held-out cohort used for
//! prediction metrics. Every record consumes the same number of draws in a
//! fixed order (all features, then one noise term per stage) whether or not
//! it advances, so cohorts of different sizes share their prefixes.
//!
//! `Normal { mean, variance }` takes a variance, not a standard deviation.

use crate::cohort::{PatientRecord, StageDataset};
use crate::estimation::{self, FitError, FitOptions, FitResult};
use crate::metrics::{self, MetricAverage, MulticlassCounts, METRIC_NAMES};
use crate::model::{Cutoffs, FeatureSpec, Label, Parameters, StageLayout};
use rand::distr::{Bernoulli, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_SEED: u64 = 20_230_817;
/// Largest tolerated fraction of replications dropped for failed fits.
pub const MAX_EXCLUDED_FRACTION: f64 = 0.05;

const TRAINING_STREAM: u64 = 0;
const HOLDOUT_STREAM: u64 = 1;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("{excluded} of {total} replications failed to fit")]
    TooManyExclusions { excluded: usize, total: usize },
    #[error("relative efficiency undefined: variance is zero or not finite")]
    DegenerateVariance,
    #[error("no estimates to summarize")]
    NoEstimates,
    #[error("estimate row {row} has {found} values, expected {expected}")]
    RaggedEstimates { row: usize, expected: usize, found: usize },
    #[error("thread pool: {0}")]
    ThreadPool(String),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Cohort(#[from] crate::cohort::CohortError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "law")]
pub enum FeatureLaw {
    Bernoulli { p: f64 },
    Normal { mean: f64, variance: f64 },
}

impl FeatureLaw {
    fn check(&self) -> Result<(), String> {
        match *self {
            FeatureLaw::Bernoulli { p } if !(0.0..=1.0).contains(&p) => Err(format!("Bernoulli p={p} outside [0,1]")),
            FeatureLaw::Normal { mean, variance } if !mean.is_finite() || !(variance > 0.0 && variance.is_finite()) => {
                Err(format!("Normal({mean}, {variance}) needs finite mean and positive variance"))
            }
            _ => Ok(()),
        }
    }
}

enum Sampler {
    Bernoulli(Bernoulli),
    Normal(Normal<f64>),
}

impl Sampler {
    fn new(law: FeatureLaw) -> Self {
        match law {
            FeatureLaw::Bernoulli { p } => Sampler::Bernoulli(Bernoulli::new(p).expect("checked p")),
            FeatureLaw::Normal { mean, variance } => Sampler::Normal(Normal::new(mean, variance.sqrt()).expect("checked variance")),
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            Sampler::Bernoulli(b) => f64::from(u8::from(b.sample(rng))),
            Sampler::Normal(n) => n.sample(rng),
        }
    }
}

/// Logistic(0, scale) by inversion; `u = 0` is redrawn.
fn logistic_noise(rng: &mut ChaCha8Rng, scale: f64) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return scale * (u / (1.0 - u)).ln();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub n_stage1: usize,
    pub new_feature_counts: Vec<usize>,
    pub feature_laws: Vec<FeatureLaw>,
    pub true_beta: Vec<f64>,
    /// `(L*, U*)` for every stage before the last.
    pub true_bands: Vec<(f64, f64)>,
    pub true_final_cut: f64,
    /// Logistic noise scale per stage.
    pub noise_scales: Vec<f64>,
    pub replications: usize,
    pub seed: u64,
}

impl SimConfig {
    /// The two-stage design: seven features, `β = [2,2,2,2,4,4,4]`,
    /// cutoffs `(−2.2, 2.2, 0.5)`, 10,000 patients, 100 replications.
    pub fn paper() -> Self {
        use FeatureLaw::*;
        Self {
            n_stage1: 10_000,
            new_feature_counts: vec![4, 3],
            feature_laws: vec![
                Bernoulli { p: 0.3 },
                Normal { mean: -1.0, variance: 1.0 },
                Normal { mean: 1.0, variance: 1.0 },
                Normal { mean: 0.0, variance: 2.0 },
                Bernoulli { p: 0.4 },
                Normal { mean: -1.0, variance: 1.0 },
                Normal { mean: 0.0, variance: 1.0 },
            ],
            true_beta: vec![2.0, 2.0, 2.0, 2.0, 4.0, 4.0, 4.0],
            true_bands: vec![(-2.2, 2.2)],
            true_final_cut: 0.5,
            noise_scales: vec![1.0, 1.0],
            replications: 100,
            seed: DEFAULT_SEED,
        }
    }

    /// [`paper`](Self::paper) shrunk to 2,000 patients and 30 replications.
    pub fn desk() -> Self {
        Self {
            n_stage1: 2_000,
            replications: 30,
            ..Self::paper()
        }
    }

    pub fn num_stages(&self) -> usize {
        self.new_feature_counts.len()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        if self.n_stage1 == 0 {
            return bad("n_stage1 must be at least 1".into());
        }
        if self.replications == 0 {
            return bad("replications must be at least 1".into());
        }
        let k = self.num_stages();
        if k < 2 {
            return bad(format!("need at least 2 stages, got {k}"));
        }
        let total: usize = self.new_feature_counts.iter().sum();
        if self.new_feature_counts.contains(&0) {
            return bad("every stage needs at least one new feature".into());
        }
        if self.feature_laws.len() != total || self.true_beta.len() != total {
            return bad(format!(
                "{total} features but {} laws and {} coefficients",
                self.feature_laws.len(),
                self.true_beta.len()
            ));
        }
        for law in &self.feature_laws {
            law.check().map_err(SimError::InvalidConfig)?;
        }
        if self.true_bands.len() + 1 != k || self.noise_scales.len() != k {
            return bad(format!("{k} stages need {} bands and {k} noise scales", k - 1));
        }
        if self.noise_scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return bad("noise scales must be positive".into());
        }
        self.true_params()?;
        Ok(())
    }

    /// Features named `x1, x2, …`; Bernoulli features are marked binary.
    pub fn layout(&self) -> Result<StageLayout, SimError> {
        let specs = self
            .feature_laws
            .iter()
            .enumerate()
            .map(|(i, law)| match law {
                FeatureLaw::Bernoulli { .. } => FeatureSpec::binary(format!("x{}", i + 1)),
                FeatureLaw::Normal { .. } => FeatureSpec::continuous(format!("x{}", i + 1)),
            })
            .collect();
        Ok(StageLayout::with_features(self.new_feature_counts.clone(), specs)?)
    }

    pub fn true_params(&self) -> Result<Parameters, SimError> {
        Ok(Parameters::for_layout(
            &self.layout()?,
            self.true_beta.clone(),
            &self.true_bands,
            self.true_final_cut,
        )?)
    }
}

/// Training cohort of replication `replication`.
pub fn generate_cohort(config: &SimConfig, replication: u64) -> Result<StageDataset, SimError> {
    generate_stream(config, replication, TRAINING_STREAM)
}

/// Held-out cohort of replication `replication`, same size and law as the
/// training cohort but an independent stream.
pub fn generate_holdout(config: &SimConfig, replication: u64) -> Result<StageDataset, SimError> {
    generate_stream(config, replication, HOLDOUT_STREAM)
}

fn generate_stream(config: &SimConfig, replication: u64, stream: u64) -> Result<StageDataset, SimError> {
    config.validate()?;
    let layout = config.layout()?;
    let truth = config.true_params()?;
    let samplers: Vec<Sampler> = config.feature_laws.iter().map(|&l| Sampler::new(l)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ replication);
    rng.set_stream(stream);

    let k_max = config.num_stages();
    let mut records = Vec::with_capacity(config.n_stage1);
    let mut x = vec![0.0; samplers.len()];
    let mut noise = vec![0.0; k_max];
    for i in 0..config.n_stage1 {
        for (xi, s) in x.iter_mut().zip(&samplers) {
            *xi = s.draw(&mut rng);
        }
        for (e, &scale) in noise.iter_mut().zip(&config.noise_scales) {
            *e = logistic_noise(&mut rng, scale);
        }

        let mut features = Vec::with_capacity(k_max);
        let mut labels = Vec::with_capacity(k_max);
        let mut offset = 0;
        for stage in 1..=k_max {
            let p = config.new_feature_counts[stage - 1];
            features.push(x[offset..offset + p].to_vec());
            offset += p;
            let eta = crate::model::dot(truth.stage_beta(stage)?, &x[..offset]);
            let label = truth.stage_cutoffs(stage)?.classify(eta + noise[stage - 1]);
            labels.push(Some(label));
            if label != Label::Indeterminate {
                break;
            }
        }
        records.push(PatientRecord::new(format!("{i:06}"), features, labels));
    }
    Ok(StageDataset::new(layout, records)?)
}

/// Summary of one parameter's estimates across replications.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorStats {
    pub mean: f64,
    /// Sample standard deviation (`n − 1`); absent for one replication.
    pub std: Option<f64>,
    pub bias: f64,
    /// Mean squared deviation of the estimates from the truth.
    pub mse: f64,
    pub count: usize,
}

impl EstimatorStats {
    /// Variance with the `n − 1` denominator.
    pub fn variance(&self) -> Option<f64> {
        self.std.map(|s| s * s)
    }

    /// Variance with the `n` denominator, for which `mse = bias² + var` holds.
    pub fn population_variance(&self) -> f64 {
        self.variance().map_or(0.0, |v| v * (self.count - 1) as f64 / self.count as f64)
    }
}

/// Per-column mean, std and MSE of a replication × parameter matrix.
pub fn estimator_statistics(estimates: &[Vec<f64>], truth: &[f64]) -> Result<Vec<EstimatorStats>, SimError> {
    if estimates.is_empty() {
        return Err(SimError::NoEstimates);
    }
    for (row, e) in estimates.iter().enumerate() {
        if e.len() != truth.len() {
            return Err(SimError::RaggedEstimates {
                row,
                expected: truth.len(),
                found: e.len(),
            });
        }
    }
    let n = estimates.len();
    let nf = n as f64;
    Ok((0..truth.len())
        .map(|j| {
            let mean = estimates.iter().map(|e| e[j]).sum::<f64>() / nf;
            let ss: f64 = estimates.iter().map(|e| (e[j] - mean).powi(2)).sum();
            let mse = estimates.iter().map(|e| (e[j] - truth[j]).powi(2)).sum::<f64>() / nf;
            EstimatorStats {
                mean,
                std: (n > 1).then(|| (ss / (nf - 1.0)).sqrt()),
                bias: mean - truth[j],
                mse,
                count: n,
            }
        })
        .collect())
}

/// `var(baseline) / var(joint)`.
pub fn relative_efficiency(var_baseline: f64, var_joint: f64) -> Result<f64, SimError> {
    let ok = |v: f64| v > 0.0 && v.is_finite();
    if !ok(var_baseline) || !ok(var_joint) {
        return Err(SimError::DegenerateVariance);
    }
    Ok(var_baseline / var_joint)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSummary {
    pub name: String,
    pub truth: f64,
    #[serde(flatten)]
    pub stats: EstimatorStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    /// `joint` or `baseline_stage{k}`.
    pub method: String,
    pub parameters: Vec<ParameterSummary>,
}

impl EstimatorSummary {
    pub fn get(&self, name: &str) -> Option<&ParameterSummary> {
        self.parameters.iter().find(|p| p.name == name)
    }
}

/// Joint vs baseline variance ratio for one parameter.
///
/// Coefficients are paired with the last stage's baseline (headline) and with
/// the baseline of the stage that introduces them; cutoffs only with their own
/// stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyRow {
    pub parameter: String,
    pub introduced_stage: usize,
    pub headline_stage: usize,
    pub headline: Option<f64>,
    pub at_introduction: Option<f64>,
}

/// Squared distance between the mean estimate and the truth, averaged over
/// the coefficients a stage uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMse {
    pub stage: usize,
    pub coefficients: usize,
    pub joint: f64,
    pub baseline: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricMean {
    pub metric: String,
    pub mean: Option<f64>,
    pub coverage: u64,
}

/// Held-out prediction metrics averaged over replications; stage `k < K`
/// rows are one-vs-rest per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub stage: usize,
    pub method: String,
    pub positive_class: Label,
    pub values: Vec<MetricMean>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub replication: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationSizes {
    pub replication: usize,
    pub stage_sizes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub config: SimConfig,
    pub replications_used: usize,
    pub excluded: Vec<Exclusion>,
    pub stage_sizes: Vec<ReplicationSizes>,
    pub estimators: Vec<EstimatorSummary>,
    pub efficiency: Vec<EfficiencyRow>,
    pub stage_mse: Vec<StageMse>,
    pub metrics: Vec<MetricSummary>,
}

impl MonteCarloReport {
    pub fn estimator(&self, method: &str) -> Option<&EstimatorSummary> {
        self.estimators.iter().find(|e| e.method == method)
    }

    pub fn joint(&self) -> &EstimatorSummary {
        self.estimator("joint").expect("report always carries the joint estimator")
    }

    pub fn baseline(&self, stage: usize) -> Option<&EstimatorSummary> {
        self.estimator(&baseline_name(stage))
    }

    /// Long-format table: one row per method and parameter.
    pub fn estimator_table_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["method", "parameter", "truth", "mean", "std", "bias", "mse", "count"])
            .expect("in-memory write");
        for e in &self.estimators {
            for p in &e.parameters {
                w.write_record([
                    e.method.clone(),
                    p.name.clone(),
                    p.truth.to_string(),
                    p.stats.mean.to_string(),
                    opt(p.stats.std),
                    p.stats.bias.to_string(),
                    p.stats.mse.to_string(),
                    p.stats.count.to_string(),
                ])
                .expect("in-memory write");
            }
        }
        finish(w)
    }

    pub fn efficiency_table_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["parameter", "introduced_stage", "headline_stage", "headline", "at_introduction"])
            .expect("in-memory write");
        for r in &self.efficiency {
            w.write_record([
                r.parameter.clone(),
                r.introduced_stage.to_string(),
                r.headline_stage.to_string(),
                opt(r.headline),
                opt(r.at_introduction),
            ])
            .expect("in-memory write");
        }
        finish(w)
    }

    pub fn metrics_table_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["stage", "method", "positive_class", "metric", "mean", "coverage"])
            .expect("in-memory write");
        for m in &self.metrics {
            for v in &m.values {
                w.write_record([
                    m.stage.to_string(),
                    m.method.clone(),
                    m.positive_class.as_str().to_string(),
                    v.metric.clone(),
                    opt(v.mean),
                    v.coverage.to_string(),
                ])
                .expect("in-memory write");
            }
        }
        finish(w)
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn finish(w: csv::Writer<Vec<u8>>) -> String {
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
}

fn baseline_name(stage: usize) -> String {
    format!("baseline_stage{stage}")
}

fn cutoff_names(stage: usize, c: &Cutoffs) -> Vec<String> {
    match c {
        Cutoffs::Band { .. } => vec![format!("L{stage}"), format!("U{stage}")],
        Cutoffs::Single { .. } => vec![format!("C{stage}")],
    }
}

struct ReplicationFit {
    stage_sizes: Vec<usize>,
    joint: Vec<f64>,
    baseline: Vec<Vec<f64>>,
    /// `[stage][method][class]`, method 0 joint, 1 baseline.
    reports: Vec<[Vec<metrics::MetricReport>; 2]>,
}

fn check_converged(r: &FitResult, what: &str) -> Result<(), String> {
    if r.converged {
        Ok(())
    } else {
        Err(format!("{what} did not converge in {} iterations", r.iterations_used))
    }
}

fn stage_reports(params: &Parameters, params_stage: usize, holdout: &StageDataset, stage: usize, k_max: usize) -> Result<Vec<metrics::MetricReport>, SimError> {
    let pairs = estimation::predict_stage_labels(params, params_stage, holdout, stage)?;
    if pairs.is_empty() {
        return Ok(Vec::new());
    }
    let (t, p): (Vec<Label>, Vec<Label>) = pairs.into_iter().unzip();
    let counts = MulticlassCounts::from_labels(&t, &p)?;
    let classes: &[Label] = if stage < k_max { &Label::ALL } else { &[Label::Sick] };
    Ok(classes
        .iter()
        .map(|&c| metrics::classification_report(&counts.one_vs_rest(c)))
        .collect())
}

fn run_replication(config: &SimConfig, fit: &FitOptions, rep: usize) -> Result<Result<ReplicationFit, String>, SimError> {
    let data = generate_cohort(config, rep as u64)?;
    let holdout = generate_holdout(config, rep as u64)?;
    let k_max = config.num_stages();

    let joint = match estimation::fit_joint(&data, fit) {
        Ok(r) => r,
        Err(FitError::DegenerateStage { stage, reason }) => return Ok(Err(format!("stage {stage}: {reason}"))),
        Err(e) => return Err(e.into()),
    };
    if let Err(m) = check_converged(&joint, "joint fit") {
        return Ok(Err(m));
    }
    let mut baseline = Vec::with_capacity(k_max);
    for stage in 1..=k_max {
        let r = match estimation::fit_single_stage(&data, stage, fit) {
            Ok(r) => r,
            Err(FitError::DegenerateStage { stage, reason }) => return Ok(Err(format!("stage {stage}: {reason}"))),
            Err(e) => return Err(e.into()),
        };
        if let Err(m) = check_converged(&r, &format!("baseline stage {stage}")) {
            return Ok(Err(m));
        }
        baseline.push(r);
    }

    let mut reports = Vec::with_capacity(k_max);
    for stage in 1..=k_max {
        reports.push([
            stage_reports(&joint.params, stage, &holdout, stage, k_max)?,
            stage_reports(&baseline[stage - 1].params, 1, &holdout, stage, k_max)?,
        ]);
    }
    Ok(Ok(ReplicationFit {
        stage_sizes: data.stage_sizes(),
        joint: joint.params.to_flat(),
        baseline: baseline.iter().map(|b| b.params.to_flat()).collect(),
        reports,
    }))
}

/// Runs every replication (in parallel on up to `jobs` threads; 0 means one
/// per core) and aggregates in replication order.
pub fn run_monte_carlo(config: &SimConfig, fit: &FitOptions, jobs: usize) -> Result<MonteCarloReport, SimError> {
    config.validate()?;
    fit.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| SimError::ThreadPool(e.to_string()))?;
    let outcomes: Vec<Result<Result<ReplicationFit, String>, SimError>> = pool.install(|| {
        (0..config.replications)
            .into_par_iter()
            .map(|rep| run_replication(config, fit, rep))
            .collect()
    });

    let mut fits = Vec::with_capacity(outcomes.len());
    let mut excluded = Vec::new();
    let mut stage_sizes = Vec::new();
    for (rep, o) in outcomes.into_iter().enumerate() {
        match o? {
            Ok(f) => {
                stage_sizes.push(ReplicationSizes {
                    replication: rep,
                    stage_sizes: f.stage_sizes.clone(),
                });
                fits.push(f);
            }
            Err(reason) => {
                log::warn!("replication {rep} excluded: {reason}");
                excluded.push(Exclusion { replication: rep, reason });
            }
        }
    }
    if excluded.len() as f64 > MAX_EXCLUDED_FRACTION * config.replications as f64 {
        return Err(SimError::TooManyExclusions {
            excluded: excluded.len(),
            total: config.replications,
        });
    }
    aggregate(config, fits, excluded, stage_sizes)
}

fn aggregate(
    config: &SimConfig,
    fits: Vec<ReplicationFit>,
    excluded: Vec<Exclusion>,
    stage_sizes: Vec<ReplicationSizes>,
) -> Result<MonteCarloReport, SimError> {
    let layout = config.layout()?;
    let truth = config.true_params()?;
    let k_max = layout.num_stages();
    let coef_names = layout.coefficient_names();
    let truth_flat = truth.to_flat();

    let mut joint_names = coef_names.clone();
    for (k, c) in truth.cutoffs().iter().enumerate() {
        joint_names.extend(cutoff_names(k + 1, c));
    }
    let summarize = |method: String, names: &[String], truth: &[f64], rows: Vec<Vec<f64>>| -> Result<EstimatorSummary, SimError> {
        let stats = estimator_statistics(&rows, truth)?;
        Ok(EstimatorSummary {
            method,
            parameters: names
                .iter()
                .zip(truth)
                .zip(stats)
                .map(|((n, &t), s)| ParameterSummary {
                    name: n.clone(),
                    truth: t,
                    stats: s,
                })
                .collect(),
        })
    };

    let mut estimators = vec![summarize(
        "joint".into(),
        &joint_names,
        &truth_flat,
        fits.iter().map(|f| f.joint.clone()).collect(),
    )?];
    for stage in 1..=k_max {
        let width = layout.cumulative_count(stage);
        let cut = truth.stage_cutoffs(stage)?;
        let mut names = coef_names[..width].to_vec();
        names.extend(cutoff_names(stage, cut));
        let mut t = truth.beta()[..width].to_vec();
        t.extend(cut.thresholds());
        estimators.push(summarize(
            baseline_name(stage),
            &names,
            &t,
            fits.iter().map(|f| f.baseline[stage - 1].clone()).collect(),
        )?);
    }

    let var_of = |method: &str, name: &str| -> Option<f64> {
        estimators
            .iter()
            .find(|e| e.method == method)
            .and_then(|e| e.get(name))
            .and_then(|p| p.stats.variance())
    };
    let joint_var = |name: &str| var_of("joint", name);
    let re = |name: &str, stage: usize| -> Option<f64> {
        match (var_of(&baseline_name(stage), name), joint_var(name)) {
            (Some(b), Some(j)) => relative_efficiency(b, j).ok(),
            _ => None,
        }
    };

    let mut efficiency = Vec::new();
    for (j, name) in coef_names.iter().enumerate() {
        let intro = (1..=k_max).find(|&k| j < layout.cumulative_count(k)).expect("coefficient within layout");
        efficiency.push(EfficiencyRow {
            parameter: name.clone(),
            introduced_stage: intro,
            headline_stage: k_max,
            headline: re(name, k_max),
            at_introduction: re(name, intro),
        });
    }
    for (k, c) in truth.cutoffs().iter().enumerate() {
        for name in cutoff_names(k + 1, c) {
            let r = re(&name, k + 1);
            efficiency.push(EfficiencyRow {
                parameter: name,
                introduced_stage: k + 1,
                headline_stage: k + 1,
                headline: r,
                at_introduction: r,
            });
        }
    }

    let mut stage_mse = Vec::new();
    for stage in 1..=k_max {
        let width = layout.cumulative_count(stage);
        let sq = |e: &EstimatorSummary| e.parameters[..width].iter().map(|p| p.stats.bias.powi(2)).sum::<f64>() / width as f64;
        stage_mse.push(StageMse {
            stage,
            coefficients: width,
            joint: sq(&estimators[0]),
            baseline: sq(&estimators[stage]),
        });
    }

    let mut metric_rows = Vec::new();
    for stage in 1..=k_max {
        let classes: &[Label] = if stage < k_max { &Label::ALL } else { &[Label::Sick] };
        for (m, method) in ["joint", "baseline"].into_iter().enumerate() {
            for (ci, &class) in classes.iter().enumerate() {
                let mut avg = MetricAverage::default();
                for f in &fits {
                    if let Some(r) = f.reports[stage - 1][m].get(ci) {
                        avg.add(r);
                    }
                }
                metric_rows.push(MetricSummary {
                    stage,
                    method: method.into(),
                    positive_class: class,
                    values: METRIC_NAMES
                        .iter()
                        .zip(avg.means())
                        .zip(avg.coverage())
                        .map(|((n, mean), coverage)| MetricMean {
                            metric: n.to_string(),
                            mean,
                            coverage,
                        })
                        .collect(),
                });
            }
        }
    }

    Ok(MonteCarloReport {
        config: config.clone(),
        replications_used: fits.len(),
        excluded,
        stage_sizes,
        estimators,
        efficiency,
        stage_mse,
        metrics: metric_rows,
    })
}
