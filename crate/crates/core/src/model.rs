//! Latent-variable model for a K-stage triage cascade.
//!
//! Every stage scores a patient with `βᵀx` over the features collected so far
//! (stage-k features are cumulative) and thresholds the latent score
//! `Y* = βᵀx + ε`, `ε ~ Logistic(0, 1)`. Stages before the last split the
//! score into three ordered bands (healthy, indeterminate, sick); the last
//! stage uses a single cut and always closes the case.
//!
//! The coefficient vector is shared: the stage-k coefficients are the first
//! `p_1 + … + p_k` entries of one vector.

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("stage {stage} expects {expected} cumulative features, got {found}")]
    DimensionMismatch {
        stage: usize,
        expected: usize,
        found: usize,
    },
    #[error("stage {stage} does not exist (model has {stages} stages)")]
    UnknownStage { stage: usize, stages: usize },
    #[error("invalid layout: {0}")]
    InvalidLayout(String),
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),
    #[error("stage {stage} cutoffs are not ordered: lower {lower} >= upper {upper}")]
    UnorderedCutoffs { stage: usize, lower: f64, upper: f64 },
}

/// Logistic CDF `F(t) = 1 / (1 + e^(-t))`.
///
/// Uses the `e^t / (1 + e^t)` branch for negative `t` so neither side
/// overflows.
#[inline]
pub fn logistic_cdf(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Logistic density `f(t) = F(t)(1 - F(t))`.
#[inline]
pub fn logistic_pdf(t: f64) -> f64 {
    // even function; evaluate on the non-positive side where e^t is small
    let e = (-t.abs()).exp();
    let d = 1.0 + e;
    e / (d * d)
}

/// `log F(t)`, stable for large `|t|`.
#[inline]
pub fn log_logistic_cdf(t: f64) -> f64 {
    if t >= 0.0 {
        -(-t).exp().ln_1p()
    } else {
        t - t.exp().ln_1p()
    }
}

/// Inverse logistic CDF (logit). `p` must lie in (0, 1).
#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Ordinal decision at one stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Healthy,
    Indeterminate,
    Sick,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Healthy, Label::Indeterminate, Label::Sick];

    pub fn value(self) -> f64 {
        match self {
            Label::Healthy => 0.0,
            Label::Indeterminate => 0.5,
            Label::Sick => 1.0,
        }
    }

    /// Position in the fixed class order (0, 0.5, 1).
    pub fn index(self) -> usize {
        match self {
            Label::Healthy => 0,
            Label::Indeterminate => 1,
            Label::Sick => 2,
        }
    }

    pub fn from_value(v: f64) -> Option<Label> {
        if v == 0.0 {
            Some(Label::Healthy)
        } else if v == 0.5 {
            Some(Label::Indeterminate)
        } else if v == 1.0 {
            Some(Label::Sick)
        } else {
            None
        }
    }

    /// Canonical text form used in files and on the wire.
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Healthy => "0",
            Label::Indeterminate => "0.5",
            Label::Sick => "1",
        }
    }

    pub fn parse(s: &str) -> Option<Label> {
        match s.trim() {
            "0" | "0.0" => Some(Label::Healthy),
            "0.5" | ".5" => Some(Label::Indeterminate),
            "1" | "1.0" => Some(Label::Sick),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for Label {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.value())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        Label::from_value(v)
            .ok_or_else(|| serde::de::Error::custom(format!("label must be 0, 0.5 or 1, got {v}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Binary,
    #[default]
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    #[serde(default)]
    pub kind: FeatureKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
}

impl FeatureSpec {
    pub fn continuous(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: FeatureKind::Continuous,
            unit: None,
        }
    }

    pub fn binary(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: FeatureKind::Binary,
            unit: None,
        }
    }

    pub fn with_unit(mut self, unit: impl Into<String>) -> Self {
        self.unit = Some(unit.into());
        self
    }
}

pub const INTERCEPT_NAME: &str = "(intercept)";

/// Stage structure: how many new features each stage adds and their names.
///
/// With `intercept_included`, a constant-1 column is prepended to the stage-1
/// design rows. The cutoffs already absorb a location shift, so a free
/// intercept is not identified by the likelihood; the flag exists for data
/// where the caller pins one cutoff or regularizes externally.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LayoutRepr", into = "LayoutRepr")]
pub struct StageLayout {
    new_feature_counts: Vec<usize>,
    features: Vec<FeatureSpec>,
    intercept_included: bool,
}

#[derive(Serialize, Deserialize)]
struct LayoutRepr {
    new_feature_counts: Vec<usize>,
    features: Vec<FeatureSpec>,
    #[serde(default)]
    intercept_included: bool,
}

impl TryFrom<LayoutRepr> for StageLayout {
    type Error = ModelError;
    fn try_from(r: LayoutRepr) -> Result<Self, ModelError> {
        let mut l = StageLayout::with_features(r.new_feature_counts, r.features)?;
        l.intercept_included = r.intercept_included;
        Ok(l)
    }
}

impl From<StageLayout> for LayoutRepr {
    fn from(l: StageLayout) -> Self {
        LayoutRepr {
            new_feature_counts: l.new_feature_counts,
            features: l.features,
            intercept_included: l.intercept_included,
        }
    }
}

impl StageLayout {
    pub fn new(new_feature_counts: Vec<usize>, feature_names: Vec<String>) -> Result<Self, ModelError> {
        let features = feature_names.into_iter().map(FeatureSpec::continuous).collect();
        Self::with_features(new_feature_counts, features)
    }

    pub fn with_features(
        new_feature_counts: Vec<usize>,
        features: Vec<FeatureSpec>,
    ) -> Result<Self, ModelError> {
        if new_feature_counts.len() < 2 {
            return Err(ModelError::InvalidLayout(format!(
                "need at least 2 stages, got {}",
                new_feature_counts.len()
            )));
        }
        if let Some(k) = new_feature_counts.iter().position(|&p| p == 0) {
            return Err(ModelError::InvalidLayout(format!("stage {} adds no features", k + 1)));
        }
        let total: usize = new_feature_counts.iter().sum();
        if features.len() != total {
            return Err(ModelError::InvalidLayout(format!(
                "{} feature names for {} features",
                features.len(),
                total
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for f in &features {
            if f.name.is_empty() || f.name == INTERCEPT_NAME || !seen.insert(f.name.as_str()) {
                return Err(ModelError::InvalidLayout(format!(
                    "feature name {:?} is empty, reserved or duplicated",
                    f.name
                )));
            }
        }
        Ok(Self {
            new_feature_counts,
            features,
            intercept_included: false,
        })
    }

    /// Layout with names `x1, x2, …`.
    pub fn generic(new_feature_counts: Vec<usize>) -> Result<Self, ModelError> {
        let total: usize = new_feature_counts.iter().sum();
        Self::new(new_feature_counts, (1..=total).map(|i| format!("x{i}")).collect())
    }

    pub fn with_intercept(mut self, on: bool) -> Self {
        self.intercept_included = on;
        self
    }

    pub fn intercept_included(&self) -> bool {
        self.intercept_included
    }

    pub fn num_stages(&self) -> usize {
        self.new_feature_counts.len()
    }

    pub fn new_feature_counts(&self) -> &[usize] {
        &self.new_feature_counts
    }

    pub fn features(&self) -> &[FeatureSpec] {
        &self.features
    }

    pub fn feature_names(&self) -> Vec<&str> {
        self.features.iter().map(|f| f.name.as_str()).collect()
    }

    /// Raw features first introduced at `stage` (1-based).
    pub fn stage_features(&self, stage: usize) -> &[FeatureSpec] {
        let start: usize = self.new_feature_counts[..stage - 1].iter().sum();
        &self.features[start..start + self.new_feature_counts[stage - 1]]
    }

    /// Raw features available at `stage` (1-based), excluding any intercept.
    pub fn cumulative_raw_count(&self, stage: usize) -> usize {
        self.new_feature_counts[..stage].iter().sum()
    }

    /// Width of the stage-k design row (coefficients used by stage k).
    pub fn cumulative_count(&self, stage: usize) -> usize {
        self.cumulative_raw_count(stage) + usize::from(self.intercept_included)
    }

    pub fn total_coefficients(&self) -> usize {
        self.cumulative_count(self.num_stages())
    }

    pub fn stage_widths(&self) -> Vec<usize> {
        (1..=self.num_stages()).map(|k| self.cumulative_count(k)).collect()
    }

    /// Coefficient names in `beta` order.
    pub fn coefficient_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.total_coefficients());
        if self.intercept_included {
            names.push(INTERCEPT_NAME.to_string());
        }
        names.extend(self.features.iter().map(|f| f.name.clone()));
        names
    }

    /// Number of categories at `stage`: 3 before the last stage, 2 at it.
    pub fn num_categories(&self, stage: usize) -> usize {
        if stage < self.num_stages() {
            3
        } else {
            2
        }
    }

    /// Free parameters of the shared-coefficient joint model.
    pub fn joint_parameter_count(&self) -> usize {
        self.total_coefficients() + 2 * (self.num_stages() - 1) + 1
    }

    /// Free parameters when every stage is fitted on its own.
    pub fn stagewise_parameter_count(&self) -> usize {
        (1..=self.num_stages())
            .map(|k| self.cumulative_count(k) + self.num_categories(k) - 1)
            .sum()
    }

    pub fn check_stage(&self, stage: usize) -> Result<(), ModelError> {
        if stage == 0 || stage > self.num_stages() {
            return Err(ModelError::UnknownStage {
                stage,
                stages: self.num_stages(),
            });
        }
        Ok(())
    }

    /// Builds the stage-k design row from per-stage raw feature blocks.
    pub fn design_row(&self, stage: usize, blocks: &[Vec<f64>]) -> Vec<f64> {
        let mut row = Vec::with_capacity(self.cumulative_count(stage));
        if self.intercept_included {
            row.push(1.0);
        }
        for b in &blocks[..stage] {
            row.extend_from_slice(b);
        }
        row
    }
}

/// Cutoffs on the latent scale for one stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cutoffs {
    /// `Y* < lower` → 0, `lower ≤ Y* < upper` → 0.5, `Y* ≥ upper` → 1.
    Band { lower: f64, upper: f64 },
    /// `Y* < cut` → 0, `Y* ≥ cut` → 1.
    Single { cut: f64 },
}

impl Cutoffs {
    pub fn num_categories(&self) -> usize {
        match self {
            Cutoffs::Band { .. } => 3,
            Cutoffs::Single { .. } => 2,
        }
    }

    pub fn num_params(&self) -> usize {
        self.num_categories() - 1
    }

    /// Interior thresholds θ_1 < … < θ_{J-1}.
    pub fn thresholds(&self) -> Vec<f64> {
        match *self {
            Cutoffs::Band { lower, upper } => vec![lower, upper],
            Cutoffs::Single { cut } => vec![cut],
        }
    }

    pub fn classify(&self, y_star: f64) -> Label {
        match *self {
            Cutoffs::Band { lower, upper } => {
                if y_star < lower {
                    Label::Healthy
                } else if y_star < upper {
                    Label::Indeterminate
                } else {
                    Label::Sick
                }
            }
            Cutoffs::Single { cut } => {
                if y_star < cut {
                    Label::Healthy
                } else {
                    Label::Sick
                }
            }
        }
    }

    /// Labels this stage can emit, in class order.
    pub fn labels(&self) -> &'static [Label] {
        match self {
            Cutoffs::Band { .. } => &Label::ALL,
            Cutoffs::Single { .. } => &[Label::Healthy, Label::Sick],
        }
    }

    /// Map a label onto its category index (0-based) for this stage.
    pub fn category_of(&self, label: Label) -> Option<usize> {
        match (self, label) {
            (Cutoffs::Single { .. }, Label::Indeterminate) => None,
            (Cutoffs::Single { .. }, Label::Sick) => Some(1),
            (_, l) => Some(l.index()),
        }
    }
}

/// Shared coefficients plus per-stage cutoffs.
///
/// `widths[k]` is how many leading entries of `beta` stage `k + 1` uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ParamsRepr", into = "ParamsRepr")]
pub struct Parameters {
    beta: Vec<f64>,
    widths: Vec<usize>,
    cutoffs: Vec<Cutoffs>,
}

#[derive(Serialize, Deserialize)]
struct ParamsRepr {
    beta: Vec<f64>,
    stage_widths: Vec<usize>,
    cutoffs: Vec<Cutoffs>,
}

impl TryFrom<ParamsRepr> for Parameters {
    type Error = ModelError;
    fn try_from(r: ParamsRepr) -> Result<Self, ModelError> {
        Parameters::new(r.beta, r.stage_widths, r.cutoffs)
    }
}

impl From<Parameters> for ParamsRepr {
    fn from(p: Parameters) -> Self {
        ParamsRepr {
            beta: p.beta,
            stage_widths: p.widths,
            cutoffs: p.cutoffs,
        }
    }
}

impl Parameters {
    pub fn new(beta: Vec<f64>, widths: Vec<usize>, cutoffs: Vec<Cutoffs>) -> Result<Self, ModelError> {
        if widths.is_empty() || widths.len() != cutoffs.len() {
            return Err(ModelError::InvalidParameters(format!(
                "{} stage widths for {} cutoff sets",
                widths.len(),
                cutoffs.len()
            )));
        }
        if widths[0] == 0 || widths.windows(2).any(|w| w[1] <= w[0]) {
            return Err(ModelError::InvalidParameters(
                "stage widths must be positive and strictly increasing".into(),
            ));
        }
        if *widths.last().unwrap() != beta.len() {
            return Err(ModelError::InvalidParameters(format!(
                "beta has {} entries, last stage uses {}",
                beta.len(),
                widths.last().unwrap()
            )));
        }
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(ModelError::InvalidParameters("non-finite coefficient".into()));
        }
        for (i, c) in cutoffs.iter().enumerate() {
            match *c {
                Cutoffs::Band { lower, upper } => {
                    if !lower.is_finite() || !upper.is_finite() {
                        return Err(ModelError::InvalidParameters("non-finite cutoff".into()));
                    }
                    if lower >= upper {
                        return Err(ModelError::UnorderedCutoffs {
                            stage: i + 1,
                            lower,
                            upper,
                        });
                    }
                }
                Cutoffs::Single { cut } => {
                    if !cut.is_finite() {
                        return Err(ModelError::InvalidParameters("non-finite cutoff".into()));
                    }
                }
            }
        }
        Ok(Self {
            beta,
            widths,
            cutoffs,
        })
    }

    /// Joint-model parameters for `layout`: bands for stages `1..K`, a single
    /// cut at stage K.
    pub fn for_layout(
        layout: &StageLayout,
        beta: Vec<f64>,
        bands: &[(f64, f64)],
        final_cut: f64,
    ) -> Result<Self, ModelError> {
        if bands.len() + 1 != layout.num_stages() {
            return Err(ModelError::InvalidParameters(format!(
                "{} bands for a {}-stage layout",
                bands.len(),
                layout.num_stages()
            )));
        }
        let mut cutoffs: Vec<Cutoffs> = bands
            .iter()
            .map(|&(lower, upper)| Cutoffs::Band { lower, upper })
            .collect();
        cutoffs.push(Cutoffs::Single { cut: final_cut });
        Self::new(beta, layout.stage_widths(), cutoffs)
    }

    /// A one-stage model (used by the stagewise baseline).
    pub fn single_stage(beta: Vec<f64>, cutoffs: Cutoffs) -> Result<Self, ModelError> {
        let w = beta.len();
        Self::new(beta, vec![w], vec![cutoffs])
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn num_stages(&self) -> usize {
        self.widths.len()
    }

    pub fn stage_widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn cutoffs(&self) -> &[Cutoffs] {
        &self.cutoffs
    }

    pub fn stage_cutoffs(&self, stage: usize) -> Result<&Cutoffs, ModelError> {
        self.check_stage(stage)?;
        Ok(&self.cutoffs[stage - 1])
    }

    /// Coefficients used at `stage` (a prefix of the shared vector).
    pub fn stage_beta(&self, stage: usize) -> Result<&[f64], ModelError> {
        self.check_stage(stage)?;
        Ok(&self.beta[..self.widths[stage - 1]])
    }

    pub fn num_free(&self) -> usize {
        self.beta.len() + self.cutoffs.iter().map(Cutoffs::num_params).sum::<usize>()
    }

    /// Flat view `[beta…, thresholds…]` in stage order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.beta.clone();
        for c in &self.cutoffs {
            v.extend(c.thresholds());
        }
        v
    }

    /// Inverse of [`to_flat`](Self::to_flat) keeping this parameter shape.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self, ModelError> {
        if flat.len() != self.num_free() {
            return Err(ModelError::InvalidParameters(format!(
                "flat vector has {} entries, expected {}",
                flat.len(),
                self.num_free()
            )));
        }
        let nb = self.beta.len();
        let mut at = nb;
        let cutoffs = self
            .cutoffs
            .iter()
            .map(|c| match c {
                Cutoffs::Band { .. } => {
                    at += 2;
                    Cutoffs::Band {
                        lower: flat[at - 2],
                        upper: flat[at - 1],
                    }
                }
                Cutoffs::Single { .. } => {
                    at += 1;
                    Cutoffs::Single { cut: flat[at - 1] }
                }
            })
            .collect();
        Self::new(flat[..nb].to_vec(), self.widths.clone(), cutoffs)
    }

    fn check_stage(&self, stage: usize) -> Result<(), ModelError> {
        if stage == 0 || stage > self.widths.len() {
            return Err(ModelError::UnknownStage {
                stage,
                stages: self.widths.len(),
            });
        }
        Ok(())
    }

    /// Every stage's coefficients must be a prefix of the next stage's.
    /// Holds structurally because all stages slice one vector.
    pub fn prefixes_nested(&self) -> bool {
        self.widths.windows(2).all(|w| {
            self.beta[..w[0]] == self.beta[..w[1]][..w[0]]
        })
    }
}

/// `β^(k)ᵀx` for a cumulative stage-k feature vector.
pub fn linear_predictor(params: &Parameters, stage: usize, x: &[f64]) -> Result<f64, ModelError> {
    let beta = params.stage_beta(stage)?;
    if beta.len() != x.len() {
        return Err(ModelError::DimensionMismatch {
            stage,
            expected: beta.len(),
            found: x.len(),
        });
    }
    Ok(dot(beta, x))
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Category probabilities at a given linear predictor `eta`.
///
/// `P(Y = j) = F(θ_j − η) − F(θ_{j−1} − η)` with θ_0 = −∞, θ_J = +∞; the
/// infinite ends are never evaluated.
pub fn probabilities_at(cutoffs: &Cutoffs, eta: f64) -> Vec<f64> {
    match *cutoffs {
        Cutoffs::Band { lower, upper } => {
            let p0 = logistic_cdf(lower - eta);
            let p2 = logistic_cdf(eta - upper);
            // middle band via the factored difference to avoid cancellation
            let p1 = band_probability(upper - eta, lower - eta);
            vec![p0, p1, p2]
        }
        Cutoffs::Single { cut } => vec![logistic_cdf(cut - eta), logistic_cdf(eta - cut)],
    }
}

/// `F(a) − F(b)` for `a > b`, computed as `F(a)·F(−b)·(1 − e^{−(a−b)})`.
#[inline]
pub(crate) fn band_probability(a: f64, b: f64) -> f64 {
    let d = a - b;
    if d <= 0.0 {
        return 0.0;
    }
    logistic_cdf(a) * logistic_cdf(-b) * -(-d).exp_m1()
}

/// Probability vector ordered (0, 0.5, 1) for banded stages, (0, 1) for the
/// final cut.
pub fn category_probabilities(params: &Parameters, stage: usize, x: &[f64]) -> Result<Vec<f64>, ModelError> {
    let eta = linear_predictor(params, stage, x)?;
    Ok(probabilities_at(params.stage_cutoffs(stage)?, eta))
}

/// Threshold a latent value with the stage's cutoffs (lower-closed bands).
pub fn classify_latent(y_star: f64, stage: usize, params: &Parameters) -> Result<Label, ModelError> {
    Ok(params.stage_cutoffs(stage)?.classify(y_star))
}
