//! Joint log-likelihood over all stages and its analytic gradient.
//!
//! Records are bucketed once into groups `G_{k,j}` (stage `k`, label `j`) so
//! the likelihood is a plain sum over groups. Stage-k coefficient gradients
//! are computed on the stage's own prefix of `beta` and summed into the
//! shared vector front-aligned, i.e. zero-padded at the tail.
//!
//! Each term is `log[F(a) − F(b)]` with `a = θ_j − η`, `b = θ_{j−1} − η`.
//! The difference is factored as `F(a)·F(−b)·(1 − e^{−(a−b)})` so it never
//! subtracts two nearly equal CDF values, and the infinite outer thresholds
//! are handled by dropping the corresponding factor.
//!
//! Gradients are checked against central differences. The printed two-stage
//! gradient for the final-stage healthy group (`+x·f/F`) has the wrong sign;
//! differentiating `log F(C − βᵀx)` gives `−x·f/F`, which is what this module
//! computes.

use crate::cohort::{CohortError, StageDataset};
use crate::model::{log_logistic_cdf, logistic_cdf, Label, ModelError, Parameters};
use thiserror::Error;

/// Category probabilities are floored at this value before taking logs.
pub const PROB_FLOOR: f64 = 1e-300;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LikelihoodError {
    #[error("parameters do not match the partition: {0}")]
    Incompatible(String),
    #[error("finite-difference step must lie in (0, 1e-3], got {0}")]
    BadStep(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Records of one stage view bucketed by label, with their design rows.
#[derive(Debug, Clone, PartialEq)]
pub struct StageBlock {
    stage: usize,
    width: usize,
    categories: usize,
    /// Row-major `rows × width`.
    design: Vec<f64>,
    /// Dataset index of each row.
    records: Vec<usize>,
    /// `groups[j]` lists row positions whose category index is `j`.
    groups: Vec<Vec<usize>>,
}

impl StageBlock {
    fn build(data: &StageDataset, stage: usize, categories: usize) -> Self {
        let width = data.layout().cumulative_count(stage);
        let (records, design) = data.design_matrix(stage);
        let mut groups = vec![Vec::new(); categories];
        for (row, &i) in records.iter().enumerate() {
            // labels were validated before the block is built
            let label = data.records()[i].label(stage).expect("validated label");
            groups[category_index(categories, label)].push(row);
        }
        Self {
            stage,
            width,
            categories,
            design,
            records,
            groups,
        }
    }

    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_categories(&self) -> usize {
        self.categories
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.design[r * self.width..(r + 1) * self.width]
    }

    /// Dataset indices of the records in group `label`.
    pub fn group_records(&self, label: Label) -> Vec<usize> {
        if self.categories == 2 && label == Label::Indeterminate {
            return Vec::new();
        }
        self.groups[category_index(self.categories, label)]
            .iter()
            .map(|&r| self.records[r])
            .collect()
    }

    /// Row indices grouped by category (category order).
    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn record_index(&self, row: usize) -> usize {
        self.records[row]
    }
}

fn category_index(categories: usize, label: Label) -> usize {
    match (categories, label) {
        (2, Label::Sick) => 1,
        (_, l) => l.index(),
    }
}

/// All stage blocks of a training set (or a single stage for the baseline).
#[derive(Debug, Clone, PartialEq)]
pub struct GroupPartition {
    blocks: Vec<StageBlock>,
}

impl GroupPartition {
    pub fn blocks(&self) -> &[StageBlock] {
        &self.blocks
    }

    /// Block for `stage` (1-based) in a joint partition.
    pub fn stage(&self, stage: usize) -> &StageBlock {
        &self.blocks[stage - 1]
    }

    /// Partition holding only the stage-`stage` view, as a one-stage problem.
    pub fn single_stage(data: &StageDataset, stage: usize) -> Result<Self, CohortError> {
        data.validate_training()?;
        data.layout().check_stage(stage)?;
        let categories = data.layout().num_categories(stage);
        Ok(Self {
            blocks: vec![StageBlock::build(data, stage, categories)],
        })
    }

    /// Stage widths this partition expects `Parameters` to carry.
    pub fn stage_widths(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.width).collect()
    }

    pub fn total_records(&self) -> usize {
        self.blocks.iter().map(StageBlock::len).sum()
    }

    fn check(&self, params: &Parameters) -> Result<(), LikelihoodError> {
        if params.stage_widths() != self.stage_widths().as_slice() {
            return Err(LikelihoodError::Incompatible(format!(
                "parameter stage widths {:?} vs data {:?}",
                params.stage_widths(),
                self.stage_widths()
            )));
        }
        for (b, c) in self.blocks.iter().zip(params.cutoffs()) {
            if c.num_categories() != b.categories {
                return Err(LikelihoodError::Incompatible(format!(
                    "stage {} has {} categories, cutoffs give {}",
                    b.stage,
                    b.categories,
                    c.num_categories()
                )));
            }
        }
        Ok(())
    }
}

/// Buckets every stage view by label. Fails on records that break the
/// nesting rule (stage k+1 data present iff the stage-k label is 0.5).
pub fn group_partition(data: &StageDataset) -> Result<GroupPartition, CohortError> {
    data.validate_training()?;
    let layout = data.layout();
    let blocks = (1..=layout.num_stages())
        .map(|k| StageBlock::build(data, k, layout.num_categories(k)))
        .collect();
    Ok(GroupPartition { blocks })
}

/// Partial derivatives aligned with [`Parameters`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    pub d_beta: Vec<f64>,
    /// Per stage, one entry per interior threshold (lower, upper or cut).
    pub d_thresholds: Vec<Vec<f64>>,
}

impl GradientVector {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.d_beta.clone();
        for t in &self.d_thresholds {
            v.extend_from_slice(t);
        }
        v
    }

    fn from_flat(flat: &[f64], like: &Parameters) -> Self {
        let nb = like.beta().len();
        let mut at = nb;
        let d_thresholds = like
            .cutoffs()
            .iter()
            .map(|c| {
                let n = c.num_params();
                at += n;
                flat[at - n..at].to_vec()
            })
            .collect();
        Self {
            d_beta: flat[..nb].to_vec(),
            d_thresholds,
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.to_flat().iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// Log-probability of one observation and its partials with respect to the
/// upper (`a`) and lower (`b`) CDF arguments. `None` marks an infinite edge.
#[inline]
fn term(a: Option<f64>, b: Option<f64>) -> (f64, f64, f64) {
    let log_floor = PROB_FLOOR.ln();
    let (lp, ga, gb) = match (a, b) {
        (Some(a), Some(b)) => {
            let d = a - b;
            if d <= 0.0 {
                return (log_floor, 0.0, 0.0);
            }
            let gap = -(-d).exp_m1();
            let lp = log_logistic_cdf(a) + log_logistic_cdf(-b) + gap.ln();
            let ga = logistic_cdf(-a) / (logistic_cdf(-b) * gap);
            let gb = -logistic_cdf(b) / (logistic_cdf(a) * gap);
            (lp, ga, gb)
        }
        (Some(a), None) => (log_logistic_cdf(a), logistic_cdf(-a), 0.0),
        (None, Some(b)) => (log_logistic_cdf(-b), 0.0, -logistic_cdf(b)),
        (None, None) => (0.0, 0.0, 0.0),
    };
    if lp < log_floor || !lp.is_finite() {
        // floored region is flat
        (log_floor, 0.0, 0.0)
    } else {
        (lp, ga, gb)
    }
}

/// Log-likelihood of one block; optionally accumulates gradients into
/// `d_beta` (block width) and `d_thr` (interior thresholds).
pub(crate) fn block_log_likelihood(
    block: &StageBlock,
    beta: &[f64],
    thresholds: &[f64],
    mut grad: Option<(&mut [f64], &mut [f64])>,
) -> f64 {
    debug_assert_eq!(beta.len(), block.width);
    debug_assert_eq!(thresholds.len(), block.categories - 1);
    let top = block.categories - 1;
    let mut total = 0.0;
    for (j, rows) in block.groups.iter().enumerate() {
        for &r in rows {
            let x = block.row(r);
            let eta = crate::model::dot(beta, x);
            let a = (j < top).then(|| thresholds[j] - eta);
            let b = (j > 0).then(|| thresholds[j - 1] - eta);
            let (lp, ga, gb) = term(a, b);
            total += lp;
            if let Some((d_beta, d_thr)) = grad.as_mut() {
                let d_eta = -(ga + gb);
                for (g, xi) in d_beta.iter_mut().zip(x) {
                    *g += d_eta * xi;
                }
                if j < top {
                    d_thr[j] += ga;
                }
                if j > 0 {
                    d_thr[j - 1] += gb;
                }
            }
        }
    }
    total
}

/// Evaluates `ℓ` (and optionally `∇ℓ`) at a flat `[beta…, thresholds…]`
/// vector laid out like `params`. No ordering checks: unordered bands simply
/// hit the probability floor.
pub(crate) fn eval_flat(part: &GroupPartition, flat: &[f64], grad: Option<&mut [f64]>) -> f64 {
    let nb = part.blocks.last().map_or(0, |b| b.width);
    let (beta, thr_all) = flat.split_at(nb);
    let mut total = 0.0;
    match grad {
        None => {
            let mut at = 0;
            for b in &part.blocks {
                let n = b.categories - 1;
                total += block_log_likelihood(b, &beta[..b.width], &thr_all[at..at + n], None);
                at += n;
            }
        }
        Some(g) => {
            g.iter_mut().for_each(|v| *v = 0.0);
            let (g_beta, g_thr) = g.split_at_mut(nb);
            let mut at = 0;
            for b in &part.blocks {
                let n = b.categories - 1;
                // stage gradient lands on the front `width` entries; the tail
                // stays zero-padded
                total += block_log_likelihood(
                    b,
                    &beta[..b.width],
                    &thr_all[at..at + n],
                    Some((&mut g_beta[..b.width], &mut g_thr[at..at + n])),
                );
                at += n;
            }
        }
    }
    total
}

/// `Σ_k Σ_i Σ_j I(y_i^(k) = j) · log P(Y = j | x_i^(k))`.
pub fn joint_log_likelihood(params: &Parameters, part: &GroupPartition) -> Result<f64, LikelihoodError> {
    part.check(params)?;
    Ok(eval_flat(part, &params.to_flat(), None))
}

/// Analytic gradient of [`joint_log_likelihood`].
pub fn analytic_gradient(params: &Parameters, part: &GroupPartition) -> Result<GradientVector, LikelihoodError> {
    part.check(params)?;
    let flat = params.to_flat();
    let mut g = vec![0.0; flat.len()];
    eval_flat(part, &flat, Some(&mut g));
    Ok(GradientVector::from_flat(&g, params))
}

/// Central-difference approximation of every partial of the log-likelihood.
pub fn finite_difference_gradient(
    params: &Parameters,
    part: &GroupPartition,
    h: f64,
) -> Result<GradientVector, LikelihoodError> {
    if !(h > 0.0 && h <= 1e-3) {
        return Err(LikelihoodError::BadStep(h));
    }
    part.check(params)?;
    let mut flat = params.to_flat();
    let mut g = vec![0.0; flat.len()];
    for i in 0..flat.len() {
        let orig = flat[i];
        flat[i] = orig + h;
        let up = eval_flat(part, &flat, None);
        flat[i] = orig - h;
        let down = eval_flat(part, &flat, None);
        flat[i] = orig;
        g[i] = (up - down) / (2.0 * h);
    }
    Ok(GradientVector::from_flat(&g, params))
}

/// Number of free parameters a partition's joint model carries.
pub fn free_parameter_count(part: &GroupPartition) -> usize {
    part.blocks.last().map_or(0, |b| b.width) + part.blocks.iter().map(|b| b.categories - 1).sum::<usize>()
}
