//! Nested per-stage patient records.

use crate::model::{Label, ModelError, StageLayout};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CohortError {
    #[error("record {id}: {message}")]
    Shape { id: String, message: String },
    #[error(
        "record {id}: stage {stage} label is {label} but the record {} stage {} data",
        if *has_next { "has" } else { "lacks" },
        stage + 1
    )]
    Nesting {
        id: String,
        stage: usize,
        label: Label,
        has_next: bool,
    },
    #[error("record {id}: missing label at stage {stage}")]
    MissingLabel { id: String, stage: usize },
    #[error("duplicate record id {0}")]
    DuplicateId(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One patient: raw feature blocks and labels for every stage reached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: String,
    /// `features[k]` holds the new features of stage `k + 1`.
    pub features: Vec<Vec<f64>>,
    /// Same length as `features`; `None` for unlabeled (prediction) records.
    pub labels: Vec<Option<Label>>,
}

impl PatientRecord {
    pub fn new(id: impl Into<String>, features: Vec<Vec<f64>>, labels: Vec<Option<Label>>) -> Self {
        Self {
            id: id.into(),
            features,
            labels,
        }
    }

    pub fn deepest_stage(&self) -> usize {
        self.features.len()
    }

    pub fn label(&self, stage: usize) -> Option<Label> {
        self.labels.get(stage - 1).copied().flatten()
    }
}

/// Records plus the layout that gives their blocks meaning.
#[derive(Debug, Clone, PartialEq)]
pub struct StageDataset {
    layout: StageLayout,
    records: Vec<PatientRecord>,
}

impl StageDataset {
    /// Checks block shapes and label domains; nesting is checked by
    /// [`validate_training`](Self::validate_training).
    pub fn new(layout: StageLayout, records: Vec<PatientRecord>) -> Result<Self, CohortError> {
        let k_max = layout.num_stages();
        let mut ids = std::collections::HashSet::with_capacity(records.len());
        for r in &records {
            if !ids.insert(r.id.as_str()) {
                return Err(CohortError::DuplicateId(r.id.clone()));
            }
            let shape = |message: String| CohortError::Shape {
                id: r.id.clone(),
                message,
            };
            let d = r.deepest_stage();
            if d == 0 || d > k_max {
                return Err(shape(format!("reaches stage {d}, layout has {k_max}")));
            }
            if r.labels.len() != d {
                return Err(shape(format!("{} label slots for {} stages", r.labels.len(), d)));
            }
            for (k, block) in r.features.iter().enumerate() {
                let want = layout.new_feature_counts()[k];
                if block.len() != want {
                    return Err(shape(format!(
                        "stage {} block has {} values, expected {}",
                        k + 1,
                        block.len(),
                        want
                    )));
                }
                if block.iter().any(|v| !v.is_finite()) {
                    return Err(shape(format!("non-finite feature at stage {}", k + 1)));
                }
            }
            if r.label(k_max) == Some(Label::Indeterminate) {
                return Err(shape(format!("final stage {k_max} label must be 0 or 1")));
            }
        }
        Ok(Self { layout, records })
    }

    pub fn layout(&self) -> &StageLayout {
        &self.layout
    }

    pub fn records(&self) -> &[PatientRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<PatientRecord> {
        self.records
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Enforces the training-data rule: every reached stage is labeled and
    /// the stage-k label is 0.5 exactly when stage k+1 data exists.
    pub fn validate_training(&self) -> Result<(), CohortError> {
        let k_max = self.layout.num_stages();
        for r in &self.records {
            for stage in 1..=r.deepest_stage() {
                let label = r.label(stage).ok_or_else(|| CohortError::MissingLabel {
                    id: r.id.clone(),
                    stage,
                })?;
                if stage == k_max {
                    continue;
                }
                let has_next = r.deepest_stage() > stage;
                if has_next != (label == Label::Indeterminate) {
                    return Err(CohortError::Nesting {
                        id: r.id.clone(),
                        stage,
                        label,
                        has_next,
                    });
                }
            }
        }
        Ok(())
    }

    /// Indices of records reaching `stage`.
    pub fn stage_view(&self, stage: usize) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.deepest_stage() >= stage)
            .map(|(i, _)| i)
            .collect()
    }

    /// `N_k` for every stage.
    pub fn stage_sizes(&self) -> Vec<usize> {
        (1..=self.layout.num_stages())
            .map(|k| self.records.iter().filter(|r| r.deepest_stage() >= k).count())
            .collect()
    }

    /// Cumulative design row of record `i` at `stage`.
    pub fn design_row(&self, i: usize, stage: usize) -> Vec<f64> {
        self.layout.design_row(stage, &self.records[i].features)
    }

    /// Row-major cumulative design matrix of the stage view.
    pub fn design_matrix(&self, stage: usize) -> (Vec<usize>, Vec<f64>) {
        let view = self.stage_view(stage);
        let mut m = Vec::with_capacity(view.len() * self.layout.cumulative_count(stage));
        for &i in &view {
            m.extend(self.design_row(i, stage));
        }
        (view, m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> StageLayout {
        StageLayout::generic(vec![1, 1]).unwrap()
    }

    fn rec(id: &str, blocks: &[f64], labels: &[f64]) -> PatientRecord {
        PatientRecord::new(
            id,
            blocks.iter().map(|&v| vec![v]).collect(),
            labels.iter().map(|&l| Label::from_value(l)).collect(),
        )
    }

    #[test]
    fn views_nest() {
        let d = StageDataset::new(
            layout(),
            vec![
                rec("a", &[0.1], &[0.0]),
                rec("b", &[0.2, 1.0], &[0.5, 0.0]),
                rec("c", &[0.3], &[1.0]),
                rec("d", &[0.4, 2.0], &[0.5, 1.0]),
            ],
        )
        .unwrap();
        d.validate_training().unwrap();
        assert_eq!(d.stage_sizes(), vec![4, 2]);
        assert_eq!(d.stage_view(2), vec![1, 3]);
        let (_, m) = d.design_matrix(2);
        assert_eq!(m, vec![0.2, 1.0, 0.4, 2.0]);
    }

    #[test]
    fn nesting_rule_enforced() {
        let d = StageDataset::new(layout(), vec![rec("x", &[0.1, 1.0], &[1.0, 1.0])]).unwrap();
        let err = d.validate_training().unwrap_err();
        assert!(matches!(err, CohortError::Nesting { stage: 1, has_next: true, .. }));
        assert!(err.to_string().contains("x"));

        let d = StageDataset::new(layout(), vec![rec("y", &[0.1], &[0.5])]).unwrap();
        assert!(matches!(
            d.validate_training(),
            Err(CohortError::Nesting { has_next: false, .. })
        ));
    }

    #[test]
    fn shape_errors() {
        assert!(StageDataset::new(layout(), vec![rec("x", &[0.1, 1.0], &[0.5, 0.5])]).is_err());
        let bad = PatientRecord::new("z", vec![vec![1.0, 2.0]], vec![None]);
        assert!(StageDataset::new(layout(), vec![bad]).is_err());
        assert!(matches!(
            StageDataset::new(layout(), vec![rec("a", &[0.1], &[0.0]), rec("a", &[0.2], &[1.0])]),
            Err(CohortError::DuplicateId(_))
        ));
        let unlabeled = PatientRecord::new("u", vec![vec![1.0]], vec![None]);
        let d = StageDataset::new(layout(), vec![unlabeled]).unwrap();
        assert!(matches!(d.validate_training(), Err(CohortError::MissingLabel { .. })));
    }
}
