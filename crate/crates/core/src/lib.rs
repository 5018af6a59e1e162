//! Multistage sequential triage with a shared-coefficient ordinal-logistic
//! cascade.
//!
//! Stage k scores a patient from the features gathered through stage k and
//! either closes the case (healthy / sick) or asks for the next stage's
//! features. All stages are fitted jointly by maximum likelihood with one
//! coefficient vector; [`estimation::fit_baseline_stagewise`] fits the
//! independent per-stage alternative for comparison.

pub mod cohort;
pub mod dataio;
pub mod estimation;
pub mod likelihood;
pub mod metrics;
pub mod model;
pub mod optimize;
pub mod simgen;
pub mod triage;

pub use cohort::{CohortError, PatientRecord, StageDataset};
pub use estimation::{fit_baseline_stagewise, fit_joint, FitError, FitOptions, FitResult};
pub use likelihood::{analytic_gradient, group_partition, joint_log_likelihood, GroupPartition};
pub use model::{Cutoffs, Label, ModelError, Parameters, StageLayout};
