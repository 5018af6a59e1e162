//! One-patient-at-a-time sequential triage over a fitted joint model.
//!
//! At stage k the patient's probability is `π = F(βᵀx)` on the cumulative
//! features, compared with the probability cutoffs `F(L*)`, `F(U*)` (or
//! `F(C*)` at the last stage). Since `F` is increasing this is the same
//! verdict as thresholding `βᵀx` on the latent scale, and it is the verdict
//! [`decide`] returns to every caller.
//!
//! Sessions live in memory. Each session is guarded by its own lock, so
//! different patients never contend.

use crate::dataio::{write_atomic, DataError, ModelDocument};
use crate::model::{self, logistic_cdf, FeatureSpec, Label, ModelError};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TriageError {
    #[error("unknown model {0:?}")]
    UnknownModel(String),
    #[error("unknown session {0:?}")]
    UnknownSession(String),
    #[error("session is awaiting stage {expected}, not stage {got}")]
    OutOfOrder { expected: usize, got: usize },
    #[error("session is closed ({0})")]
    Closed(SessionStatus),
    #[error("request token {token:?} was already used for stage {stage}")]
    TokenReused { token: String, stage: usize },
    #[error("{0}")]
    Validation(String),
    #[error("model cannot serve triage: {0}")]
    Model(String),
}

impl From<ModelError> for TriageError {
    fn from(e: ModelError) -> Self {
        TriageError::Validation(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SessionStatus {
    AwaitingStage(usize),
    ClosedHealthy,
    ClosedSick,
}

impl std::fmt::Display for SessionStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SessionStatus::AwaitingStage(k) => write!(f, "awaiting_stage_{k}"),
            SessionStatus::ClosedHealthy => f.write_str("closed_healthy"),
            SessionStatus::ClosedSick => f.write_str("closed_sick"),
        }
    }
}

impl std::str::FromStr for SessionStatus {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "closed_healthy" => Ok(SessionStatus::ClosedHealthy),
            "closed_sick" => Ok(SessionStatus::ClosedSick),
            _ => s
                .strip_prefix("awaiting_stage_")
                .and_then(|k| k.parse().ok())
                .filter(|&k| k >= 1)
                .map(SessionStatus::AwaitingStage)
                .ok_or_else(|| format!("unknown status {s:?}")),
        }
    }
}

impl Serialize for SessionStatus {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SessionStatus {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    StopHealthy,
    StopSick,
    Advance,
}

impl Action {
    pub fn as_str(self) -> &'static str {
        match self {
            Action::StopHealthy => "stop_healthy",
            Action::StopSick => "stop_sick",
            Action::Advance => "advance",
        }
    }
}

/// Verdict for one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub stage: usize,
    pub pi: f64,
    pub label: Label,
    pub action: Action,
    /// `F(L*), F(U*)` before the last stage, `F(C*)` at it.
    pub probability_cutoffs: Vec<f64>,
    /// Category probabilities under the logistic noise model, lowest first.
    pub category_probabilities: Vec<f64>,
}

/// Scores `stage` from raw per-stage feature blocks (`blocks[..stage]`).
pub fn decide(doc: &ModelDocument, stage: usize, blocks: &[Vec<f64>]) -> Result<Decision, TriageError> {
    let layout = &doc.layout;
    layout.check_stage(stage)?;
    if blocks.len() < stage {
        return Err(TriageError::Validation(format!("stage {stage} needs {stage} feature blocks, got {}", blocks.len())));
    }
    for (k, b) in blocks[..stage].iter().enumerate() {
        let want = layout.new_feature_counts()[k];
        if b.len() != want {
            return Err(TriageError::Validation(format!("stage {} block has {} values, expected {want}", k + 1, b.len())));
        }
        if b.iter().any(|v| !v.is_finite()) {
            return Err(TriageError::Validation(format!("non-finite feature at stage {}", k + 1)));
        }
    }
    let (params, internal) = doc.stage_params(stage)?;
    let x = doc.design_row(stage, blocks);
    let eta = model::linear_predictor(params, internal, &x)?;
    let cuts = params.stage_cutoffs(internal)?;
    let label = cuts.classify(eta);
    let action = match label {
        Label::Healthy => Action::StopHealthy,
        Label::Sick => Action::StopSick,
        Label::Indeterminate => Action::Advance,
    };
    Ok(Decision {
        stage,
        pi: logistic_cdf(eta),
        label,
        action,
        probability_cutoffs: cuts.thresholds().iter().map(|&t| logistic_cdf(t)).collect(),
        category_probabilities: model::probabilities_at(cuts, eta),
    })
}

/// Orders a name → value map into the stage's feature block.
pub fn stage_block(features: &[FeatureSpec], values: &BTreeMap<String, f64>) -> Result<Vec<f64>, TriageError> {
    let missing: Vec<&str> = features
        .iter()
        .map(|f| f.name.as_str())
        .filter(|n| !values.contains_key(*n))
        .collect();
    let extra: Vec<&str> = values
        .keys()
        .map(String::as_str)
        .filter(|k| !features.iter().any(|f| f.name == *k))
        .collect();
    if !missing.is_empty() || !extra.is_empty() {
        let mut parts = Vec::new();
        if !missing.is_empty() {
            parts.push(format!("missing features: {}", missing.join(", ")));
        }
        if !extra.is_empty() {
            parts.push(format!("unexpected features: {}", extra.join(", ")));
        }
        return Err(TriageError::Validation(parts.join("; ")));
    }
    features
        .iter()
        .map(|f| {
            let v = values[&f.name];
            if v.is_finite() {
                Ok(v)
            } else {
                Err(TriageError::Validation(format!("feature {} is not finite", f.name)))
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageInputs {
    pub stage: usize,
    pub features: Vec<FeatureSpec>,
    /// Probability-scale cutoffs of the fitted model.
    pub probability_cutoffs: Vec<f64>,
    /// Latent-scale cutoffs of the fitted model.
    pub latent_cutoffs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDescription {
    pub model_id: String,
    pub num_stages: usize,
    pub feature_names: Vec<String>,
    pub stages: Vec<StageInputs>,
    pub standardized: bool,
}

pub fn describe(doc: &ModelDocument, model_id: &str) -> Result<ModelDescription, TriageError> {
    if !doc.is_joint() {
        return Err(TriageError::Model("triage needs a joint model covering every stage".into()));
    }
    let stages = (1..=doc.layout.num_stages())
        .map(|k| {
            let cuts = doc.params.stage_cutoffs(k)?.thresholds();
            Ok(StageInputs {
                stage: k,
                features: doc.layout.stage_features(k).to_vec(),
                probability_cutoffs: cuts.iter().map(|&t| logistic_cdf(t)).collect(),
                latent_cutoffs: cuts,
            })
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    Ok(ModelDescription {
        model_id: model_id.into(),
        num_stages: doc.layout.num_stages(),
        feature_names: doc.layout.feature_names().iter().map(|s| s.to_string()).collect(),
        stages,
        standardized: doc.standardization.is_some(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AuditKind {
    Created,
    Submitted { stage: usize, request_token: Option<String> },
    Decided { stage: usize, label: Label, action: Action },
    Replayed { stage: usize, request_token: String },
    Rejected { stage: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEvent {
    /// Milliseconds since the Unix epoch.
    pub at_ms: u64,
    #[serde(flatten)]
    pub kind: AuditKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    pub features: BTreeMap<String, f64>,
    pub decision: Decision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriageSession {
    pub session_id: String,
    pub model_id: String,
    pub status: SessionStatus,
    pub stages: Vec<StageRecord>,
    pub audit: Vec<AuditEvent>,
    #[serde(default)]
    tokens: BTreeMap<String, usize>,
}

impl TriageSession {
    pub fn current_stage(&self) -> Option<usize> {
        match self.status {
            SessionStatus::AwaitingStage(k) => Some(k),
            _ => None,
        }
    }

    pub fn final_decision(&self) -> Option<&Decision> {
        match self.status {
            SessionStatus::AwaitingStage(_) => None,
            _ => self.stages.last().map(|s| &s.decision),
        }
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

/// Session store bound to one joint model.
pub struct TriageEngine {
    model_id: String,
    model: Arc<ModelDocument>,
    description: ModelDescription,
    sessions: Mutex<HashMap<String, Arc<Mutex<TriageSession>>>>,
    next_id: AtomicU64,
    id_salt: u64,
}

impl TriageEngine {
    pub fn new(model_id: impl Into<String>, model: ModelDocument) -> Result<Self, TriageError> {
        let model_id = model_id.into();
        let description = describe(&model, &model_id)?;
        let id_salt = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_nanos() as u64)
            .wrapping_mul(0x9E37_79B9_7F4A_7C15);
        Ok(Self {
            model_id,
            model: Arc::new(model),
            description,
            sessions: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(1),
            id_salt,
        })
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn model(&self) -> &ModelDocument {
        &self.model
    }

    pub fn describe_model(&self) -> &ModelDescription {
        &self.description
    }

    /// `model_id` of `None` selects the loaded model.
    pub fn create_session(&self, model_id: Option<&str>) -> Result<TriageSession, TriageError> {
        if let Some(m) = model_id {
            if m != self.model_id {
                return Err(TriageError::UnknownModel(m.into()));
            }
        }
        let n = self.next_id.fetch_add(1, Ordering::Relaxed);
        let id = format!("{:016x}-{n}", self.id_salt ^ n.wrapping_mul(0xBF58_476D_1CE4_E5B9));
        let session = TriageSession {
            session_id: id.clone(),
            model_id: self.model_id.clone(),
            status: SessionStatus::AwaitingStage(1),
            stages: Vec::new(),
            audit: vec![AuditEvent {
                at_ms: now_ms(),
                kind: AuditKind::Created,
            }],
            tokens: BTreeMap::new(),
        };
        self.sessions
            .lock()
            .expect("session map poisoned")
            .insert(id, Arc::new(Mutex::new(session.clone())));
        Ok(session)
    }

    fn handle(&self, id: &str) -> Result<Arc<Mutex<TriageSession>>, TriageError> {
        self.sessions
            .lock()
            .expect("session map poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| TriageError::UnknownSession(id.into()))
    }

    pub fn get_session(&self, id: &str) -> Result<TriageSession, TriageError> {
        Ok(self.handle(id)?.lock().expect("session poisoned").clone())
    }

    /// Scores stage `stage` and advances or closes the session. A repeated
    /// `request_token` for the same stage returns the recorded decision.
    pub fn submit_stage(
        &self,
        id: &str,
        stage: usize,
        features: &BTreeMap<String, f64>,
        request_token: Option<&str>,
    ) -> Result<(Decision, SessionStatus), TriageError> {
        let handle = self.handle(id)?;
        let mut s = handle.lock().expect("session poisoned");

        if let Some(tok) = request_token {
            if let Some(&used) = s.tokens.get(tok) {
                if used != stage {
                    return Err(TriageError::TokenReused { token: tok.into(), stage: used });
                }
                let d = s.stages[used - 1].decision.clone();
                let status = s.status;
                s.audit.push(AuditEvent {
                    at_ms: now_ms(),
                    kind: AuditKind::Replayed {
                        stage,
                        request_token: tok.into(),
                    },
                });
                return Ok((d, status));
            }
        }

        let result = self.evaluate(&s, stage, features);
        let d = match result {
            Ok(d) => d,
            Err(e) => {
                s.audit.push(AuditEvent {
                    at_ms: now_ms(),
                    kind: AuditKind::Rejected {
                        stage,
                        reason: e.to_string(),
                    },
                });
                return Err(e);
            }
        };
        let k_max = self.model.layout.num_stages();
        let status = match d.action {
            Action::StopHealthy => SessionStatus::ClosedHealthy,
            Action::StopSick => SessionStatus::ClosedSick,
            Action::Advance if stage < k_max => SessionStatus::AwaitingStage(stage + 1),
            Action::Advance => unreachable!("last stage is binary"),
        };
        let at = now_ms();
        s.audit.push(AuditEvent {
            at_ms: at,
            kind: AuditKind::Submitted {
                stage,
                request_token: request_token.map(str::to_string),
            },
        });
        s.audit.push(AuditEvent {
            at_ms: at,
            kind: AuditKind::Decided {
                stage,
                label: d.label,
                action: d.action,
            },
        });
        s.stages.push(StageRecord {
            stage,
            features: features.clone(),
            decision: d.clone(),
        });
        if let Some(tok) = request_token {
            s.tokens.insert(tok.into(), stage);
        }
        s.status = status;
        Ok((d, status))
    }

    fn evaluate(&self, s: &TriageSession, stage: usize, features: &BTreeMap<String, f64>) -> Result<Decision, TriageError> {
        match s.status {
            SessionStatus::AwaitingStage(k) if k == stage => {}
            SessionStatus::AwaitingStage(k) => return Err(TriageError::OutOfOrder { expected: k, got: stage }),
            closed => return Err(TriageError::Closed(closed)),
        }
        let layout = &self.model.layout;
        let mut blocks: Vec<Vec<f64>> = Vec::with_capacity(stage);
        for k in 1..stage {
            blocks.push(stage_block(layout.stage_features(k), &s.stages[k - 1].features)?);
        }
        blocks.push(stage_block(layout.stage_features(stage), features)?);
        decide(&self.model, stage, &blocks)
    }

    /// Writes every session to `path` as one JSON array, ordered by id.
    pub fn save_snapshot(&self, path: &Path) -> Result<(), DataError> {
        let mut all: Vec<TriageSession> = {
            let map = self.sessions.lock().expect("session map poisoned");
            map.values().map(|h| h.lock().expect("session poisoned").clone()).collect()
        };
        all.sort_by(|a, b| a.session_id.cmp(&b.session_id));
        let text = serde_json::to_string_pretty(&all).expect("sessions serialize");
        write_atomic(path, text.as_bytes())
    }

    /// Loads sessions saved by [`save_snapshot`](Self::save_snapshot),
    /// replacing any with the same id.
    pub fn load_snapshot(&self, path: &Path) -> Result<usize, DataError> {
        let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let all: Vec<TriageSession> = serde_json::from_str(&text).map_err(|e| DataError::Document(e.to_string()))?;
        let n = all.len();
        let mut map = self.sessions.lock().expect("session map poisoned");
        for s in all {
            map.insert(s.session_id.clone(), Arc::new(Mutex::new(s)));
        }
        Ok(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::FitMetadata;
    use crate::estimation::FitMethod;
    use crate::model::{Parameters, StageLayout};

    fn doc() -> ModelDocument {
        let layout = StageLayout::new(vec![1, 1], vec!["a".into(), "b".into()]).unwrap();
        let params = Parameters::for_layout(&layout, vec![1.0, 1.0], &[(-2.2, 2.2)], 0.5).unwrap();
        ModelDocument {
            schema: crate::dataio::MODEL_SCHEMA.into(),
            layout,
            params,
            fit: FitMetadata {
                method: FitMethod::Joint,
                log_likelihood: -1.0,
                converged: true,
                iterations: 1,
                tool_version: "test".into(),
                fitted_at: 0,
            },
            standardization: None,
        }
    }

    fn feats(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn status_strings() {
        for s in [SessionStatus::AwaitingStage(3), SessionStatus::ClosedHealthy, SessionStatus::ClosedSick] {
            assert_eq!(s.to_string().parse::<SessionStatus>().unwrap(), s);
        }
        assert_eq!(SessionStatus::AwaitingStage(2).to_string(), "awaiting_stage_2");
        assert!("awaiting_stage_0".parse::<SessionStatus>().is_err());
    }

    #[test]
    fn band_decisions() {
        let d = doc();
        let mid = decide(&d, 1, &[vec![0.0]]).unwrap();
        assert_eq!((mid.pi, mid.label, mid.action), (0.5, Label::Indeterminate, Action::Advance));
        assert!((mid.probability_cutoffs[0] - 0.099_750_489_119_685_1).abs() < 1e-15);
        let high = decide(&d, 1, &[vec![10.0]]).unwrap();
        assert_eq!((high.label, high.action), (Label::Sick, Action::StopSick));
        // π = F(−3) ≈ 0.047 below F(−2.2) ≈ 0.0998
        let low = decide(&d, 1, &[vec![-3.0]]).unwrap();
        assert_eq!(low.action, Action::StopHealthy);
        let last = decide(&d, 2, &[vec![0.0], vec![0.2]]).unwrap();
        assert_ne!(last.label, Label::Indeterminate);
        assert_eq!(last.probability_cutoffs.len(), 1);
        assert!(decide(&d, 2, &[vec![0.0]]).is_err());
    }

    #[test]
    fn session_flow() {
        let e = TriageEngine::new("m", doc()).unwrap();
        let s = e.create_session(None).unwrap();
        assert_ne!(s.session_id, e.create_session(Some("m")).unwrap().session_id);
        assert!(matches!(e.create_session(Some("x")), Err(TriageError::UnknownModel(_))));

        let id = &s.session_id;
        assert!(matches!(
            e.submit_stage(id, 2, &feats(&[("b", 0.0)]), None),
            Err(TriageError::OutOfOrder { expected: 1, got: 2 })
        ));
        assert!(matches!(e.submit_stage(id, 1, &feats(&[("z", 0.0)]), None), Err(TriageError::Validation(_))));
        let (d, st) = e.submit_stage(id, 1, &feats(&[("a", 0.0)]), Some("t1")).unwrap();
        assert_eq!((d.action, st), (Action::Advance, SessionStatus::AwaitingStage(2)));
        let (again, _) = e.submit_stage(id, 1, &feats(&[("a", 0.0)]), Some("t1")).unwrap();
        assert_eq!(again, d);
        assert!(matches!(
            e.submit_stage(id, 1, &feats(&[("a", 0.0)]), Some("t2")),
            Err(TriageError::OutOfOrder { expected: 2, got: 1 })
        ));
        let (d2, st2) = e.submit_stage(id, 2, &feats(&[("b", 3.0)]), None).unwrap();
        assert_eq!((d2.label, st2), (Label::Sick, SessionStatus::ClosedSick));
        assert!(matches!(e.submit_stage(id, 2, &feats(&[("b", 3.0)]), None), Err(TriageError::Closed(_))));
        let snap = e.get_session(id).unwrap();
        assert_eq!(snap.stages.len(), 2);
        assert_eq!(snap.final_decision(), Some(&d2));
        assert!(snap.audit.len() >= 6);
        assert!(matches!(e.get_session("nope"), Err(TriageError::UnknownSession(_))));
    }

    #[test]
    fn snapshot_round_trip() {
        let e = TriageEngine::new("m", doc()).unwrap();
        let s = e.create_session(None).unwrap();
        e.submit_stage(&s.session_id, 1, &feats(&[("a", -5.0)]), None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("snap.json");
        e.save_snapshot(&p).unwrap();
        let fresh = TriageEngine::new("m", doc()).unwrap();
        assert_eq!(fresh.load_snapshot(&p).unwrap(), 1);
        assert_eq!(fresh.get_session(&s.session_id).unwrap(), e.get_session(&s.session_id).unwrap());
    }
}
