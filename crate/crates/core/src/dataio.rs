//! Cohort CSV files and versioned model documents.
//!
//! Cohort columns are `id`, the stage-1 features, `label1`, the stage-2
//! features, `label2`, and so on. A record that stopped at stage k leaves
//! every later column empty (or `NA`); blanks inside a reached stage are
//! rejected. Labels are written `0`, `0.5`, `1`. Files are written to a
//! temporary sibling and renamed into place.

use crate::cohort::{CohortError, PatientRecord, StageDataset};
use crate::estimation::{FitMethod, FitResult};
use crate::model::{FeatureSpec, Label, ModelError, Parameters, StageLayout};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const MODEL_SCHEMA: &str = "seqtriage-model/1";
const SCHEMA_PREFIX: &str = "seqtriage-model/";
const MODEL_MAJOR: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0} is empty")]
    Empty(PathBuf),
    #[error("header: {0}")]
    Header(String),
    #[error("line {line}: {message}")]
    Csv { line: u64, message: String },
    #[error("line {line}, record {id}: {message}")]
    Row { line: u64, id: String, message: String },
    #[error("unsupported model schema {found:?}; this build reads {MODEL_SCHEMA}")]
    SchemaVersion { found: String },
    #[error("model document: {0}")]
    Document(String),
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(path))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| DataError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

fn label_column(stage: usize) -> String {
    format!("label{stage}")
}

fn is_missing(cell: &str) -> bool {
    let c = cell.trim();
    c.is_empty() || c == "NA"
}

/// Header row for `layout`.
pub fn cohort_header(layout: &StageLayout) -> Vec<String> {
    let mut h = vec!["id".to_string()];
    for stage in 1..=layout.num_stages() {
        h.extend(layout.stage_features(stage).iter().map(|f| f.name.clone()));
        h.push(label_column(stage));
    }
    h
}

/// Layout implied by a header: features between consecutive `label{k}`
/// columns belong to stage k. All features are taken as continuous.
pub fn infer_layout(header: &[String]) -> Result<StageLayout, DataError> {
    if header.first().map(String::as_str) != Some("id") {
        return Err(DataError::Header("first column must be `id`".into()));
    }
    let mut counts = Vec::new();
    let mut names = Vec::new();
    let mut pending = 0;
    for col in &header[1..] {
        if *col == label_column(counts.len() + 1) {
            counts.push(pending);
            pending = 0;
        } else if col.starts_with("label") && col[5..].parse::<usize>().is_ok() {
            return Err(DataError::Header(format!("expected {} but found {col}", label_column(counts.len() + 1))));
        } else {
            names.push(col.clone());
            pending += 1;
        }
    }
    if pending > 0 {
        return Err(DataError::Header(format!("{pending} feature columns after the last label column")));
    }
    StageLayout::new(counts, names).map_err(|e| DataError::Header(e.to_string()))
}

fn parse_feature(cell: &str) -> Result<f64, String> {
    let v: f64 = cell
        .trim()
        .parse()
        .map_err(|_| format!("non-numeric feature value {cell:?}"))?;
    if !v.is_finite() {
        return Err(format!("non-finite feature value {cell:?}"));
    }
    Ok(v)
}

/// Parses cohort CSV text. With `layout`, the header must match it exactly;
/// otherwise the layout is inferred from the header.
pub fn parse_cohort(text: &str, layout: Option<&StageLayout>) -> Result<StageDataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| DataError::Header(e.to_string()))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    let layout = match layout {
        Some(l) => {
            let want = cohort_header(l);
            if header != want {
                return Err(DataError::Header(format!("expected [{}], found [{}]", want.join(","), header.join(","))));
            }
            l.clone()
        }
        None => infer_layout(&header)?,
    };
    let k_max = layout.num_stages();

    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| DataError::Csv {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let id = row.get(0).unwrap_or("").trim().to_string();
        let fail = |message: String| DataError::Row {
            line,
            id: id.clone(),
            message,
        };
        if id.is_empty() {
            return Err(fail("empty id".into()));
        }
        let mut features = Vec::new();
        let mut labels = Vec::new();
        let mut col = 1;
        let mut ended = false;
        for stage in 1..=k_max {
            let p = layout.new_feature_counts()[stage - 1];
            let cells: Vec<&str> = (col..col + p + 1).map(|c| row.get(c).unwrap_or("")).collect();
            col += p + 1;
            let (feat, label) = cells.split_at(p);
            let label = label[0];
            let all_missing = feat.iter().all(|c| is_missing(c));
            if all_missing && is_missing(label) {
                ended = true;
                continue;
            }
            if ended {
                return Err(fail(format!("stage {stage} data follows an absent earlier stage")));
            }
            if let Some(c) = feat.iter().position(|c| is_missing(c)) {
                return Err(fail(format!(
                    "missing value for {} inside reached stage {stage}",
                    layout.stage_features(stage)[c].name
                )));
            }
            let block = feat.iter().map(|c| parse_feature(c)).collect::<Result<Vec<_>, _>>().map_err(fail)?;
            let label = if is_missing(label) {
                None
            } else {
                Some(Label::parse(label.trim()).ok_or_else(|| fail(format!("label {label:?} is not 0, 0.5 or 1")))?)
            };
            features.push(block);
            labels.push(label);
        }
        if features.is_empty() {
            return Err(fail("no stage-1 data".into()));
        }
        for stage in 1..=features.len().min(k_max - 1) {
            let has_next = features.len() > stage;
            match labels[stage - 1] {
                Some(l) if has_next != (l == Label::Indeterminate) => {
                    return Err(fail(format!(
                        "stage {stage} label is {} but stage {} data is {}",
                        l.as_str(),
                        stage + 1,
                        if has_next { "present" } else { "absent" }
                    )));
                }
                _ => {}
            }
        }
        records.push(PatientRecord::new(id, features, labels));
    }
    Ok(StageDataset::new(layout, records)?)
}

pub fn read_cohort(path: &Path, layout: Option<&StageLayout>) -> Result<StageDataset, DataError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    if text.trim().is_empty() {
        return Err(DataError::Empty(path.to_path_buf()));
    }
    parse_cohort(&text, layout)
}

/// Shortest decimal that parses back to the same `f64`.
fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

pub fn cohort_to_csv(data: &StageDataset) -> String {
    let layout = data.layout();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(cohort_header(layout)).expect("in-memory write");
    for r in data.records() {
        let mut row = vec![r.id.clone()];
        for stage in 1..=layout.num_stages() {
            match r.features.get(stage - 1) {
                Some(block) => {
                    row.extend(block.iter().map(|&v| fmt_f64(v)));
                    row.push(r.label(stage).map_or_else(String::new, |l| l.as_str().to_string()));
                }
                None => row.extend(std::iter::repeat_n(String::new(), layout.new_feature_counts()[stage - 1] + 1)),
            }
        }
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
}

pub fn write_cohort(path: &Path, data: &StageDataset) -> Result<(), DataError> {
    write_atomic(path, cohort_to_csv(data).as_bytes())
}

/// Layout of the bundled common-bile-duct-stone sample: demographics and
/// labs at stage 1, imaging at stage 2.
pub fn cbds_sample_layout() -> StageLayout {
    let stage1 = vec![
        FeatureSpec::binary("hemolytic_disease"),
        FeatureSpec::binary("gender"),
        FeatureSpec::continuous("age").with_unit("years"),
        FeatureSpec::continuous("bmi").with_unit("kg/m2"),
        FeatureSpec::continuous("total_bilirubin").with_unit("mg/dL"),
        FeatureSpec::continuous("alt").with_unit("U/L"),
        FeatureSpec::continuous("ast").with_unit("U/L"),
        FeatureSpec::continuous("lipase").with_unit("U/L"),
        FeatureSpec::continuous("amylase").with_unit("U/L"),
        FeatureSpec::continuous("ggt").with_unit("U/L"),
        FeatureSpec::continuous("alkaline_phosphatase").with_unit("U/L"),
    ];
    let stage2 = vec![
        FeatureSpec::continuous("cbd_diameter_us").with_unit("mm"),
        FeatureSpec::binary("stone_us"),
        FeatureSpec::continuous("cbd_diameter_mri").with_unit("mm"),
        FeatureSpec::binary("stone_mri"),
    ];
    let features = stage1.into_iter().chain(stage2).collect();
    StageLayout::with_features(vec![11, 4], features).expect("static layout is valid")
}

/// Per-feature z-scaling applied to raw features before the model sees them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardization {
    /// Means and sample standard deviations over the records reaching each
    /// feature's stage; binary features and constant columns keep scale 1.
    pub fn fit(data: &StageDataset) -> Self {
        let layout = data.layout();
        let mut mean = Vec::new();
        let mut scale = Vec::new();
        for stage in 1..=layout.num_stages() {
            for (j, spec) in layout.stage_features(stage).iter().enumerate() {
                let vals: Vec<f64> = data
                    .records()
                    .iter()
                    .filter_map(|r| r.features.get(stage - 1).map(|b| b[j]))
                    .collect();
                if spec.kind == crate::model::FeatureKind::Binary || vals.len() < 2 {
                    mean.push(0.0);
                    scale.push(1.0);
                    continue;
                }
                let n = vals.len() as f64;
                let m = vals.iter().sum::<f64>() / n;
                let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
                mean.push(m);
                scale.push(if sd > 0.0 { sd } else { 1.0 });
            }
        }
        Self { mean, scale }
    }

    fn check(&self, layout: &StageLayout) -> Result<(), String> {
        let n = layout.features().len();
        if self.mean.len() != n || self.scale.len() != n {
            return Err(format!("standardization has {}/{} entries for {n} features", self.mean.len(), self.scale.len()));
        }
        if self.scale.iter().any(|s| !(*s > 0.0 && s.is_finite())) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err("standardization scales must be positive and finite".into());
        }
        Ok(())
    }

    /// Scales raw stage blocks in place order: `(x − mean) / scale`.
    pub fn apply_blocks(&self, layout: &StageLayout, blocks: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let mut offset = 0;
        blocks
            .iter()
            .enumerate()
            .map(|(k, b)| {
                let out = b
                    .iter()
                    .enumerate()
                    .map(|(j, v)| (v - self.mean[offset + j]) / self.scale[offset + j])
                    .collect();
                offset += layout.new_feature_counts()[k];
                out
            })
            .collect()
    }

    pub fn apply(&self, data: &StageDataset) -> Result<StageDataset, DataError> {
        let layout = data.layout();
        let records = data
            .records()
            .iter()
            .map(|r| PatientRecord::new(r.id.clone(), self.apply_blocks(layout, &r.features), r.labels.clone()))
            .collect();
        Ok(StageDataset::new(layout.clone(), records)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMetadata {
    pub method: FitMethod,
    pub log_likelihood: f64,
    pub converged: bool,
    pub iterations: usize,
    pub tool_version: String,
    /// Seconds since the Unix epoch.
    pub fitted_at: u64,
}

/// A fitted model as stored on disk.
///
/// Joint documents carry one parameter set for the whole layout. A baseline
/// document carries the single-stage model of `method.stage`, whose
/// coefficients cover the cumulative features of that stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDocument {
    pub schema: String,
    pub layout: StageLayout,
    pub params: Parameters,
    pub fit: FitMetadata,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standardization: Option<Standardization>,
}

impl ModelDocument {
    pub fn from_fit(layout: &StageLayout, fit: &FitResult, fitted_at: u64, standardization: Option<Standardization>) -> Result<Self, DataError> {
        let doc = Self {
            schema: MODEL_SCHEMA.into(),
            layout: layout.clone(),
            params: fit.params.clone(),
            fit: FitMetadata {
                method: fit.method,
                log_likelihood: fit.final_log_likelihood,
                converged: fit.converged,
                iterations: fit.iterations_used,
                tool_version: env!("CARGO_PKG_VERSION").into(),
                fitted_at,
            },
            standardization,
        };
        doc.validate()?;
        Ok(doc)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        check_schema(&self.schema)?;
        let bad = |m: String| Err(DataError::Document(m));
        match self.fit.method {
            FitMethod::Joint => {
                if self.params.stage_widths() != self.layout.stage_widths().as_slice() {
                    return bad(format!(
                        "parameter stage widths {:?} do not match layout {:?}",
                        self.params.stage_widths(),
                        self.layout.stage_widths()
                    ));
                }
            }
            FitMethod::BaselineStagewise { stage } => {
                self.layout.check_stage(stage)?;
                let want_cats = self.layout.num_categories(stage);
                if self.params.num_stages() != 1
                    || self.params.stage_widths()[0] != self.layout.cumulative_count(stage)
                    || self.params.cutoffs()[0].num_categories() != want_cats
                {
                    return bad(format!("baseline parameters do not describe stage {stage} of the layout"));
                }
            }
        }
        if let Some(s) = &self.standardization {
            s.check(&self.layout).map_err(DataError::Document)?;
        }
        Ok(())
    }

    pub fn is_joint(&self) -> bool {
        self.fit.method == FitMethod::Joint
    }

    /// Stages this document can score.
    pub fn stages(&self) -> Vec<usize> {
        match self.fit.method {
            FitMethod::Joint => (1..=self.layout.num_stages()).collect(),
            FitMethod::BaselineStagewise { stage } => vec![stage],
        }
    }

    /// Parameter set and its internal stage index for scoring `stage`.
    pub fn stage_params(&self, stage: usize) -> Result<(&Parameters, usize), ModelError> {
        self.layout.check_stage(stage)?;
        match self.fit.method {
            FitMethod::Joint => Ok((&self.params, stage)),
            FitMethod::BaselineStagewise { stage: s } if s == stage => Ok((&self.params, 1)),
            FitMethod::BaselineStagewise { stage: s } => Err(ModelError::UnknownStage { stage, stages: s }),
        }
    }

    /// Cumulative design row for `stage` from raw blocks, standardized when
    /// the document says so.
    pub fn design_row(&self, stage: usize, raw_blocks: &[Vec<f64>]) -> Vec<f64> {
        match &self.standardization {
            Some(s) => self.layout.design_row(stage, &s.apply_blocks(&self.layout, &raw_blocks[..stage])),
            None => self.layout.design_row(stage, raw_blocks),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("document serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, DataError> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| DataError::Document(e.to_string()))?;
        let schema = value
            .get("schema")
            .and_then(|v| v.as_str())
            .ok_or_else(|| DataError::Document("missing `schema` field".into()))?;
        check_schema(schema)?;
        let doc: Self = serde_json::from_value(value).map_err(|e| DataError::Document(e.to_string()))?;
        doc.validate()?;
        Ok(doc)
    }
}

/// Accepts `seqtriage-model/1` and minor revisions `seqtriage-model/1.x`.
fn check_schema(s: &str) -> Result<(), DataError> {
    let major = s
        .strip_prefix(SCHEMA_PREFIX)
        .and_then(|v| v.split('.').next())
        .and_then(|m| m.parse::<u32>().ok());
    if major == Some(MODEL_MAJOR) {
        Ok(())
    } else {
        Err(DataError::SchemaVersion { found: s.into() })
    }
}

pub fn write_model(path: &Path, doc: &ModelDocument) -> Result<(), DataError> {
    doc.validate()?;
    write_atomic(path, doc.to_json().as_bytes())
}

pub fn read_model(path: &Path) -> Result<ModelDocument, DataError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    ModelDocument::from_json(&text)
}
