use crate::config::{FitConfig, Method, PredictConfig, Provenance, RunConfig, ServeConfig, SimulateConfig, StudyConfig};
use crate::error::CliError;
use crate::plot::{Chart, Series};
use seqtriage_core::dataio::{read_cohort, read_model, write_atomic, write_cohort, ModelDocument, Standardization};
use seqtriage_core::estimation::{fit_baseline_stagewise, fit_joint, FitResult};
use seqtriage_core::simgen::{generate_cohort, run_monte_carlo, MonteCarloReport};
use seqtriage_core::triage::{decide, stage_block, Decision, TriageEngine};
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("output serializes");
    text.push('\n');
    Ok(write_atomic(path, text.as_bytes())?)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    Ok(write_atomic(path, text.as_bytes())?)
}

#[derive(Serialize)]
struct Truth<'a> {
    provenance: Provenance<'a>,
    layout: &'a seqtriage_core::StageLayout,
    parameters: &'a seqtriage_core::Parameters,
}

/// One file per replication (`cohort.csv` when there is only one) plus
/// `truth.json` and `run_config.json`.
pub fn cmd_simulate(cfg: &SimulateConfig, run: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let sim = &cfg.simulation;
    create_dir(&cfg.out)?;
    let mut written = Vec::with_capacity(sim.replications);
    for rep in 0..sim.replications {
        let name = if sim.replications == 1 {
            "cohort.csv".to_string()
        } else {
            format!("cohort_r{rep:03}.csv")
        };
        let path = cfg.out.join(name);
        let data = generate_cohort(sim, rep as u64)?;
        write_cohort(&path, &data)?;
        log::info!("wrote {} ({} patients, stage sizes {:?})", path.display(), data.records().len(), data.stage_sizes());
        written.push(path);
    }
    let layout = sim.layout()?;
    let params = sim.true_params()?;
    write_json(
        &cfg.out.join("truth.json"),
        &Truth {
            provenance: Provenance::new(run),
            layout: &layout,
            parameters: &params,
        },
    )?;
    write_text(&cfg.out.join("run_config.json"), &run.to_json())?;
    Ok(written)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = path.extension().map(|e| format!(".{}", e.to_string_lossy())).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}{ext}"))
}

/// Model files written by a fit (baseline fits write one per stage).
pub fn fit_outputs(cfg: &FitConfig, stages: usize) -> Vec<PathBuf> {
    match cfg.method {
        Method::Joint => vec![cfg.out.clone()],
        Method::Baseline => (1..=stages).map(|k| with_suffix(&cfg.out, &format!("_stage{k}"))).collect(),
    }
}

fn now_secs() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// Fits and writes the model document(s) and a `.run.json` sidecar. Models
/// are written even when a fit stops short; that case returns
/// [`CliError::NonConvergence`].
pub fn cmd_fit(cfg: &FitConfig, run: &RunConfig) -> Result<Vec<(PathBuf, FitResult)>, CliError> {
    let opts = cfg.fit.options()?;
    let raw = read_cohort(&cfg.cohort, None)?;
    raw.validate_training().map_err(|e| CliError::Validation(e.to_string()))?;
    let layout = raw.layout().clone();
    let (data, standardization) = if cfg.standardize {
        let s = Standardization::fit(&raw);
        (s.apply(&raw)?, Some(s))
    } else {
        (raw, None)
    };

    let fits = match cfg.method {
        Method::Joint => vec![fit_joint(&data, &opts)?],
        Method::Baseline => fit_baseline_stagewise(&data, &opts)?,
    };
    let paths = fit_outputs(cfg, layout.num_stages());
    if let Some(parent) = cfg.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let fitted_at = now_secs();
    let mut unconverged = Vec::new();
    for (path, fit) in paths.iter().zip(&fits) {
        let doc = ModelDocument::from_fit(&layout, fit, fitted_at, standardization.clone())?;
        seqtriage_core::dataio::write_model(path, &doc)?;
        for w in &fit.warnings {
            log::warn!("{}: {w:?}", path.display());
        }
        println!(
            "{}: converged={} iterations={} log_likelihood={}",
            path.display(),
            fit.converged,
            fit.iterations_used,
            fit.final_log_likelihood
        );
        if !fit.converged {
            unconverged.push(path.display().to_string());
        }
    }
    write_text(&with_suffix(&cfg.out, ".run"), &run.to_json())?;
    if !unconverged.is_empty() {
        return Err(CliError::NonConvergence(format!(
            "fit did not converge within {} iterations; result written and flagged: {}",
            cfg.fit.max_iterations,
            unconverged.join(", ")
        )));
    }
    Ok(paths.into_iter().zip(fits).collect())
}

fn stage_mse_csv(report: &MonteCarloReport) -> String {
    let mut s = String::from("stage,coefficients,joint,baseline\n");
    for m in &report.stage_mse {
        s.push_str(&format!("{},{},{},{}\n", m.stage, m.coefficients, m.joint, m.baseline));
    }
    s
}

/// Baseline summary paired with each joint parameter (the last-stage fit
/// for coefficients, the own-stage fit for cutoffs).
fn paired_baseline(report: &MonteCarloReport) -> Vec<Option<&seqtriage_core::simgen::ParameterSummary>> {
    report
        .joint()
        .parameters
        .iter()
        .map(|p| {
            let stage = report.efficiency.iter().find(|r| r.parameter == p.name)?.headline_stage;
            report.baseline(stage)?.get(&p.name)
        })
        .collect()
}

fn study_plots(report: &MonteCarloReport) -> [(&'static str, String); 3] {
    let joint = &report.joint().parameters;
    let paired = paired_baseline(report);
    let names: Vec<String> = joint.iter().map(|p| p.name.clone()).collect();
    let means = Chart {
        title: "Mean estimate per parameter",
        y_label: "mean",
        categories: names.clone(),
        series: vec![
            Series {
                name: "joint",
                color: "#1f77b4",
                values: joint.iter().map(|p| Some(p.stats.mean)).collect(),
            },
            Series {
                name: "baseline",
                color: "#ff7f0e",
                values: paired.iter().map(|b| b.map(|b| b.stats.mean)).collect(),
            },
        ],
        markers: Some(("truth", joint.iter().map(|p| p.truth).collect())),
        reference: None,
    };
    let stds = Chart {
        title: "Standard deviation per parameter",
        y_label: "std",
        categories: names,
        series: vec![
            Series {
                name: "joint",
                color: "#1f77b4",
                values: joint.iter().map(|p| p.stats.std).collect(),
            },
            Series {
                name: "baseline",
                color: "#ff7f0e",
                values: paired.iter().map(|b| b.and_then(|b| b.stats.std)).collect(),
            },
        ],
        markers: None,
        reference: None,
    };
    let eff = Chart {
        title: "Relative efficiency var(baseline) / var(joint)",
        y_label: "relative efficiency",
        categories: report.efficiency.iter().map(|r| r.parameter.clone()).collect(),
        series: vec![
            Series {
                name: "vs last-stage fit",
                color: "#2ca02c",
                values: report.efficiency.iter().map(|r| r.headline).collect(),
            },
            Series {
                name: "vs introducing fit",
                color: "#9467bd",
                values: report.efficiency.iter().map(|r| r.at_introduction).collect(),
            },
        ],
        markers: None,
        reference: Some(1.0),
    };
    [("means.svg", means.to_svg()), ("std.svg", stds.to_svg()), ("efficiency.svg", eff.to_svg())]
}

#[derive(Serialize)]
struct StudyDocument<'a> {
    provenance: Provenance<'a>,
    report: &'a MonteCarloReport,
}

/// Report files written by a study, relative to its output directory.
pub const STUDY_FILES: [&str; 9] = [
    "report.json",
    "estimators.csv",
    "efficiency.csv",
    "metrics.csv",
    "stage_mse.csv",
    "run_config.json",
    "plots/means.svg",
    "plots/std.svg",
    "plots/efficiency.svg",
];

pub fn cmd_study(cfg: &StudyConfig, run: &RunConfig) -> Result<MonteCarloReport, CliError> {
    let opts = cfg.fit.options()?;
    log::info!(
        "study: N1={} replications={} seed={} jobs={}",
        cfg.simulation.n_stage1,
        cfg.simulation.replications,
        cfg.simulation.seed,
        cfg.jobs
    );
    let report = run_monte_carlo(&cfg.simulation, &opts, cfg.jobs)?;
    create_dir(&cfg.out.join("plots"))?;
    write_json(
        &cfg.out.join("report.json"),
        &StudyDocument {
            provenance: Provenance::new(run),
            report: &report,
        },
    )?;
    write_text(&cfg.out.join("estimators.csv"), &report.estimator_table_csv())?;
    write_text(&cfg.out.join("efficiency.csv"), &report.efficiency_table_csv())?;
    write_text(&cfg.out.join("metrics.csv"), &report.metrics_table_csv())?;
    write_text(&cfg.out.join("stage_mse.csv"), &stage_mse_csv(&report))?;
    write_text(&cfg.out.join("run_config.json"), &run.to_json())?;
    for (name, svg) in study_plots(&report) {
        write_text(&cfg.out.join("plots").join(name), &svg)?;
    }

    println!(
        "{} of {} replications used; results in {}",
        report.replications_used,
        cfg.simulation.replications,
        cfg.out.display()
    );
    println!("{:<6} {:>10} {:>10} {:>10} {:>8}", "param", "truth", "joint", "baseline", "RE");
    let paired = paired_baseline(&report);
    for (p, b) in report.joint().parameters.iter().zip(paired) {
        let re = report.efficiency.iter().find(|r| r.parameter == p.name).and_then(|r| r.headline);
        println!(
            "{:<6} {:>10.4} {:>10.4} {:>10} {:>8}",
            p.name,
            p.truth,
            p.stats.mean,
            b.map_or("-".into(), |b| format!("{:.4}", b.stats.mean)),
            re.map_or("-".into(), |r| format!("{r:.2}"))
        );
    }
    Ok(report)
}

/// Splits a flat name → value map into the feature blocks for stages
/// `1..=stage`.
pub fn feature_blocks(doc: &ModelDocument, stage: usize, features: &BTreeMap<String, f64>) -> Result<Vec<Vec<f64>>, CliError> {
    let layout = &doc.layout;
    layout.check_stage(stage).map_err(|e| CliError::Validation(e.to_string()))?;
    let mut blocks = Vec::with_capacity(stage);
    let mut used = 0;
    for k in 1..=stage {
        let specs = layout.stage_features(k);
        let subset: BTreeMap<String, f64> = features
            .iter()
            .filter(|(n, _)| specs.iter().any(|f| &f.name == *n))
            .map(|(n, v)| (n.clone(), *v))
            .collect();
        used += subset.len();
        blocks.push(stage_block(specs, &subset).map_err(|e| CliError::Validation(format!("stage {k}: {e}")))?);
    }
    if used != features.len() {
        let known: Vec<&str> = (1..=stage)
            .flat_map(|k| layout.stage_features(k).iter().map(|f| f.name.as_str()))
            .collect();
        let extra: Vec<&str> = features.keys().map(String::as_str).filter(|n| !known.contains(n)).collect();
        return Err(CliError::Validation(format!(
            "features not used through stage {stage}: {}",
            extra.join(", ")
        )));
    }
    Ok(blocks)
}

#[derive(Serialize)]
pub struct PredictOutput<'a> {
    pub provenance: Provenance<'a>,
    pub decision: &'a Decision,
}

pub fn cmd_predict(cfg: &PredictConfig, features: &BTreeMap<String, f64>) -> Result<Decision, CliError> {
    let doc = read_model(&cfg.model)?;
    let blocks = feature_blocks(&doc, cfg.stage, features)?;
    Ok(decide(&doc, cfg.stage, &blocks)?)
}

pub fn cmd_serve(cfg: &ServeConfig) -> Result<(), CliError> {
    let doc = read_model(&cfg.model)?;
    let engine = Arc::new(TriageEngine::new(cfg.model_id.clone(), doc)?);
    let app = seqtriage_service::router(engine, cfg.snapshot.clone())?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Io(e.to_string()))?;
    rt.block_on(async {
        let addr = format!("{}:{}", cfg.host, cfg.port);
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| CliError::Io(format!("{addr}: {e}")))?;
        let local = listener.local_addr().map_err(|e| CliError::Io(e.to_string()))?;
        println!("serving model {:?} on http://{local}", cfg.model_id);
        seqtriage_service::serve(listener, app, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| CliError::Io(e.to_string()))
    })
}
