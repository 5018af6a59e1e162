use seqtriage_core::dataio::{read_cohort, read_model, write_model, FitMetadata, ModelDocument, MODEL_SCHEMA};
use seqtriage_core::estimation::FitMethod;
use seqtriage_core::triage::TriageEngine;
use seqtriage_core::{Parameters, StageLayout};
use serde_json::Value;
use std::path::Path;
use std::process::{Command, Output};
use std::sync::Arc;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seqtriage"))
        .current_dir(dir)
        .env("SEQTRIAGE_LOG", "warn")
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Two stages of one feature each; β = (1, 1), band (−2.2, 2.2), cut 0.5.
fn hand_model(path: &Path) {
    let layout = StageLayout::new(vec![1, 1], vec!["a".into(), "b".into()]).unwrap();
    let params = Parameters::for_layout(&layout, vec![1.0, 1.0], &[(-2.2, 2.2)], 0.5).unwrap();
    let doc = ModelDocument {
        schema: MODEL_SCHEMA.into(),
        layout,
        params,
        fit: FitMetadata {
            method: FitMethod::Joint,
            log_likelihood: 0.0,
            converged: true,
            iterations: 0,
            tool_version: "test".into(),
            fitted_at: 0,
        },
        standardization: None,
    };
    write_model(path, &doc).unwrap();
}

fn predict(dir: &Path, model: &str, stage: &str, features: &[&str]) -> (i32, Value) {
    let mut args = vec!["predict", "--model", model, "--stage", stage];
    for f in features {
        args.push("--feature");
        args.push(f);
    }
    let o = run(dir, &args);
    let v = serde_json::from_slice(&o.stdout).unwrap_or(Value::Null);
    (code(&o), v)
}

#[test]
fn simulate_defaults_and_validation() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = run(d, &["simulate", "--out", "one"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let cohort = read_cohort(&d.join("one/cohort.csv"), None).unwrap();
    assert_eq!(cohort.records().len(), 10_000);
    let truth: Value = serde_json::from_str(&std::fs::read_to_string(d.join("one/truth.json")).unwrap()).unwrap();
    assert_eq!(truth["parameters"]["beta"], serde_json::json!([2.0, 2.0, 2.0, 2.0, 4.0, 4.0, 4.0]));
    assert_eq!(truth["provenance"]["run"]["simulation"]["seed"], 20_230_817);

    let o = run(d, &["simulate", "--n-stage1", "200", "--replications", "3", "--out", "three"]);
    assert_eq!(code(&o), 0);
    let files: Vec<String> = (0..3).map(|r| std::fs::read_to_string(d.join(format!("three/cohort_r{r:03}.csv"))).unwrap()).collect();
    assert!(files[0] != files[1] && files[1] != files[2]);

    assert_eq!(code(&run(d, &["simulate", "--n-stage1", "0", "--out", "zero"])), 2);
    assert!(!d.join("zero").exists());
    assert_eq!(code(&run(d, &["simulate", "--profile", "huge"])), 2);
}

#[test]
fn fit_writes_models_and_flags_problems() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&run(d, &["simulate", "--profile", "desk", "--out", "sim"])), 0);

    let o = run(d, &["fit", "sim/cohort.csv", "--out", "m/joint.json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("converged=true") && out.contains("log_likelihood="));
    let doc = read_model(&d.join("m/joint.json")).unwrap();
    assert!(doc.fit.converged && doc.fit.iterations <= 500 && doc.is_joint());
    assert!(d.join("m/joint.run.json").exists());

    let o = run(d, &["fit", "sim/cohort.csv", "--method", "baseline", "--out", "m/base.json"]);
    assert_eq!(code(&o), 0);
    assert_eq!(read_model(&d.join("m/base_stage1.json")).unwrap().stages(), vec![1]);
    assert_eq!(read_model(&d.join("m/base_stage2.json")).unwrap().stages(), vec![2]);

    let o = run(d, &["fit", "sim/cohort.csv", "--max-iterations", "2", "--out", "m/short.json"]);
    assert_eq!(code(&o), 3);
    assert!(!read_model(&d.join("m/short.json")).unwrap().fit.converged);

    let mut text = std::fs::read_to_string(d.join("sim/cohort.csv")).unwrap();
    text = text.replacen("\n000003,", "\n000003,abc,", 1);
    std::fs::write(d.join("bad.csv"), text).unwrap();
    let o = run(d, &["fit", "bad.csv", "--out", "m/bad.json"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(!d.join("m/bad.json").exists());
    assert!(std::fs::read_dir(d.join("m")).unwrap().all(|e| !e.unwrap().file_name().to_string_lossy().starts_with(".tmp")));

    assert_eq!(code(&run(d, &["fit", "missing.csv"])), 4);
    assert_eq!(code(&run(d, &["fit"])), 2);
}

#[test]
fn predict_examples() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    hand_model(&d.join("m.json"));

    let (c, v) = predict(d, "m.json", "1", &["a=0"]);
    assert_eq!(c, 0);
    let dec = &v["decision"];
    assert_eq!((dec["pi"].as_f64(), dec["label"].as_f64(), dec["action"].as_str()), (Some(0.5), Some(0.5), Some("advance")));
    assert_eq!(v["provenance"]["run"]["command"], "predict");

    let (_, v) = predict(d, "m.json", "1", &["a=10"]);
    assert_eq!((v["decision"]["label"].as_f64(), v["decision"]["action"].as_str()), (Some(1.0), Some("stop_sick")));

    let (_, v) = predict(d, "m.json", "2", &["a=0", "b=0.2"]);
    let label = v["decision"]["label"].as_f64().unwrap();
    assert!(label == 0.0 || label == 1.0);
    assert_eq!(v["decision"]["probability_cutoffs"].as_array().unwrap().len(), 1);

    std::fs::write(d.join("f.json"), r#"{"a": -5}"#).unwrap();
    let o = run(d, &["predict", "--model", "m.json", "--stage", "1", "--features-file", "f.json"]);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["decision"]["action"], "stop_healthy");

    assert_eq!(predict(d, "m.json", "2", &["a=0"]).0, 2);
    assert_eq!(predict(d, "m.json", "1", &["a=0", "z=1"]).0, 2);
    assert_eq!(predict(d, "m.json", "3", &["a=0"]).0, 2);
    assert_eq!(predict(d, "m.json", "1", &["a=x"]).0, 2);
    assert_eq!(predict(d, "nope.json", "1", &["a=0"]).0, 4);
}

#[test]
fn config_file_mirrors_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("run.toml"), "profile = \"desk\"\nn_stage1 = 150\nseed = 5\nout = \"from_file\"\n").unwrap();
    let o = run(d, &["--config", "run.toml", "simulate"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(read_cohort(&d.join("from_file/cohort.csv"), None).unwrap().records().len(), 150);

    let o = run(d, &["simulate", "--config", "run.toml", "--n-stage1", "120", "--out", "flag"]);
    assert_eq!(code(&o), 0);
    assert_eq!(read_cohort(&d.join("flag/cohort.csv"), None).unwrap().records().len(), 120);
    let echoed: Value = serde_json::from_str(&std::fs::read_to_string(d.join("flag/run_config.json")).unwrap()).unwrap();
    assert_eq!(echoed["run"]["simulation"]["seed"], 5);
    assert_eq!(echoed["run"]["profile"], "desk");

    std::fs::write(d.join("bad.toml"), "n_stage_one = 3\n").unwrap();
    assert_eq!(code(&run(d, &["--config", "bad.toml", "simulate"])), 2);
    assert_eq!(code(&run(d, &["--config", "absent.toml", "simulate"])), 4);
}

#[test]
fn study_reruns_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let args = ["study", "--profile", "desk", "--n-stage1", "400", "--replications", "4", "--jobs", "2", "--out", "s"];
    assert_eq!(code(&run(d, &args)), 0);
    let files = seqtriage_cli::commands::STUDY_FILES;
    let first: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(d.join("s").join(f)).unwrap()).collect();
    assert_eq!(code(&run(d, &args)), 0);
    let second: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(d.join("s").join(f)).unwrap()).collect();
    assert_eq!(first, second);

    let report: Value = serde_json::from_slice(&first[0]).unwrap();
    assert_eq!(report["provenance"]["run"]["jobs"], 2);
    let rows = report["report"]["efficiency"].as_array().unwrap();
    assert_eq!(rows.len(), 10);
    assert!(String::from_utf8_lossy(&first[6]).starts_with("<svg"));
}

#[test]
fn cli_and_service_agree_digit_for_digit() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&run(d, &["simulate", "--profile", "desk", "--n-stage1", "800", "--out", "sim"])), 0);
    assert_eq!(code(&run(d, &["fit", "sim/cohort.csv", "--standardize", "--out", "model.json"])), 0);
    let doc = read_model(&d.join("model.json")).unwrap();
    assert!(doc.standardization.is_some());

    let rt = tokio::runtime::Runtime::new().unwrap();
    let base = rt.block_on(async {
        let engine = Arc::new(TriageEngine::new("model", doc.clone()).unwrap());
        let app = seqtriage_service::router(engine, None).unwrap();
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        tokio::spawn(seqtriage_service::serve(listener, app, std::future::pending()));
        format!("http://{addr}")
    });
    let layout = doc.layout.clone();
    let cohort = read_cohort(&d.join("sim/cohort.csv"), None).unwrap();
    let client = reqwest::Client::new();
    let mut compared = 0;
    for r in cohort.records().iter().take(25) {
        let sid: Value = rt.block_on(async {
            client.post(format!("{base}/sessions")).send().await.unwrap().json().await.unwrap()
        });
        let sid = sid["session_id"].as_str().unwrap().to_string();
        let mut cli_args: Vec<String> = Vec::new();
        for stage in 1..=r.deepest_stage() {
            let names = layout.stage_features(stage);
            let mut body = serde_json::Map::new();
            for (f, v) in names.iter().zip(&r.features[stage - 1]) {
                cli_args.push(format!("{}={v}", f.name));
                body.insert(f.name.clone(), serde_json::json!(v));
            }
            let served: Value = rt.block_on(async {
                client
                    .post(format!("{base}/sessions/{sid}/stages/{stage}"))
                    .json(&serde_json::json!({ "features": body }))
                    .send()
                    .await
                    .unwrap()
                    .json()
                    .await
                    .unwrap()
            });
            let refs: Vec<&str> = cli_args.iter().map(String::as_str).collect();
            let (c, printed) = predict(d, "model.json", &stage.to_string(), &refs);
            assert_eq!(c, 0);
            let printed = &printed["decision"];
            assert_eq!(printed["pi"].to_string(), served["pi"].to_string());
            assert_eq!(printed["label"], served["label"]);
            assert_eq!(printed["action"], served["action"]);
            compared += 1;
            if served["action"] != "advance" {
                break;
            }
        }
    }
    assert!(compared > 25);
}
