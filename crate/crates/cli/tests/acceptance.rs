//! Acceptance gate: one PASS/FAIL line per criterion.
//!
//! Every criterion is evaluated at its stated tolerance. Failures listed in
//! [`KNOWN_DEVIATIONS`] are still printed as FAIL but do not fail the run;
//! any other failure does. See the README section on known deviations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqtriage_cli::commands::{cmd_study, STUDY_FILES};
use seqtriage_cli::config::{FitSettings, Profile, RunConfig, StudyConfig};
use seqtriage_core::likelihood::finite_difference_gradient;
use seqtriage_core::metrics::{classification_report, ConfusionCounts, MetricReport};
use seqtriage_core::model::{self, logistic_cdf};
use seqtriage_core::simgen::{generate_cohort, MonteCarloReport, SimConfig};
use seqtriage_core::estimation::fit_single_stage;
use seqtriage_core::{
    analytic_gradient, fit_baseline_stagewise, fit_joint, group_partition, Cutoffs, FitOptions, Label, Parameters,
    PatientRecord, StageDataset, StageLayout,
};
use std::time::Instant;

const KNOWN_DEVIATIONS: &[&str] = &["paper: stage-1 MSE magnitude"];

struct Gate {
    results: Vec<(String, bool)>,
}

impl Gate {
    fn check(&mut self, name: &str, pass: bool, detail: String) {
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        self.results.push((name.to_string(), pass));
    }
}

fn logistic_noise(rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.random_range(1e-12..1.0 - 1e-12);
    (u / (1.0 - u)).ln()
}

fn random_params(rng: &mut ChaCha8Rng, layout: &StageLayout) -> Parameters {
    let beta = (0..layout.total_coefficients()).map(|_| rng.random_range(-2.0..2.0)).collect();
    let bands: Vec<(f64, f64)> = (1..layout.num_stages())
        .map(|_| {
            let l = rng.random_range(-2.0..0.0);
            (l, l + rng.random_range(0.2..3.0))
        })
        .collect();
    Parameters::for_layout(layout, beta, &bands, rng.random_range(-1.5..1.5)).unwrap()
}

/// Nested cohort drawn from `truth` with standard logistic noise.
fn draw_cohort(rng: &mut ChaCha8Rng, truth: &Parameters, layout: &StageLayout, n: usize) -> StageDataset {
    let counts = layout.new_feature_counts().to_vec();
    let records = (0..n)
        .map(|i| {
            let mut features = Vec::new();
            let mut labels = Vec::new();
            for stage in 1..=counts.len() {
                features.push((0..counts[stage - 1]).map(|_| rng.random_range(-2.0..2.0)).collect());
                let x = layout.design_row(stage, &features);
                let y = model::linear_predictor(truth, stage, &x).unwrap() + logistic_noise(rng);
                let label = truth.stage_cutoffs(stage).unwrap().classify(y);
                labels.push(Some(label));
                if label != Label::Indeterminate {
                    break;
                }
            }
            PatientRecord::new(format!("{i:04}"), features, labels)
        })
        .collect();
    StageDataset::new(layout.clone(), records).unwrap()
}

fn gradient_property(g: &mut Gate) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let instances = 50;
    let mut worst = 0.0f64;
    let mut ok = true;
    for _ in 0..instances {
        let layout = StageLayout::generic(vec![rng.random_range(1..=3), rng.random_range(1..=3)]).unwrap();
        let n = rng.random_range(5..=50);
        let truth = random_params(&mut rng, &layout);
        let data = draw_cohort(&mut rng, &truth, &layout, n);
        let at = random_params(&mut rng, &layout);
        let part = group_partition(&data).unwrap();
        let a = analytic_gradient(&at, &part).unwrap().to_flat();
        let f = finite_difference_gradient(&at, &part, 1e-5).unwrap().to_flat();
        for (x, y) in a.iter().zip(&f) {
            let rel = (x - y).abs() / x.abs().max(y.abs()).max(f64::MIN_POSITIVE);
            worst = worst.max(rel);
            ok &= rel < 1e-6;
        }
    }
    g.check(
        "gradient vs central differences",
        ok,
        format!("{instances} random K=2 instances, N<=50, h=1e-5, max componentwise relative error {worst:.2e} (< 1e-6)"),
    );
}

/// Dense Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..n {
            let m = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= m * a[c][k];
            }
            b[r] -= m * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// Binary logistic regression by Newton's method on `[x, 1]`.
fn newton_logistic(rows: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let p = rows[0].len() + 1;
    let mut b = vec![0.0; p];
    for _ in 0..100 {
        let mut g = vec![0.0; p];
        let mut h = vec![vec![0.0; p]; p];
        for (x, &yi) in rows.iter().zip(y) {
            let z: Vec<f64> = x.iter().copied().chain([1.0]).collect();
            let eta: f64 = z.iter().zip(&b).map(|(a, c)| a * c).sum();
            let pi = 1.0 / (1.0 + (-eta).exp());
            let w = pi * (1.0 - pi);
            for i in 0..p {
                g[i] += (yi - pi) * z[i];
                for j in 0..p {
                    h[i][j] += w * z[i] * z[j];
                }
            }
        }
        let d = solve(h, g);
        for (bi, di) in b.iter_mut().zip(&d) {
            *bi += di;
        }
        if d.iter().all(|v| v.abs() < 1e-14) {
            break;
        }
    }
    b
}

fn tight() -> FitOptions {
    FitOptions {
        gradient_tolerance: 1e-10,
        relative_objective_tolerance: 1e-16,
        max_iterations: 2000,
        ..FitOptions::default()
    }
}

/// Largest gap between cascade coefficients `(β, C)` and Newton's `(β, −intercept)`.
fn newton_gap(params: &Parameters, rows: &[Vec<f64>], y: &[f64]) -> f64 {
    let b = newton_logistic(rows, y);
    let Cutoffs::Single { cut } = params.cutoffs()[params.cutoffs().len() - 1] else {
        panic!("last stage must have a single cut");
    };
    let p = rows[0].len();
    params.beta()[..p]
        .iter()
        .zip(&b[..p])
        .map(|(x, y)| (x - y).abs())
        .chain([(cut + b[p]).abs()])
        .fold(0.0, f64::max)
}

fn stage_k_rows(data: &StageDataset) -> (Vec<Vec<f64>>, Vec<f64>) {
    let k = data.layout().num_stages();
    let view = data.stage_view(k);
    let rows = view.iter().map(|&i| data.design_row(i, k)).collect();
    let y = view.iter().map(|&i| data.records()[i].label(k).unwrap().value()).collect();
    (rows, y)
}

fn newton_oracle(g: &mut Gate) {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let layout = StageLayout::generic(vec![2, 2]).unwrap();
    let truth = Parameters::for_layout(&layout, vec![1.0, -0.5, 0.8, 1.2], &[(-1.5, 1.5)], 0.3).unwrap();
    let small = draw_cohort(&mut rng, &truth, &layout, 1500);
    let design = generate_cohort(&SimConfig { n_stage1: 3000, ..SimConfig::paper() }, 0).unwrap();

    let mut details = Vec::new();
    let mut ok = true;
    for (name, data) in [("random 2+2 design", &small), ("7-feature design", &design)] {
        let fit = fit_single_stage(data, 2, &tight()).unwrap();
        let (rows, y) = stage_k_rows(data);
        let gap = newton_gap(&fit.params, &rows, &y);
        ok &= fit.converged && gap < 1e-6;
        details.push(format!("{name} N2={} gap {gap:.2e}", rows.len()));
    }
    g.check(
        "oracle: last-stage fit vs Newton logistic regression",
        ok,
        format!("{} (< 1e-6)", details.join(", ")),
    );
}

/// Independent log-likelihood of a single three-category stage.
fn band_loglik(x: &[f64], labels: &[Label], beta: f64, lower: f64, upper: f64) -> f64 {
    if upper <= lower {
        return f64::NEG_INFINITY;
    }
    x.iter()
        .zip(labels)
        .map(|(&xi, l)| {
            let eta = beta * xi;
            let p = match l {
                Label::Healthy => logistic_cdf(lower - eta),
                Label::Indeterminate => logistic_cdf(upper - eta) - logistic_cdf(lower - eta),
                Label::Sick => 1.0 - logistic_cdf(upper - eta),
            };
            p.ln()
        })
        .sum()
}

fn grid_oracle(g: &mut Gate) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let layout = StageLayout::generic(vec![1, 1]).unwrap();
    let truth = Parameters::for_layout(&layout, vec![1.5, 1.0], &[(-1.0, 1.0)], 0.0).unwrap();
    let data = draw_cohort(&mut rng, &truth, &layout, 40);
    let fit = fit_single_stage(&data, 1, &tight()).unwrap();
    let x: Vec<f64> = data.records().iter().map(|r| r.features[0][0]).collect();
    let labels: Vec<Label> = data.records().iter().map(|r| r.label(1).unwrap()).collect();

    let mut best = (0.0, -1.0, 1.0);
    let mut best_ll = f64::NEG_INFINITY;
    for (step, half) in [(0.1, 50i32), (0.01, 15), (0.001, 15)] {
        let centre = best;
        let base = if step == 0.1 { (0.0, 0.0, 0.0) } else { centre };
        for i in -half..=half {
            for j in -half..=half {
                for k in -half..=half {
                    let cand = (
                        base.0 + step * i as f64,
                        base.1 + step * j as f64,
                        base.2 + step * k as f64,
                    );
                    let ll = band_loglik(&x, &labels, cand.0, cand.1, cand.2);
                    if ll > best_ll {
                        best_ll = ll;
                        best = cand;
                    }
                }
            }
        }
    }
    let Cutoffs::Band { lower, upper } = fit.params.cutoffs()[0] else {
        panic!("stage 1 must be a band");
    };
    let gap = [
        fit.params.beta()[0] - best.0,
        lower - best.1,
        upper - best.2,
    ]
    .iter()
    .fold(0.0f64, |m, v| m.max(v.abs()));
    g.check(
        "oracle: single-stage ordinal fit vs grid search",
        fit.converged && gap < 2e-3,
        format!(
            "N=40, grid optimum (β, L, U)=({:.3}, {:.3}, {:.3}) at resolution 1e-3, max gap {gap:.2e} < 2e-3",
            best.0, best.1, best.2
        ),
    );
}

struct Tolerances {
    label: &'static str,
    beta_mean: f64,
    cut_mean: f64,
    re_min: f64,
    re_max_shared: f64,
    mse_targets: (f64, f64),
    mse_factor: f64,
}

fn simulation_checks(g: &mut Gate, report: &MonteCarloReport, t: &Tolerances) {
    let tag = t.label;
    let joint = report.joint();
    let last = report.baseline(2).unwrap();
    let coef: Vec<_> = joint.parameters.iter().filter(|p| p.name.starts_with('x')).collect();
    let cuts: Vec<_> = joint.parameters.iter().filter(|p| !p.name.starts_with('x')).collect();
    g.check(
        &format!("{tag}: used replications"),
        report.excluded.is_empty() || report.excluded.len() * 20 <= report.config.replications,
        format!("{} of {} used", report.replications_used, report.config.replications),
    );

    let worst = coef.iter().map(|p| p.stats.bias.abs()).fold(0.0, f64::max);
    g.check(
        &format!("{tag}: joint coefficient means"),
        worst <= t.beta_mean,
        format!("max |mean - truth| {worst:.4} <= {}", t.beta_mean),
    );

    let worst = cuts.iter().map(|p| p.stats.bias.abs()).fold(0.0, f64::max);
    let means: Vec<String> = cuts.iter().map(|p| format!("{}={:.4}", p.name, p.stats.mean)).collect();
    g.check(
        &format!("{tag}: joint cutoff means"),
        worst <= t.cut_mean,
        format!("{} ; max |mean - truth| {worst:.4} <= {}", means.join(" "), t.cut_mean),
    );

    let s1 = report.stage_mse.iter().find(|m| m.stage == 1).unwrap();
    g.check(
        &format!("{tag}: stage-1 MSE joint < baseline"),
        s1.joint < s1.baseline,
        format!("joint {:.3e} < baseline {:.3e}", s1.joint, s1.baseline),
    );
    let within = |v: f64, target: f64| v <= target * t.mse_factor && v >= target / t.mse_factor;
    g.check(
        &format!("{tag}: stage-1 MSE magnitude"),
        within(s1.joint, t.mse_targets.0) && within(s1.baseline, t.mse_targets.1),
        format!(
            "joint {:.3e} vs {:.3e}, baseline {:.3e} vs {:.3e}, window factor {}",
            s1.joint, t.mse_targets.0, s1.baseline, t.mse_targets.1, t.mse_factor
        ),
    );

    let re: Vec<(String, f64)> = report
        .efficiency
        .iter()
        .filter(|r| r.parameter.starts_with('x'))
        .map(|r| (r.parameter.clone(), r.headline.unwrap_or(f64::NAN)))
        .collect();
    let min = re.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    let shared = report.config.new_feature_counts[0];
    let max_shared = re[..shared].iter().map(|r| r.1).fold(0.0, f64::max);
    let listed: Vec<String> = re.iter().map(|(n, v)| format!("{n}={v:.2}")).collect();
    g.check(
        &format!("{tag}: relative efficiency"),
        re.iter().all(|r| r.1 > 1.0) && min >= t.re_min && max_shared >= t.re_max_shared,
        format!(
            "{} ; min {min:.2} >= {}, shared max {max_shared:.2} >= {}",
            listed.join(" "),
            t.re_min,
            t.re_max_shared
        ),
    );

    let mut worse = Vec::new();
    for p in &coef {
        let b = last.get(&p.name).unwrap();
        if p.stats.std.unwrap() > b.stats.std.unwrap() {
            worse.push(p.name.clone());
        }
    }
    g.check(
        &format!("{tag}: joint std <= baseline std per coefficient"),
        worse.is_empty(),
        if worse.is_empty() {
            format!("all {} coefficients", coef.len())
        } else {
            format!("larger joint std for {}", worse.join(", "))
        },
    );

    let cj = joint.get("C2").unwrap().stats.std.unwrap();
    let cb = last.get("C2").unwrap().stats.std.unwrap();
    g.check(
        &format!("{tag}: std of C2 joint < baseline"),
        cj < cb,
        format!("{cj:.4} < {cb:.4}"),
    );
}

fn study(profile: Profile, dir: &std::path::Path) -> (MonteCarloReport, RunConfig) {
    let cfg = StudyConfig {
        profile: Some(profile),
        simulation: profile.sim_config(),
        fit: FitSettings::default(),
        jobs: 0,
        out: dir.to_path_buf(),
    };
    let run = RunConfig::Study(cfg.clone());
    (cmd_study(&cfg, &run).unwrap(), run)
}

fn paper_scale(g: &mut Gate) {
    let dir = tempfile::tempdir().unwrap();
    let t0 = Instant::now();
    let (report, _) = study(Profile::Paper, dir.path());
    println!("     paper profile: N1=10000, 100 replications in {:.1}s", t0.elapsed().as_secs_f64());
    simulation_checks(
        g,
        &report,
        &Tolerances {
            label: "paper",
            beta_mean: 0.1,
            cut_mean: 0.05,
            re_min: 1.2,
            re_max_shared: 5.0,
            mse_targets: (2.25e-6, 7.62e-6),
            mse_factor: 3.0,
        },
    );
}

fn desk_scale_and_determinism(g: &mut Gate) {
    let dir = tempfile::tempdir().unwrap();
    let t0 = Instant::now();
    let (report, _) = study(Profile::Desk, dir.path());
    let elapsed = t0.elapsed().as_secs_f64();
    let first: Vec<Vec<u8>> = STUDY_FILES.iter().map(|f| std::fs::read(dir.path().join(f)).unwrap()).collect();
    let (again, _) = study(Profile::Desk, dir.path());
    let second: Vec<Vec<u8>> = STUDY_FILES.iter().map(|f| std::fs::read(dir.path().join(f)).unwrap()).collect();

    g.check("desk: runtime", elapsed < 60.0, format!("N1=2000, 30 replications in {elapsed:.1}s < 60s"));
    // MSE of a Monte Carlo mean scales as 1/(N·R): (10000/2000)·(100/30)
    let scale = 5.0 * 100.0 / 30.0;
    simulation_checks(
        g,
        &report,
        &Tolerances {
            label: "desk",
            beta_mean: 0.2,
            cut_mean: 0.1,
            re_min: 1.1,
            re_max_shared: 2.5,
            mse_targets: (2.25e-6 * scale, 7.62e-6 * scale),
            mse_factor: 6.0,
        },
    );
    let same = first == second;
    let bytes: usize = first.iter().map(Vec::len).sum();
    g.check(
        "determinism: study rerun with the same seed",
        same && serde_json::to_string(&report).unwrap() == serde_json::to_string(&again).unwrap(),
        format!("{} files, {bytes} bytes, byte-identical={same}", STUDY_FILES.len()),
    );
}

fn metrics_battery(g: &mut Gate) {
    let cases: [(ConfusionCounts, MetricReport); 3] = [
        (
            ConfusionCounts { tp: 1, fp: 0, tn: 2, fn_: 1 },
            MetricReport {
                sensitivity: Some(0.5),
                specificity: Some(1.0),
                ppv: Some(1.0),
                npv: Some(2.0 / 3.0),
                precision: Some(1.0),
                recall: Some(0.5),
                f1: Some(2.0 / 3.0),
                prevalence: Some(0.5),
                detection_rate: Some(0.25),
                detection_prevalence: Some(0.25),
                balanced_accuracy: Some(0.75),
            },
        ),
        (
            ConfusionCounts { tp: 6, fp: 2, tn: 8, fn_: 2 },
            MetricReport {
                sensitivity: Some(0.75),
                specificity: Some(0.8),
                ppv: Some(0.75),
                npv: Some(0.8),
                precision: Some(0.75),
                recall: Some(0.75),
                f1: Some(0.75),
                prevalence: Some(8.0 / 18.0),
                detection_rate: Some(6.0 / 18.0),
                detection_prevalence: Some(8.0 / 18.0),
                balanced_accuracy: Some(0.775),
            },
        ),
        (
            ConfusionCounts { tp: 0, fp: 3, tn: 5, fn_: 0 },
            MetricReport {
                sensitivity: None,
                specificity: Some(0.625),
                ppv: Some(0.0),
                npv: Some(1.0),
                precision: Some(0.0),
                recall: None,
                f1: None,
                prevalence: Some(0.0),
                detection_rate: Some(0.0),
                detection_prevalence: Some(0.375),
                balanced_accuracy: None,
            },
        ),
    ];
    let mut mismatches = Vec::new();
    for (i, (counts, want)) in cases.iter().enumerate() {
        let got = classification_report(counts);
        if got != *want {
            mismatches.push(format!("matrix {}: got {got:?}", i + 1));
        }
    }
    g.check(
        "metrics battery",
        mismatches.is_empty(),
        if mismatches.is_empty() {
            "3 fixed matrices reproduced exactly; 0/0 metrics absent".into()
        } else {
            mismatches.join("; ")
        },
    );
}

fn optimizer_behavior(g: &mut Gate) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut fits = 0;
    let mut bad = 0;
    let mut steps = 0;
    while fits < 100 {
        let config = SimConfig {
            n_stage1: rng.random_range(150..600),
            true_beta: (0..7).map(|_| rng.random_range(-3.0..3.0)).collect(),
            seed: rng.random(),
            ..SimConfig::paper()
        };
        let data = generate_cohort(&config, 0).unwrap();
        let Ok(fit) = fit_joint(&data, &FitOptions::default()) else { continue };
        fits += 1;
        steps += fit.objective_trace.len() - 1;
        if fit.objective_trace.windows(2).any(|w| w[1] < w[0]) {
            bad += 1;
        }
    }
    g.check(
        "optimizer: log-likelihood trace monotone",
        bad == 0,
        format!("{fits} random fits, {steps} accepted steps, {bad} fits with an increase in -loglik"),
    );

    let config = SimConfig { n_stage1: 2000, ..SimConfig::paper() };
    let layout = config.layout().unwrap();
    let data = generate_cohort(&config, 0).unwrap();
    let joint = fit_joint(&data, &FitOptions::default()).unwrap().params.num_free();
    let staged: usize = fit_baseline_stagewise(&data, &FitOptions::default())
        .unwrap()
        .iter()
        .map(|f| f.params.num_free())
        .sum();
    g.check(
        "optimizer: free parameter counts",
        (joint, staged) == (10, 14)
            && (layout.joint_parameter_count(), layout.stagewise_parameter_count()) == (10, 14),
        format!("joint {joint}, stagewise {staged} (expected 10 vs 14)"),
    );
}

fn main() {
    let mut g = Gate { results: Vec::new() };
    let t0 = Instant::now();
    gradient_property(&mut g);
    newton_oracle(&mut g);
    grid_oracle(&mut g);
    metrics_battery(&mut g);
    optimizer_behavior(&mut g);
    desk_scale_and_determinism(&mut g);
    paper_scale(&mut g);

    let failed: Vec<&str> = g.results.iter().filter(|r| !r.1).map(|r| r.0.as_str()).collect();
    let unexpected: Vec<&str> = failed.iter().copied().filter(|f| !KNOWN_DEVIATIONS.contains(f)).collect();
    println!(
        "acceptance: {} passed, {} failed ({} known deviation(s)) in {:.1}s",
        g.results.len() - failed.len(),
        failed.len(),
        failed.len() - unexpected.len(),
        t0.elapsed().as_secs_f64()
    );
    if !unexpected.is_empty() {
        println!("unexpected failures: {}", unexpected.join(", "));
        std::process::exit(1);
    }
}
