use std::path::Path;
use std::process::Command;

use ergodic_cli::config::RunConfig;
use ergodic_cli::record::{parse_record, read_record, Check, ResultRecord, SCHEMA_VERSION};
use ergodic_cli::{emit_report, run::run, CliError};

const INTERVAL: &str = r#"
[domain]
kind = "interval"
lo = 0.0
hi = 1.0
"#;

const LAPLACIAN: &str = r#"
[operator]
kind = "linear"
diffusion = { kind = "scalar", field = { kind = "constant", value = 1.0 } }
"#;

fn config(body: &str) -> RunConfig {
    RunConfig::from_toml(body).unwrap()
}

fn pucci_curve(n: i64) -> String {
    format!(
        r#"{INTERVAL}
[grid]
n = {n}

[operator]
kind = "pucci"
kappa = 1.0
big_k = 2.0

[boundary]
kind = "linear_oblique"

[task]
kind = "mu-curve"
lambdas = [-2.0, 0.0, 1.0]
"#
    )
}

fn column(path: &Path, name: &str) -> Vec<f64> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let idx = r.headers().unwrap().iter().position(|h| h == name).unwrap();
    r.records().map(|row| row.unwrap()[idx].parse().unwrap()).collect()
}

fn ergodic() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ergodic"))
}

#[test]
fn mu_curve_table_matches_known_values() {
    let dir = tempfile::tempdir().unwrap();
    let rec = run(&config(&pucci_curve(101)), dir.path()).unwrap();
    assert_eq!(rec.tables, vec!["mu_curve.csv"]);
    let mu = column(&dir.path().join("mu_curve.csv"), "mu");
    for (got, want) in mu.iter().zip([0.5, 0.0, -0.5]) {
        assert!((got - want).abs() <= 1e-3, "{mu:?}");
    }
    assert!(rec.checks.iter().all(|c| c.passed));
    let back = read_record(&dir.path().join("result.mu-curve.record")).unwrap();
    assert_eq!(back, rec);
}

#[test]
fn fixed_point_of_linear_problem() {
    let body = format!(
        r#"{INTERVAL}{LAPLACIAN}
[grid]
n = 201

[boundary]
kind = "linear_oblique"
offset = {{ kind = "affine", value = 1.0, gradient = [1.0] }}

[task]
kind = "fixed-point"
bracket = [-2.0, 3.0]
"#
    );
    let dir = tempfile::tempdir().unwrap();
    run(&config(&body), dir.path()).unwrap();
    let lambda = column(&dir.path().join("fixed_point.csv"), "lambda")[0];
    assert!((lambda - 1.0).abs() <= 1e-3, "{lambda}");
}

#[test]
fn negative_grid_size_is_rejected_by_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, pucci_curve(-5)).unwrap();
    let out = ergodic().arg(&cfg).arg("--output-dir").arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let text = std::fs::read_to_string(dir.path().join("error.record")).unwrap();
    let err: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(err["kind"], "ConfigInvalid");
    assert_eq!(err["schema_version"], SCHEMA_VERSION);
    let v = err["violations"].as_array().unwrap();
    assert!(v.iter().any(|s| s.as_str().unwrap().contains("grid.n")), "{v:?}");
    assert!(!dir.path().join("result.mu-curve.record").exists());
}

#[test]
fn unknown_keys_are_rejected() {
    let body = pucci_curve(11).replace("[grid]", "[grid]\nresolution = 3");
    match RunConfig::from_toml(&body) {
        Err(CliError::ConfigInvalid(v)) => assert!(v[0].contains("resolution"), "{v:?}"),
        other => panic!("{other:?}"),
    }
    assert_eq!(CliError::ConfigInvalid(vec![]).exit_code(), 2);
    assert_eq!(CliError::TaskFailed(String::new()).exit_code(), 3);
}

#[test]
fn reruns_are_byte_identical() {
    let body = format!(
        r#"{INTERVAL}{LAPLACIAN}
seed = 5

[grid]
n = 21

[boundary]
kind = "linear_oblique"

[task]
kind = "sde-verify"
lambda = 1.0
times = [0.5, 1.0]
n_paths = 200
dt = 1e-3
"#
    )
    // top-level keys must precede the first table
    .replacen("seed = 5\n", "", 1);
    let body = format!("seed = 5\n{body}");
    let cfg_dir = tempfile::tempdir().unwrap();
    let cfg = cfg_dir.path().join("run.toml");
    std::fs::write(&cfg, &body).unwrap();
    let outs: Vec<_> = [1, 2]
        .iter()
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            let st = ergodic().arg(&cfg).arg("--output-dir").arg(dir.path()).arg("--quiet").status().unwrap();
            assert!(st.success());
            dir
        })
        .collect();
    for f in ["sde_estimates.csv", "result.sde-verify.record"] {
        let a = std::fs::read(outs[0].path().join(f)).unwrap();
        let b = std::fs::read(outs[1].path().join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between runs");
    }
    // a different seed changes the estimates
    let dir = tempfile::tempdir().unwrap();
    ergodic().arg(&cfg).arg("--output-dir").arg(dir.path()).arg("--seed").arg("6").arg("--quiet").status().unwrap();
    let rec = read_record(&dir.path().join("result.sde-verify.record")).unwrap();
    assert_eq!(rec.seed, 6);
    assert_ne!(std::fs::read(dir.path().join("sde_estimates.csv")).unwrap(), std::fs::read(outs[0].path().join("sde_estimates.csv")).unwrap());
}

#[test]
fn unknown_schema_versions_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let rec = run(&config(&pucci_curve(21)), dir.path()).unwrap();
    let mut v = serde_json::to_value(&rec).unwrap();
    v["schema_version"] = 999.into();
    let err = parse_record(&v.to_string()).unwrap_err();
    assert!(err.to_string().contains("999"), "{err}");
    v.as_object_mut().unwrap().remove("schema_version");
    assert!(parse_record(&v.to_string()).is_err());
}

#[test]
fn report_lists_failed_checks_without_touching_the_record() {
    let rec = ResultRecord {
        schema_version: SCHEMA_VERSION,
        task: "mu-curve".into(),
        seed: 0,
        config: config(&pucci_curve(21)),
        results: serde_json::Value::Null,
        checks: vec![
            Check::new("discount bound", true, "held"),
            Check::new("mu-curve monotone", false, "mu increases by 1.000e-1 between lambda = 0 and lambda = 1"),
        ],
        tables: vec![],
    };
    let before = rec.clone();
    let report = emit_report(&rec);
    assert!(report.contains("FAIL mu-curve monotone: mu increases by 1.000e-1 between lambda = 0 and lambda = 1"), "{report}");
    assert!(report.contains("PASS discount bound"));
    assert!(report.contains("2 checks, 1 failed"));
    assert_eq!(rec, before);
}

#[test]
fn degenerate_diffusion_fails_the_local_time_probe() {
    // zero covariance and zero drift: paths never reach the boundary
    let body = format!(
        r#"{INTERVAL}{LAPLACIAN}
[grid]
n = 21

[boundary]
kind = "linear_oblique"

[task]
kind = "sde-verify"
lambda = 1.0
times = [0.5, 1.0]
n_paths = 50
dt = 1e-3

[task.diffusion]
domain = {{ kind = "interval", lo = 0.0, hi = 1.0 }}
controls = [{{ diffusion = {{ kind = "scalar", field = {{ kind = "constant", value = 0.0 }} }} }}]
"#
    );
    let dir = tempfile::tempdir().unwrap();
    let rec = run(&config(&body), dir.path()).unwrap();
    let probe = rec.checks.iter().find(|c| c.name == "local-time growth probe").unwrap();
    assert!(!probe.passed);
    let formula = rec.checks.iter().find(|c| c.name == "representation formula").unwrap();
    assert!(!formula.passed && formula.detail.contains("probe failed"), "{}", formula.detail);
    assert!(emit_report(&rec).contains("FAIL local-time growth probe"));
}

#[test]
fn evolution_and_assumption_tasks_run() {
    let dir = tempfile::tempdir().unwrap();
    let evolve = format!(
        r#"{INTERVAL}{LAPLACIAN}
[grid]
n = 41

[boundary]
kind = "linear_oblique"

[task]
kind = "evolve-fixed"
lambda = 0.5
mu = -0.3
horizon = 5.0
"#
    );
    let rec = run(&config(&evolve), dir.path()).unwrap();
    assert!(rec.checks.iter().all(|c| c.passed), "{}", emit_report(&rec));
    // boundary level below mu(0.5) = -0.25: the solution drifts downward
    let slope = rec.results["boundedness"]["Growing"].as_f64().unwrap();
    assert!(slope < -0.01, "{slope}");
    let short = evolve.replace("horizon = 5.0", "horizon = 0.5");
    let rec = run(&config(&short), dir.path()).unwrap();
    assert!(!rec.checks.iter().find(|c| c.name == "horizon").unwrap().passed);

    let check = pucci_curve(11).replace("kind = \"mu-curve\"\nlambdas = [-2.0, 0.0, 1.0]", "kind = \"check-assumptions\"\nn_samples = 200");
    let rec = run(&config(&check), dir.path()).unwrap();
    assert!(!rec.checks.is_empty() && rec.checks.iter().all(|c| c.passed), "{}", emit_report(&rec));
    assert!(dir.path().join("probes.csv").exists());
}

#[test]
fn example_configs_are_valid() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let cfg = RunConfig::load(&path).unwrap();
            assert_eq!(cfg.violations(), Vec::<String>::new(), "{}", path.display());
            seen += 1;
        }
    }
    assert!(seen >= 4);
}
