//! Task execution: builds the discrete system, runs one task and writes the
//! record and tables.

use std::path::Path;
use std::sync::Arc;

use ergodic_core::domain::Grid;
use ergodic_core::evolution::{
    classify_boundedness, evolve_dynamic_bc, evolve_fixed_bc, Boundedness, EvolutionError, EvolutionOptions, Trajectory,
};
use ergodic_core::models::{check_assumptions, HamiltonianSpec};
use ergodic_core::reflected_sde::{
    estimate_local_time_growth, estimate_mu_formula, ControlledDiffusion, FeedbackTable, McOptions, Policy, SdeError,
};
use ergodic_core::scheme::DiscreteSystem;
use ergodic_core::stationary::{ergodic_solve, find_fixed_point, mu_curve, ErgodicResult};
use serde_json::json;

use crate::config::{RunConfig, Task};
use crate::record::{num, write_json, write_table, Check, ResultRecord, SCHEMA_VERSION};
use crate::CliError;

fn failed(e: impl std::fmt::Display) -> CliError {
    CliError::TaskFailed(e.to_string())
}

fn io(e: impl std::fmt::Display) -> CliError {
    CliError::Io(e.to_string())
}

fn json_of<T: serde::Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("results serialize to JSON")
}

/// File name, header and rows of one CSV table.
type Table = (String, Vec<&'static str>, Vec<Vec<String>>);

/// What a task produced before it is written out.
struct Output {
    results: serde_json::Value,
    checks: Vec<Check>,
    tables: Vec<Table>,
}

fn build_system(cfg: &RunConfig) -> Result<DiscreteSystem, CliError> {
    let mut grid = Grid::new(cfg.domain.clone(), cfg.grid.n as usize).map_err(failed)?;
    if let Some(p) = &cfg.grid.reference_point {
        grid = grid.with_reference_point(p).map_err(failed)?;
    }
    let mut sys = DiscreteSystem::new(Arc::new(grid), cfg.operator.clone(), cfg.boundary.clone()).map_err(failed)?;
    if let Some(f) = cfg.grid.half_cell_factor {
        sys = sys.with_half_cell_factor(f);
    }
    Ok(sys)
}

fn solve(sys: &DiscreteSystem, cfg: &RunConfig, lambda: f64) -> Result<ErgodicResult, CliError> {
    ergodic_solve(sys, lambda, &cfg.schedule, &cfg.solver).map_err(failed)
}

fn on_grid(sys: &DiscreteSystem, f: &ergodic_core::models::ScalarField) -> Vec<f64> {
    let g = sys.grid();
    (0..g.len()).map(|i| f.eval(g.point(i))).collect()
}

fn point_columns(dim: usize) -> Vec<&'static str> {
    if dim == 1 {
        vec!["x"]
    } else {
        vec!["x", "y"]
    }
}

/// Runs the configured task and writes `result.<task>.record` plus its
/// tables into `out_dir`.
pub fn run(cfg: &RunConfig, out_dir: &Path) -> Result<ResultRecord, CliError> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(io)?;
    let out = match &cfg.task {
        Task::CheckAssumptions { n_samples } => task_check(cfg, *n_samples as usize),
        Task::Solve { lambda } => task_solve(cfg, *lambda),
        Task::MuCurve { lambdas } => task_mu_curve(cfg, lambdas),
        Task::FixedPoint { bracket, tol } => task_fixed_point(cfg, *bracket, *tol),
        Task::EvolveFixed { .. } => task_evolve_fixed(cfg),
        Task::EvolveDynamic { .. } => task_evolve_dynamic(cfg),
        Task::SdeVerify { .. } => task_sde(cfg),
    }?;
    let mut tables = vec![];
    for (name, header, rows) in &out.tables {
        write_table(&out_dir.join(name), header, rows).map_err(io)?;
        tables.push(name.clone());
    }
    let record = ResultRecord {
        schema_version: SCHEMA_VERSION,
        task: cfg.task.name().to_string(),
        seed: cfg.seed,
        config: cfg.clone(),
        results: out.results,
        checks: out.checks,
        tables,
    };
    write_json(&out_dir.join(format!("result.{}.record", record.task)), &record).map_err(io)?;
    Ok(record)
}

fn task_check(cfg: &RunConfig, n: usize) -> Result<Output, CliError> {
    let report = check_assumptions(&cfg.operator, &cfg.boundary, &cfg.domain, n, cfg.seed);
    let checks = report
        .probes
        .iter()
        .map(|p| {
            let detail = match &p.note {
                Some(note) if p.samples == 0 => format!("skipped: {note}"),
                _ => format!("worst violation {:.3e} (tol {:.1e}) over {} samples", p.violation, p.tolerance, p.samples),
            };
            Check::new(format!("assumption {}", p.name), p.passed, detail)
        })
        .collect();
    let rows = report
        .probes
        .iter()
        .map(|p| {
            vec![
                p.name.clone(),
                p.passed.to_string(),
                num(p.violation),
                num(p.tolerance),
                p.estimate.map(num).unwrap_or_default(),
                p.samples.to_string(),
            ]
        })
        .collect();
    Ok(Output {
        results: json_of(&report),
        checks,
        tables: vec![("probes.csv".into(), vec!["probe", "passed", "violation", "tolerance", "estimate", "samples"], rows)],
    })
}

fn solution_checks(r: &ErgodicResult) -> Vec<Check> {
    vec![
        Check::new("stationary residual", r.residual <= 1e-6, format!("sup residual {:.3e} (tol 1e-6)", r.residual)),
        Check::new("discount bound", r.bound_ok, "sup |alpha u_alpha| stays within twice its first value along the schedule"),
        Check::new(
            "observed order",
            !r.order_flag,
            match r.observed_order {
                Some(p) => format!("extrapolation order {p:.3} (expected within [0.5, 2.5])"),
                None => "not enough schedule points to estimate".into(),
            },
        ),
    ]
}

fn task_solve(cfg: &RunConfig, lambda: f64) -> Result<Output, CliError> {
    let sys = build_system(cfg)?;
    let r = solve(&sys, cfg, lambda)?;
    let g = sys.grid();
    let mut header = point_columns(g.dim());
    header.push("u");
    let solution = (0..g.len())
        .map(|i| g.point(i).iter().map(|v| num(*v)).chain(std::iter::once(num(r.u[i]))).collect())
        .collect();
    let schedule = r
        .trace
        .iter()
        .map(|s| vec![num(s.alpha), num(s.eps), num(s.sup_alpha_u), num(s.mu_estimate), num(s.residual), s.iterations.to_string()])
        .collect();
    let mut results = json_of(&r);
    results.as_object_mut().expect("object").remove("u");
    Ok(Output {
        checks: solution_checks(&r),
        results,
        tables: vec![
            ("solution.csv".into(), header, solution),
            ("schedule.csv".into(), vec!["alpha", "eps", "sup_alpha_u", "mu_estimate", "residual", "iterations"], schedule),
        ],
    })
}

fn task_mu_curve(cfg: &RunConfig, lambdas: &[f64]) -> Result<Output, CliError> {
    let sys = build_system(cfg)?;
    let curve = mu_curve(&sys, lambdas, &cfg.schedule, &cfg.solver).map_err(failed)?;
    Ok(curve_output(curve))
}

fn curve_output(curve: ergodic_core::stationary::MuCurve) -> Output {
    let mut checks = vec![];
    if curve.violations.is_empty() {
        checks.push(Check::new("mu-curve monotone", true, format!("nonincreasing over {} points", curve.points.len())));
    }
    for (a, b, inc) in &curve.violations {
        checks.push(Check::new(
            "mu-curve monotone",
            false,
            format!("mu increases by {inc:.3e} between lambda = {a} and lambda = {b}"),
        ));
    }
    let unbounded: Vec<f64> = curve.points.iter().filter(|p| !p.bound_ok).map(|p| p.lambda).collect();
    checks.push(Check::new(
        "discount bound",
        unbounded.is_empty(),
        if unbounded.is_empty() { "held at every lambda".to_string() } else { format!("violated at lambda = {unbounded:?}") },
    ));
    let rows = curve
        .points
        .iter()
        .map(|p| vec![num(p.lambda), num(p.mu), num(p.mu_extrapolated), num(p.residual)])
        .collect();
    Output {
        results: json_of(&curve),
        checks,
        tables: vec![("mu_curve.csv".into(), vec!["lambda", "mu", "mu_extrapolated", "residual"], rows)],
    }
}

fn task_fixed_point(cfg: &RunConfig, bracket: [f64; 2], tol: f64) -> Result<Output, CliError> {
    let sys = build_system(cfg)?;
    let fp = find_fixed_point(&sys, (bracket[0], bracket[1]), tol, &cfg.schedule, &cfg.solver).map_err(failed)?;
    let checks = vec![Check::new(
        "fixed point",
        fp.chi.abs() <= (10.0 * tol).max(1e-6),
        format!("lambda = {:.10}, |lambda - mu(lambda)| = {:.3e} after {} solves", fp.lambda, fp.chi.abs(), fp.evaluations),
    )];
    let rows = vec![vec![num(fp.lambda), num(fp.mu), num(fp.chi)]];
    Ok(Output {
        results: json_of(&fp),
        checks,
        tables: vec![("fixed_point.csv".into(), vec!["lambda", "mu", "chi"], rows)],
    })
}

fn trajectory_table(tr: &Trajectory) -> Table {
    let mut header = vec!["t", "sup", "inf", "mean", "x0_value", "osc_from_initial"];
    if tr.reference_distance.is_some() {
        header.push("reference_distance");
    }
    let rows = (0..tr.times.len())
        .map(|k| {
            let mut r = vec![num(tr.times[k]), num(tr.sup[k]), num(tr.inf[k]), num(tr.mean[k]), num(tr.x0_value[k]), num(tr.osc_from_initial[k])];
            if let Some(d) = &tr.reference_distance {
                r.push(num(d[k]));
            }
            r
        })
        .collect();
    ("trajectory.csv".into(), header, rows)
}

fn trajectory_results(tr: &Trajectory) -> serde_json::Value {
    let mut v = json_of(tr);
    let o = v.as_object_mut().expect("object");
    // the time series live in the table
    for k in ["times", "sup", "inf", "mean", "x0_value", "osc_from_initial", "reference_distance"] {
        o.remove(k);
    }
    v
}

fn classify(tr: &Trajectory, slope_tol: f64) -> (Option<Boundedness>, Check) {
    match classify_boundedness(tr, slope_tol) {
        Ok(b) => (Some(b), Check::new("horizon", true, format!("T = {} >= 10 relaxation times ({:.3})", tr.horizon, 10.0 * tr.relaxation_time))),
        Err(EvolutionError::HorizonTooShort { horizon, required }) => {
            (None, Check::new("horizon", false, format!("T = {horizon} is shorter than 10 relaxation times ({required:.3})")))
        }
        Err(e) => (None, Check::new("horizon", false, e.to_string())),
    }
}

fn task_evolve_fixed(cfg: &RunConfig) -> Result<Output, CliError> {
    let Task::EvolveFixed { lambda, mu, horizon, dt, implicit, initial, perturbation, slope_tol } = &cfg.task else {
        unreachable!()
    };
    let sys = build_system(cfg)?;
    let st = solve(&sys, cfg, *lambda)?;
    let level = mu.unwrap_or(st.mu);
    let mut u0 = match initial {
        Some(f) => on_grid(&sys, f),
        None => st.u.clone(),
    };
    if let Some(p) = perturbation {
        for (v, d) in u0.iter_mut().zip(on_grid(&sys, p)) {
            *v += d;
        }
    }
    let opts = EvolutionOptions { dt: *dt, implicit: *implicit, reference: Some(st.u.clone()), ..Default::default() };
    let tr = evolve_fixed_bc(&sys, *lambda, level, &u0, *horizon, &opts).map_err(failed)?;
    let (verdict, horizon_check) = classify(&tr, *slope_tol);
    let offset = level - st.mu;
    let mut checks = vec![horizon_check];
    if let Some(b) = verdict {
        let expected_bounded = offset.abs() <= 1e-6;
        let consistent = match b {
            Boundedness::Bounded => expected_bounded,
            Boundedness::Growing(s) => !expected_bounded && s.signum() == offset.signum(),
        };
        checks.push(Check::new(
            "boundedness",
            consistent,
            format!("{b:?} with mu - mu(lambda) = {offset:+.3e} (tail slope {:+.6})", tr.mean_fit.slope),
        ));
    }
    let mut results = trajectory_results(&tr);
    let o = results.as_object_mut().expect("object");
    o.insert("lambda".into(), json!(lambda));
    o.insert("mu".into(), json!(level));
    o.insert("mu_ergodic".into(), json!(st.mu));
    o.insert("boundedness".into(), json_of(&verdict));
    Ok(Output { results, checks, tables: vec![trajectory_table(&tr)] })
}

fn task_evolve_dynamic(cfg: &RunConfig) -> Result<Output, CliError> {
    let Task::EvolveDynamic { horizon, dt, implicit, initial } = &cfg.task else { unreachable!() };
    let sys = build_system(cfg)?;
    let phi0 = match initial {
        Some(f) => on_grid(&sys, f),
        None => vec![0.0; sys.len()],
    };
    let opts = EvolutionOptions { dt: *dt, implicit: *implicit, ..Default::default() };
    let tr = evolve_dynamic_bc(&sys, &phi0, *horizon, &opts).map_err(failed)?;
    let (_, horizon_check) = classify(&tr, f64::INFINITY);
    let rate = tr.x0_value.last().copied().unwrap_or(f64::NAN) / tr.horizon;
    let mut results = trajectory_results(&tr);
    let o = results.as_object_mut().expect("object");
    o.insert("rate".into(), json!(rate));
    o.insert("tail_slope".into(), json!(tr.x0_fit.slope));
    let checks = vec![
        horizon_check,
        Check::new("rate", rate.is_finite(), format!("phi(x0, T) / T = {rate:.6}, tail slope {:.6}", tr.x0_fit.slope)),
    ];
    Ok(Output { results, checks, tables: vec![trajectory_table(&tr)] })
}

fn task_sde(cfg: &RunConfig) -> Result<Output, CliError> {
    let Task::SdeVerify { lambda, x, times, n_paths, dt, diffusion, compare_pde } = &cfg.task else { unreachable!() };
    let from_pde = diffusion.is_none();
    let diff = match diffusion {
        Some(d) => d.clone(),
        None => ControlledDiffusion::from_pde(&cfg.operator, &cfg.boundary, &cfg.domain).map_err(failed)?,
    };
    let x = x.clone().unwrap_or_else(|| cfg.domain.centroid());
    let opts = McOptions { n_paths: *n_paths as usize, dt: *dt, seed: cfg.seed };
    let pde = if *compare_pde && from_pde {
        let sys = build_system(cfg)?;
        let r = solve(&sys, cfg, *lambda)?;
        Some((sys, r))
    } else {
        None
    };
    let mut policies: Vec<Policy> = (0..diff.controls.len()).map(Policy::Fixed).collect();
    let mut main_policy = Policy::Fixed(0);
    if let (Some((sys, r)), true, HamiltonianSpec::Hjb { .. }) = (&pde, diff.controls.len() > 1, &cfg.operator) {
        let table = FeedbackTable::from_solution(&diff, sys.grid_arc().clone(), &r.u).map_err(failed)?;
        main_policy = Policy::Feedback(table);
        policies.push(main_policy.clone());
    }
    let growth = estimate_local_time_growth(&diff, &x, times, &policies, &opts).map_err(failed)?;
    let mut checks = vec![Check::new(
        "local-time growth probe",
        growth.probe_passed,
        format!("slope of inf E|k|_t: {:.6} +- {:.6}", growth.slope, growth.slope_se),
    )];
    let formula = match estimate_mu_formula(&diff, *lambda, &x, times, &main_policy, &opts) {
        Ok(f) => Some(f),
        Err(SdeError::DegenerateDenominator { mean_local_time, slope }) => {
            checks.push(Check::new(
                "representation formula",
                false,
                format!("degenerate denominator: local-time growth probe failed (E|k|_T = {mean_local_time:.3e}, slope {slope:.3e})"),
            ));
            None
        }
        Err(e) => return Err(failed(e)),
    };
    let mut rows = vec![];
    for (k, t) in growth.times.iter().enumerate() {
        let (m, s) = formula
            .as_ref()
            .and_then(|f| f.per_time.iter().find(|p| p.t == *t))
            .map_or((String::new(), String::new()), |p| (num(p.mu), num(p.se)));
        rows.push(vec![num(*t), num(growth.mean[k]), num(growth.se[k]), m, s]);
    }
    if let (Some(f), Some((_, r))) = (&formula, &pde) {
        let tol = (3.0 * f.se).max(0.02);
        let err = (f.mu - r.mu).abs();
        checks.push(Check::new(
            "representation formula vs PDE",
            err <= tol,
            format!("mu_hat = {:.6} +- {:.6}, PDE mu = {:.6}, |diff| = {err:.3e} (tol {tol:.3e})", f.mu, f.se, r.mu),
        ));
    }
    let results = json!({
        "lambda": lambda,
        "x": x,
        "n_paths": opts.n_paths,
        "dt": opts.dt,
        "seed": opts.seed,
        "local_time_growth": json_of(&growth),
        "formula": json_of(&formula),
        "pde_mu": pde.as_ref().map(|p| p.1.mu),
    });
    Ok(Output {
        results,
        checks,
        tables: vec![("sde_estimates.csv".into(), vec!["t", "mean_local_time", "local_time_se", "mu_hat", "mu_se"], rows)],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ergodic_core::stationary::{MuCurve, MuPoint};

    #[test]
    fn monotonicity_failure_names_the_pair() {
        let p = |lambda: f64, mu: f64| MuPoint { lambda, mu, mu_extrapolated: mu, residual: 0.0, refined: true, bound_ok: true, order_flag: false };
        let curve = MuCurve {
            points: vec![p(0.0, 0.0), p(1.0, 0.1), p(2.0, -1.0)],
            nonincreasing: false,
            violations: vec![(0.0, 1.0, 0.1)],
            modulus: 1.1,
        };
        let out = curve_output(curve);
        let fail = out.checks.iter().find(|c| !c.passed).unwrap();
        assert!(fail.detail.contains("lambda = 0") && fail.detail.contains("lambda = 1"), "{}", fail.detail);
    }
}
