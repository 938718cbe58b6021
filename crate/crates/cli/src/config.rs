//! Run configuration: one TOML file, one task.

use std::path::{Path, PathBuf};

use ergodic_core::domain::DomainSpec;
use ergodic_core::models::{BoundaryOperatorSpec, HamiltonianSpec, ScalarField};
use ergodic_core::reflected_sde::ControlledDiffusion;
use ergodic_core::stationary::{Schedule, SolverOptions};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub domain: DomainSpec,
    pub grid: GridConfig,
    /// Interior operator `F`.
    pub operator: HamiltonianSpec,
    /// Boundary operator `L`.
    pub boundary: BoundaryOperatorSpec,
    pub task: Task,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Nodes per axis. Signed so that a negative value is reported as a
    /// violation rather than a parse error.
    pub n: i64,
    /// Node closest to this point anchors the normalization `u(x0) = 0`.
    #[serde(default)]
    pub reference_point: Option<Vec<f64>>,
    #[serde(default)]
    pub half_cell_factor: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub dir: Option<PathBuf>,
}

fn default_samples() -> i64 {
    2000
}

fn default_bracket() -> [f64; 2] {
    [-1.0, 1.0]
}

fn default_tol() -> f64 {
    1e-6
}

fn default_slope_tol() -> f64 {
    0.01
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Task {
    CheckAssumptions {
        #[serde(default = "default_samples")]
        n_samples: i64,
    },
    Solve {
        lambda: f64,
    },
    MuCurve {
        lambdas: Vec<f64>,
    },
    FixedPoint {
        #[serde(default = "default_bracket")]
        bracket: [f64; 2],
        #[serde(default = "default_tol")]
        tol: f64,
    },
    EvolveFixed {
        lambda: f64,
        /// Boundary level; the ergodic value `mu(lambda)` when absent.
        #[serde(default)]
        mu: Option<f64>,
        horizon: f64,
        #[serde(default)]
        dt: Option<f64>,
        #[serde(default)]
        implicit: bool,
        /// Initial data; the stationary solution when absent.
        #[serde(default)]
        initial: Option<ScalarField>,
        /// Added to the initial data.
        #[serde(default)]
        perturbation: Option<ScalarField>,
        #[serde(default = "default_slope_tol")]
        slope_tol: f64,
    },
    EvolveDynamic {
        horizon: f64,
        #[serde(default)]
        dt: Option<f64>,
        #[serde(default)]
        implicit: bool,
        /// Initial data; zero when absent.
        #[serde(default)]
        initial: Option<ScalarField>,
    },
    SdeVerify {
        lambda: f64,
        /// Starting point; the domain centroid when absent.
        #[serde(default)]
        x: Option<Vec<f64>>,
        times: Vec<f64>,
        n_paths: i64,
        dt: f64,
        /// Explicit diffusion; derived from the operators when absent.
        #[serde(default)]
        diffusion: Option<ControlledDiffusion>,
        /// Cross-check against the discrete `mu(lambda)`.
        #[serde(default = "default_true")]
        compare_pde: bool,
    },
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::CheckAssumptions { .. } => "check-assumptions",
            Task::Solve { .. } => "solve",
            Task::MuCurve { .. } => "mu-curve",
            Task::FixedPoint { .. } => "fixed-point",
            Task::EvolveFixed { .. } => "evolve-fixed",
            Task::EvolveDynamic { .. } => "evolve-dynamic",
            Task::SdeVerify { .. } => "sde-verify",
        }
    }
}

fn positive(v: f64, what: &str, out: &mut Vec<String>) {
    if !(v > 0.0 && v.is_finite()) {
        out.push(format!("{what} must be positive and finite (got {v})"));
    }
}

fn increasing(v: &[f64], what: &str, out: &mut Vec<String>) {
    if v.iter().any(|x| !x.is_finite()) || v.windows(2).any(|w| w[1] <= w[0]) {
        out.push(format!("{what} must be finite and strictly increasing"));
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::ConfigInvalid(vec![e.message().to_string()]))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::ConfigInvalid(vec![format!("cannot read {}: {e}", path.display())]))?;
        Self::from_toml(&text)
    }

    /// Every violated constraint, with the offending field named.
    pub fn violations(&self) -> Vec<String> {
        let mut out = vec![];
        if let Err(e) = self.domain.validate() {
            out.push(format!("domain: {e}"));
        }
        let dim = self.domain.dim();
        if self.grid.n < 3 {
            out.push(format!("grid.n must be at least 3 (got {})", self.grid.n));
        } else if self.grid.n > 4097 {
            out.push(format!("grid.n must be at most 4097 (got {})", self.grid.n));
        }
        if let Some(p) = &self.grid.reference_point {
            if p.len() != dim {
                out.push(format!("grid.reference_point needs {dim} coordinates"));
            }
        }
        if let Some(f) = self.grid.half_cell_factor {
            if !(0.0..=1.0).contains(&f) {
                out.push(format!("grid.half_cell_factor must lie in [0, 1] (got {f})"));
            }
        }
        out.extend(self.operator.violations(dim).into_iter().map(|v| format!("operator: {v}")));
        if out.is_empty() {
            out.extend(self.boundary.violations(&self.domain).into_iter().map(|v| format!("boundary: {v}")));
        }
        out.extend(self.schedule.violations());
        if !(self.solver.linear_tol > 0.0) || !(self.solver.nonlinear_tol > 0.0) {
            out.push("solver tolerances must be positive".into());
        }
        if self.solver.max_iter == 0 {
            out.push("solver.max_iter must be positive".into());
        }
        match &self.task {
            Task::CheckAssumptions { n_samples } => {
                if *n_samples < 1 {
                    out.push(format!("task.n_samples must be positive (got {n_samples})"));
                }
            }
            Task::Solve { lambda } => {
                if !lambda.is_finite() {
                    out.push("task.lambda must be finite".into());
                }
            }
            Task::MuCurve { lambdas } => {
                if lambdas.len() < 3 {
                    out.push("task.lambdas needs at least 3 values".into());
                }
                increasing(lambdas, "task.lambdas", &mut out);
            }
            Task::FixedPoint { bracket, tol } => {
                if !(bracket[0] < bracket[1]) {
                    out.push("task.bracket must satisfy lo < hi".into());
                }
                positive(*tol, "task.tol", &mut out);
            }
            Task::EvolveFixed { lambda, mu, horizon, dt, initial, perturbation, slope_tol, .. } => {
                if !lambda.is_finite() || mu.is_some_and(|m| !m.is_finite()) {
                    out.push("task.lambda and task.mu must be finite".into());
                }
                positive(*horizon, "task.horizon", &mut out);
                if let Some(dt) = dt {
                    positive(*dt, "task.dt", &mut out);
                }
                positive(*slope_tol, "task.slope_tol", &mut out);
                for (f, what) in [(initial, "task.initial"), (perturbation, "task.perturbation")] {
                    if let Some(f) = f {
                        f.check(dim, what, &mut out);
                    }
                }
            }
            Task::EvolveDynamic { horizon, dt, implicit, initial } => {
                positive(*horizon, "task.horizon", &mut out);
                match dt {
                    Some(dt) => positive(*dt, "task.dt", &mut out),
                    None if *implicit => out.push("task.dt is required for implicit stepping".into()),
                    None => {}
                }
                if let Some(f) = initial {
                    f.check(dim, "task.initial", &mut out);
                }
            }
            Task::SdeVerify { lambda, x, times, n_paths, dt, diffusion, .. } => {
                if !lambda.is_finite() {
                    out.push("task.lambda must be finite".into());
                }
                if let Some(x) = x {
                    if x.len() != dim || self.domain.signed_distance(x) < 0.0 {
                        out.push("task.x must be a point of the closed domain".into());
                    }
                }
                if times.is_empty() {
                    out.push("task.times must not be empty".into());
                }
                increasing(times, "task.times", &mut out);
                if times.first().is_some_and(|t| *t <= 0.0) {
                    out.push("task.times must be positive".into());
                }
                if *n_paths < 2 {
                    out.push(format!("task.n_paths must be at least 2 (got {n_paths})"));
                }
                positive(*dt, "task.dt", &mut out);
                match diffusion {
                    Some(d) => {
                        if d.domain != self.domain {
                            out.push("task.diffusion.domain must match the domain block".into());
                        }
                        out.extend(d.violations().into_iter().map(|v| format!("task.diffusion: {v}")));
                    }
                    None => {
                        if matches!(self.operator, HamiltonianSpec::Pucci { .. })
                            || matches!(self.boundary, BoundaryOperatorSpec::NonlinearNorm { .. })
                        {
                            out.push("task.diffusion is required: the operators have no reflected-diffusion form".into());
                        }
                    }
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(CliError::ConfigInvalid(v))
        }
    }
}
