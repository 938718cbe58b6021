//! Monte Carlo for reflected controlled diffusions: boundary local time, the
//! value functional and the ergodic-cost representation
//! `mu = -E[int (f + lambda) ds + int g d|k|] / E|k|_t`.
//!
//! Boundary costs follow the stochastic convention `dU/dgamma = g + mu`; a
//! PDE-side offset `g` therefore enters here as `-g` (see
//! [`ControlledDiffusion::from_pde`]).

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{dist2, DomainSpec, Grid};
use crate::evolution::fit_line;
use crate::models::{boundary_sweep, BoundaryOperatorSpec, ControlBranch, HamiltonianSpec, Mat2, MatrixField, ScalarField, VectorField};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SdeError {
    #[error("local time does not grow (mean |k| = {mean_local_time:.3e}, slope = {slope:.3e}); the representation formula is degenerate")]
    DegenerateDenominator { mean_local_time: f64, slope: f64 },
    #[error("invalid diffusion: {}", .0.join("; "))]
    InvalidModel(Vec<String>),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// Reflected diffusion `dX = b(X, a) dt + sigma(X, a) dW - gamma(X) d|k|`
/// with running cost `f(X, a)` and boundary cost `g(X)`.
///
/// Each control's `diffusion` field is the covariance `sigma sigma^T`, so the
/// generator is `Tr(sigma sigma^T D2) / 2 + <b, D>`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlledDiffusion {
    pub domain: DomainSpec,
    pub controls: Vec<ControlBranch>,
    #[serde(default)]
    pub boundary_cost: Option<ScalarField>,
    /// Reflection direction; the outward normal when absent.
    #[serde(default)]
    pub direction: Option<VectorField>,
}

impl ControlledDiffusion {
    /// Single control with `sigma = s Id`, no drift and no costs.
    pub fn uncontrolled(domain: DomainSpec, s: f64) -> Self {
        ControlledDiffusion {
            domain,
            controls: vec![ControlBranch { diffusion: MatrixField::identity_times(s * s), drift: None, cost: None }],
            boundary_cost: None,
            direction: None,
        }
    }

    pub fn with_boundary_cost(mut self, g: ScalarField) -> Self {
        self.boundary_cost = Some(g);
        self
    }

    /// Diffusion whose value function solves the given linear/HJB problem:
    /// `F = -Tr(a D2) - <b, D> - f` becomes `sigma sigma^T = 2a`, and the
    /// boundary offset changes sign.
    pub fn from_pde(f: &HamiltonianSpec, l: &BoundaryOperatorSpec, domain: &DomainSpec) -> Result<Self, SdeError> {
        let controls = match f {
            HamiltonianSpec::Linear { diffusion, drift, source } => vec![ControlBranch {
                diffusion: diffusion.scaled(2.0),
                drift: drift.clone(),
                cost: source.clone(),
            }],
            HamiltonianSpec::Hjb { controls } => controls.clone(),
            HamiltonianSpec::Pucci { .. } => {
                return Err(SdeError::InvalidModel(vec!["the Pucci operator has no finite control set".into()]))
            }
        };
        let (direction, offset) = match l {
            BoundaryOperatorSpec::LinearOblique { direction, offset, .. } => (direction.clone(), offset.clone()),
            BoundaryOperatorSpec::NonlinearNorm { .. } => {
                return Err(SdeError::InvalidModel(vec!["nonlinear boundary operators have no reflection representation".into()]))
            }
        };
        let d = ControlledDiffusion {
            domain: domain.clone(),
            controls,
            boundary_cost: offset.map(|g| g.scaled(-1.0)),
            direction,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn violations(&self) -> Vec<String> {
        let dim = self.dim();
        let mut out = vec![];
        if let Err(e) = self.domain.validate() {
            out.push(e.to_string());
        }
        if self.controls.is_empty() {
            out.push("control set is empty".into());
        }
        for (k, c) in self.controls.iter().enumerate() {
            c.diffusion.check(dim, &format!("controls[{k}].diffusion"), &mut out);
            if let Some(b) = &c.drift {
                b.check(dim, &format!("controls[{k}].drift"), &mut out);
            }
            if let Some(f) = &c.cost {
                f.check(dim, &format!("controls[{k}].cost"), &mut out);
            }
        }
        if let Some(g) = &self.boundary_cost {
            g.check(dim, "boundary_cost", &mut out);
        }
        if let Some(d) = &self.direction {
            d.check(dim, "direction", &mut out);
        }
        if !out.is_empty() {
            return out;
        }
        for x in boundary_sweep(&self.domain) {
            let n = self.domain.normal_near(&x);
            let g = self.direction_at(&x, &n);
            let dot: f64 = g[..dim].iter().zip(&n).map(|(a, b)| a * b).sum();
            if !(dot > 0.0) {
                out.push(format!("reflection direction is not oblique at {x:?} (<gamma, n> = {dot:.3e})"));
                break;
            }
        }
        for x in boundary_sweep(&self.domain).iter().chain(std::iter::once(&self.domain.centroid())) {
            for (k, c) in self.controls.iter().enumerate() {
                let mut m = [[0.0; 2]; 2];
                c.diffusion.eval_into(x, dim, &mut m);
                if cholesky(&m, dim).is_none() {
                    out.push(format!("controls[{k}].diffusion is not positive semidefinite at {x:?}"));
                    return out;
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), SdeError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(SdeError::InvalidModel(v))
        }
    }

    fn direction_at(&self, x: &[f64], n: &[f64]) -> [f64; 2] {
        let mut out = [0.0; 2];
        match &self.direction {
            None => out[..n.len()].copy_from_slice(n),
            Some(d) => d.eval_into(x, &mut out[..n.len()]),
        }
        out
    }

    fn boundary_cost_at(&self, x: &[f64]) -> f64 {
        self.boundary_cost.as_ref().map_or(0.0, |g| g.eval(x))
    }
}

/// Lower-triangular `L` with `L L^T = m`; `None` if `m` is not PSD.
fn cholesky(m: &Mat2, dim: usize) -> Option<Mat2> {
    let tol = 1e-12 * (1.0 + m[0][0].abs() + m[1][1].abs());
    let mut l = [[0.0; 2]; 2];
    if m[0][0] < -tol {
        return None;
    }
    l[0][0] = m[0][0].max(0.0).sqrt();
    if dim == 1 {
        return Some(l);
    }
    if (m[0][1] - m[1][0]).abs() > tol {
        return None;
    }
    l[1][0] = if l[0][0] > 0.0 { m[1][0] / l[0][0] } else if m[1][0].abs() <= tol { 0.0 } else { return None };
    let r = m[1][1] - l[1][0] * l[1][0];
    if r < -tol {
        return None;
    }
    l[1][1] = r.max(0.0).sqrt();
    Some(l)
}

/// Outcome of one projected Euler step.
#[derive(Clone, Debug, PartialEq)]
pub struct Reflection {
    pub x: Vec<f64>,
    /// Increment of the local time `|k|`: the length of the projection.
    pub dk: f64,
    /// The oblique ray missed the closure; nearest-point projection was used.
    pub projection_failed: bool,
}

/// Projected Euler step: `y = x + drift dt + noise`; a point outside the
/// domain is pulled back along `-gamma(xi)`, `xi` being the exit point of
/// the segment `[x, y]`.
pub fn step_reflect(
    domain: &DomainSpec,
    direction: Option<&VectorField>,
    x: &[f64],
    drift: &[f64],
    noise: &[f64],
    dt: f64,
) -> Result<Reflection, SdeError> {
    let dim = domain.dim();
    if x.len() != dim || drift.len() != dim || noise.len() != dim {
        return Err(SdeError::InvalidInput("dimension mismatch".into()));
    }
    if !(dt > 0.0) {
        return Err(SdeError::InvalidInput("dt must be positive".into()));
    }
    if domain.signed_distance(x) < -1e-12 {
        return Err(SdeError::InvalidInput("start point outside the domain".into()));
    }
    let mut y = [0.0; 2];
    for k in 0..dim {
        y[k] = x[k] + drift[k] * dt + noise[k];
    }
    let (dk, failed) = reflect(domain, direction, x, &mut y, dim);
    Ok(Reflection { x: y[..dim].to_vec(), dk, projection_failed: failed })
}

/// Smallest `s >= 0` with `y + s dir` in the closure.
fn ray_entry(domain: &DomainSpec, y: &[f64], dir: &[f64]) -> Option<f64> {
    match *domain {
        DomainSpec::Interval { lo, hi } => {
            if y[0] > hi && dir[0] < 0.0 {
                Some((hi - y[0]) / dir[0])
            } else if y[0] < lo && dir[0] > 0.0 {
                Some((lo - y[0]) / dir[0])
            } else if (lo..=hi).contains(&y[0]) {
                Some(0.0)
            } else {
                None
            }
        }
        DomainSpec::Disk { center, radius } => {
            let ox = y[0] - center[0];
            let oy = y[1] - center[1];
            let a = dir[0] * dir[0] + dir[1] * dir[1];
            let b = ox * dir[0] + oy * dir[1];
            let c = ox * ox + oy * oy - radius * radius;
            if c <= 0.0 {
                return Some(0.0);
            }
            let disc = b * b - a * c;
            if a == 0.0 || disc < 0.0 {
                return None;
            }
            let s = (-b - disc.sqrt()) / a;
            (s >= 0.0).then_some(s)
        }
    }
}

#[inline(always)]
fn inside(domain: &DomainSpec, y: &[f64; 2]) -> bool {
    match *domain {
        DomainSpec::Interval { lo, hi } => y[0] >= lo && y[0] <= hi,
        DomainSpec::Disk { center, radius } => {
            let (dx, dy) = (y[0] - center[0], y[1] - center[1]);
            dx * dx + dy * dy <= radius * radius
        }
    }
}

fn reflect(domain: &DomainSpec, direction: Option<&VectorField>, x: &[f64], y: &mut [f64; 2], dim: usize) -> (f64, bool) {
    if domain.signed_distance(&y[..dim]) >= 0.0 {
        return (0.0, false);
    }
    let mut seg = [0.0; 2];
    for k in 0..dim {
        seg[k] = y[k] - x[k];
    }
    let xi: Vec<f64> = match domain.ray_exit(x, &seg[..dim]) {
        Some(s) if s <= 1.0 => (0..dim).map(|k| x[k] + s * seg[k]).collect(),
        _ => domain.project_to_boundary(&y[..dim]),
    };
    let n = domain.normal_near(&xi);
    let mut g = [0.0; 2];
    match direction {
        None => g[..dim].copy_from_slice(&n),
        Some(d) => d.eval_into(&xi, &mut g[..dim]),
    }
    let gn = g[..dim].iter().map(|v| v * v).sum::<f64>().sqrt();
    let back: Vec<f64> = g[..dim].iter().map(|v| -v / gn).collect();
    let (mut z, failed) = match ray_entry(domain, &y[..dim], &back) {
        Some(s) if gn > 0.0 => ((0..dim).map(|k| y[k] + s * back[k]).collect::<Vec<_>>(), false),
        _ => (domain.project_to_boundary(&y[..dim]), true),
    };
    if domain.signed_distance(&z) < 0.0 {
        // rounding: land exactly on the boundary
        z = domain.project_to_boundary(&z);
    }
    let dk = dist2(&y[..dim], &z).sqrt();
    y[..dim].copy_from_slice(&z);
    (dk, failed)
}

/// Control selection rule.
#[derive(Clone, Debug)]
pub enum Policy {
    Fixed(usize),
    Feedback(FeedbackTable),
}

impl Policy {
    fn control(&self, x: &[f64]) -> usize {
        match self {
            Policy::Fixed(a) => *a,
            Policy::Feedback(t) => t.choice[t.grid.nearest_node(x)],
        }
    }

    fn check(&self, diff: &ControlledDiffusion) -> Result<(), SdeError> {
        let n = diff.controls.len();
        let ok = match self {
            Policy::Fixed(a) => *a < n,
            Policy::Feedback(t) => t.choice.iter().all(|&a| a < n),
        };
        if ok {
            Ok(())
        } else {
            Err(SdeError::InvalidInput("policy refers to a nonexistent control".into()))
        }
    }
}

/// Per-node control choice extracted from a grid function.
#[derive(Clone, Debug)]
pub struct FeedbackTable {
    grid: Arc<Grid>,
    choice: Vec<usize>,
}

impl FeedbackTable {
    /// At each node, the control minimizing `Tr(sigma sigma^T D2u)/2 + <b, Du> + f`,
    /// with derivatives from centred (or one-sided) differences of `u`.
    pub fn from_solution(diff: &ControlledDiffusion, grid: Arc<Grid>, u: &[f64]) -> Result<Self, SdeError> {
        if u.len() != grid.len() {
            return Err(SdeError::InvalidInput("grid function has the wrong length".into()));
        }
        let dim = grid.dim();
        let h = grid.h();
        let lookup = |x: &[f64]| {
            let j = grid.nearest_node(x);
            (dist2(grid.point(j), x) < (0.25 * h).powi(2)).then_some(j)
        };
        let mut choice = vec![0usize; grid.len()];
        for i in grid.interior_indices() {
            let x = grid.point(i);
            let mut p = [0.0; 2];
            let mut m = [[0.0; 2]; 2];
            let shifted = |dx: [f64; 2]| {
                let y: Vec<f64> = (0..dim).map(|k| x[k] + dx[k]).collect();
                lookup(&y).map(|j| u[j])
            };
            for k in 0..dim {
                let mut e = [0.0; 2];
                e[k] = h;
                let fwd = shifted(e);
                let bwd = shifted([-e[0], -e[1]]);
                p[k] = match (fwd, bwd) {
                    (Some(a), Some(b)) => (a - b) / (2.0 * h),
                    (Some(a), None) => (a - u[i]) / h,
                    (None, Some(b)) => (u[i] - b) / h,
                    _ => 0.0,
                };
                if let (Some(a), Some(b)) = (fwd, bwd) {
                    m[k][k] = (a - 2.0 * u[i] + b) / (h * h);
                }
            }
            if dim == 2 {
                if let (Some(pp), Some(pm), Some(mp), Some(mm)) =
                    (shifted([h, h]), shifted([h, -h]), shifted([-h, h]), shifted([-h, -h]))
                {
                    m[0][1] = (pp - pm - mp + mm) / (4.0 * h * h);
                    m[1][0] = m[0][1];
                }
            }
            let mut best = (f64::INFINITY, 0);
            for (a, c) in diff.controls.iter().enumerate() {
                let mut cov = [[0.0; 2]; 2];
                c.diffusion.eval_into(x, dim, &mut cov);
                let mut b = [0.0; 2];
                if let Some(d) = &c.drift {
                    d.eval_into(x, &mut b[..dim]);
                }
                let mut v = c.cost.as_ref().map_or(0.0, |f| f.eval(x));
                for r in 0..dim {
                    v += b[r] * p[r];
                    for s in 0..dim {
                        v += 0.5 * cov[r][s] * m[s][r];
                    }
                }
                if v < best.0 {
                    best = (v, a);
                }
            }
            choice[i] = best.1;
        }
        for b in grid.boundary_indices() {
            if let Some(j) = grid.nearest_interior(grid.point(b)) {
                choice[b] = choice[j];
            }
        }
        Ok(FeedbackTable { grid, choice })
    }

    pub fn choices(&self) -> &[usize] {
        &self.choice
    }
}

/// Piecewise-linear (1D) or multilinear-with-nearest-fallback (2D)
/// interpolant of a grid function.
pub fn grid_interpolant<'a>(grid: &'a Grid, values: &'a [f64]) -> impl Fn(&[f64]) -> f64 + Sync + 'a {
    let mut sorted: Vec<(f64, f64)> = Vec::new();
    if grid.dim() == 1 {
        sorted = (0..grid.len()).map(|i| (grid.point(i)[0], values[i])).collect();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    move |x: &[f64]| {
        if grid.dim() == 1 {
            let k = sorted.partition_point(|p| p.0 < x[0]);
            if k == 0 {
                return sorted[0].1;
            }
            if k == sorted.len() {
                return sorted[k - 1].1;
            }
            let (a, b) = (sorted[k - 1], sorted[k]);
            let t = (x[0] - a.0) / (b.0 - a.0);
            a.1 + t * (b.1 - a.1)
        } else {
            match grid.interpolation_weights(x) {
                Some(w) => w.iter().map(|&(j, c)| c * values[j]).sum(),
                None => values[grid.nearest_node(x)],
            }
        }
    }
}

/// Monte Carlo settings. Path `p` draws from the ChaCha8 stream `p` of
/// `seed`, so results do not depend on the thread count.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McOptions {
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
}

impl Default for McOptions {
    fn default() -> Self {
        McOptions { n_paths: 10_000, dt: 1e-4, seed: 0 }
    }
}

/// Sample mean with standard error `std / sqrt(n)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(v: &[f64]) -> Stat {
        let n = v.len();
        if n == 0 {
            return Stat { mean: f64::NAN, se: f64::NAN, n };
        }
        // shifted sums: exact for constant samples
        let v0 = v[0];
        let s: f64 = v.iter().map(|x| x - v0).sum();
        let mean = v0 + s / n as f64;
        let se = if n > 1 {
            let ss: f64 = v.iter().map(|x| (x - mean) * (x - mean)).sum();
            (ss / (n - 1) as f64).sqrt() / (n as f64).sqrt()
        } else {
            f64::NAN
        };
        Stat { mean, se, n }
    }
}

/// Path functionals at one time horizon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathEstimate {
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
    pub t: f64,
    pub lambda: f64,
    pub terminal: Vec<Vec<f64>>,
    /// `|k|_t` per path.
    pub local_time: Vec<f64>,
    /// `int_0^t (f + lambda) ds` per path.
    pub running_cost: Vec<f64>,
    /// `int_0^t g d|k|` per path.
    pub boundary_cost: Vec<f64>,
    pub local_time_stat: Stat,
    pub running_stat: Stat,
    pub boundary_stat: Stat,
    pub projection_failures: usize,
}

#[derive(Clone, Copy, Default)]
struct State {
    x: [f64; 2],
    k: f64,
    running: f64,
    boundary: f64,
}

fn check_inputs(diff: &ControlledDiffusion, x: &[f64], t_list: &[f64], policy: &Policy, opts: &McOptions) -> Result<(), SdeError> {
    diff.validate()?;
    policy.check(diff)?;
    if x.len() != diff.dim() || diff.domain.signed_distance(x) < 0.0 {
        return Err(SdeError::InvalidInput("start point must lie in the closed domain".into()));
    }
    if opts.n_paths < 2 || !(opts.dt > 0.0) {
        return Err(SdeError::InvalidInput("need n_paths >= 2 and dt > 0".into()));
    }
    if t_list.is_empty() || t_list.iter().any(|t| !(*t > 0.0)) || t_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(SdeError::InvalidInput("times must be positive and strictly increasing".into()));
    }
    Ok(())
}

fn const_scalar(f: &ScalarField) -> Option<f64> {
    match f {
        ScalarField::Constant { value } => Some(*value),
        _ => None,
    }
}

/// Coefficients of one control, frozen when they do not depend on `x`.
struct Frozen {
    sigma: Option<Mat2>,
    drift: Option<[f64; 2]>,
    cost: Option<f64>,
}

impl Frozen {
    fn new(c: &ControlBranch, dim: usize) -> Self {
        let sigma = match &c.diffusion {
            MatrixField::Scalar { field } => const_scalar(field).map(|v| [[v, 0.0], [0.0, v]]),
            MatrixField::Diagonal { entries } => {
                let d: Option<Vec<f64>> = entries.iter().map(const_scalar).collect();
                d.map(|d| {
                    let mut m = [[0.0; 2]; 2];
                    for (k, v) in d.iter().enumerate().take(dim) {
                        m[k][k] = *v;
                    }
                    m
                })
            }
            MatrixField::Constant { .. } => {
                let mut m = [[0.0; 2]; 2];
                c.diffusion.eval_into(&[0.0; 2][..dim], dim, &mut m);
                Some(m)
            }
        }
        .map(|m| cholesky(&m, dim).unwrap_or([[0.0; 2]; 2]));
        let drift = match &c.drift {
            None => Some([0.0; 2]),
            Some(VectorField::Constant { value }) => {
                let mut b = [0.0; 2];
                b[..dim].copy_from_slice(&value[..dim]);
                Some(b)
            }
            Some(VectorField::Components { components }) => {
                let v: Option<Vec<f64>> = components.iter().map(const_scalar).collect();
                v.map(|v| {
                    let mut b = [0.0; 2];
                    b[..dim].copy_from_slice(&v[..dim]);
                    b
                })
            }
        };
        let cost = match &c.cost {
            None => Some(0.0),
            Some(f) => const_scalar(f),
        };
        Frozen { sigma, drift, cost }
    }
}

/// Path loop for a fixed control with state-independent coefficients.
#[allow(clippy::too_many_arguments)]
fn run_frozen(
    diff: &ControlledDiffusion,
    l: Mat2,
    b: [f64; 2],
    f: f64,
    x0: &[f64],
    checkpoints: &[usize],
    dt: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<State>, bool) {
    let dim = diff.dim();
    let sq = dt.sqrt();
    let mut x = [0.0; 2];
    x[..dim].copy_from_slice(x0);
    let (mut k, mut boundary, mut failed) = (0.0, 0.0, false);
    let mut out = Vec::with_capacity(checkpoints.len());
    let mut done = 0;
    for &cp in checkpoints {
        for _ in done..cp {
            let z0: f64 = rng.sample(StandardNormal);
            let z1: f64 = if dim == 2 { rng.sample(StandardNormal) } else { 0.0 };
            let mut y = x;
            for r in 0..dim {
                let inc = b[r] * dt + sq * (l[r][0] * z0 + l[r][1] * z1);
                y[r] += inc;
            }
            if !inside(&diff.domain, &y) {
                let (dk, fail) = reflect(&diff.domain, diff.direction.as_ref(), &x[..dim], &mut y, dim);
                failed |= fail;
                k += dk;
                boundary += diff.boundary_cost_at(&y[..dim]) * dk;
            }
            x = y;
        }
        done = done.max(cp);
        out.push(State { x, k, running: f * done as f64 * dt, boundary });
    }
    (out, failed)
}

fn run_path(
    diff: &ControlledDiffusion,
    frozen: &[Frozen],
    x0: &[f64],
    checkpoints: &[usize],
    dt: f64,
    policy: &Policy,
    rng: &mut ChaCha8Rng,
) -> (Vec<State>, bool) {
    let dim = diff.dim();
    let sq = dt.sqrt();
    let mut s = State::default();
    s.x[..dim].copy_from_slice(x0);
    let mut out = Vec::with_capacity(checkpoints.len());
    let mut failed = false;
    let mut next_cp = 0;
    let last = *checkpoints.last().unwrap_or(&0);
    if let Policy::Fixed(a) = policy {
        if let Frozen { sigma: Some(l), drift: Some(b), cost: Some(f) } = frozen[*a] {
            return run_frozen(diff, l, b, f, x0, checkpoints, dt, rng);
        }
    }
    for step in 1..=last {
        let a = policy.control(&s.x[..dim]);
        let (c, fr) = (&diff.controls[a], &frozen[a]);
        let x = s.x;
        let l = fr.sigma.unwrap_or_else(|| {
            let mut cov = [[0.0; 2]; 2];
            c.diffusion.eval_into(&x[..dim], dim, &mut cov);
            cholesky(&cov, dim).unwrap_or([[0.0; 2]; 2])
        });
        let b = fr.drift.unwrap_or_else(|| {
            let mut b = [0.0; 2];
            if let Some(d) = &c.drift {
                d.eval_into(&x[..dim], &mut b[..dim]);
            }
            b
        });
        s.running += fr.cost.unwrap_or_else(|| c.cost.as_ref().map_or(0.0, |f| f.eval(&x[..dim]))) * dt;
        let mut z = [0.0; 2];
        for zk in z.iter_mut().take(dim) {
            *zk = rng.sample::<f64, _>(StandardNormal) * sq;
        }
        let mut y = [0.0; 2];
        for r in 0..dim {
            y[r] = x[r] + b[r] * dt + (0..=r).map(|q| l[r][q] * z[q]).sum::<f64>();
        }
        let (dk, fail) = reflect(&diff.domain, diff.direction.as_ref(), &x[..dim], &mut y, dim);
        failed |= fail;
        if dk > 0.0 {
            s.k += dk;
            s.boundary += diff.boundary_cost_at(&y[..dim]) * dk;
        }
        s.x = y;
        while next_cp < checkpoints.len() && checkpoints[next_cp] == step {
            out.push(s);
            next_cp += 1;
        }
    }
    (out, failed)
}

/// Simulates `n_paths` paths from `x` and records the functionals at each
/// time in `t_list` (rounded to whole steps).
pub fn simulate_paths(
    diff: &ControlledDiffusion,
    x: &[f64],
    t_list: &[f64],
    lambda: f64,
    policy: &Policy,
    opts: &McOptions,
) -> Result<Vec<PathEstimate>, SdeError> {
    check_inputs(diff, x, t_list, policy, opts)?;
    let checkpoints: Vec<usize> = t_list.iter().map(|t| ((t / opts.dt).round() as usize).max(1)).collect();
    let frozen: Vec<Frozen> = diff.controls.iter().map(|c| Frozen::new(c, diff.dim())).collect();
    let runs: Vec<(Vec<State>, bool)> = (0..opts.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(p as u64);
            run_path(diff, &frozen, x, &checkpoints, opts.dt, policy, &mut rng)
        })
        .collect();
    let failures = runs.iter().filter(|r| r.1).count();
    let dim = diff.dim();
    Ok(checkpoints
        .iter()
        .enumerate()
        .map(|(j, &steps)| {
            let t = steps as f64 * opts.dt;
            let terminal: Vec<Vec<f64>> = runs.iter().map(|r| r.0[j].x[..dim].to_vec()).collect();
            let local_time: Vec<f64> = runs.iter().map(|r| r.0[j].k).collect();
            let running_cost: Vec<f64> = runs.iter().map(|r| r.0[j].running + lambda * t).collect();
            let boundary_cost: Vec<f64> = runs.iter().map(|r| r.0[j].boundary).collect();
            PathEstimate {
                n_paths: opts.n_paths,
                dt: opts.dt,
                seed: opts.seed,
                t,
                lambda,
                local_time_stat: Stat::of(&local_time),
                running_stat: Stat::of(&running_cost),
                boundary_stat: Stat::of(&boundary_cost),
                terminal,
                local_time,
                running_cost,
                boundary_cost,
                projection_failures: failures,
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueEstimate {
    /// `E[int (f + lambda) ds + int (g + mu) d|k| + u0(X_t)]`.
    pub value: Stat,
    pub mu: f64,
    pub paths: PathEstimate,
}

/// Monte Carlo estimate of `U(x, t)`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_value(
    diff: &ControlledDiffusion,
    x: &[f64],
    t: f64,
    lambda: f64,
    mu: f64,
    u0: &(dyn Fn(&[f64]) -> f64 + Sync),
    policy: &Policy,
    opts: &McOptions,
) -> Result<ValueEstimate, SdeError> {
    let paths = simulate_paths(diff, x, &[t], lambda, policy, opts)?.pop().expect("one horizon");
    let v: Vec<f64> = (0..paths.n_paths)
        .map(|p| paths.running_cost[p] + paths.boundary_cost[p] + mu * paths.local_time[p] + u0(&paths.terminal[p]))
        .collect();
    Ok(ValueEstimate { value: Stat::of(&v), mu, paths })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalTimeGrowth {
    pub times: Vec<f64>,
    /// `min` over policies of `E|k|_t`.
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
    pub per_policy: Vec<Vec<f64>>,
    pub slope: f64,
    /// Standard error of the slope from the per-time standard errors.
    pub slope_se: f64,
    pub intercept: f64,
    /// Slope positive and at least three standard errors from zero.
    pub probe_passed: bool,
}

fn slope_with_se(times: &[f64], mean: &[f64], se: &[f64]) -> (f64, f64, f64) {
    let fit = fit_line(times, mean);
    if times.len() < 2 {
        // a single horizon: ratio through the origin
        let t = times[0];
        return (mean[0] / t, se[0] / t, 0.0);
    }
    let tm = times.iter().sum::<f64>() / times.len() as f64;
    let sxx: f64 = times.iter().map(|t| (t - tm) * (t - tm)).sum();
    let var: f64 = times.iter().zip(se).map(|(t, s)| ((t - tm) / sxx).powi(2) * s * s).sum();
    (fit.slope, var.sqrt(), fit.intercept)
}

/// Growth rate of `t -> inf_policy E|k|_t` from `x`.
pub fn estimate_local_time_growth(
    diff: &ControlledDiffusion,
    x: &[f64],
    t_list: &[f64],
    policies: &[Policy],
    opts: &McOptions,
) -> Result<LocalTimeGrowth, SdeError> {
    if policies.is_empty() {
        return Err(SdeError::InvalidInput("at least one policy is required".into()));
    }
    let mut per_policy = vec![];
    let mut best: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut times = vec![];
    for policy in policies {
        let est = simulate_paths(diff, x, t_list, 0.0, policy, opts)?;
        times = est.iter().map(|e| e.t).collect();
        let m: Vec<f64> = est.iter().map(|e| e.local_time_stat.mean).collect();
        let s: Vec<f64> = est.iter().map(|e| e.local_time_stat.se).collect();
        best = Some(match best {
            None => (m.clone(), s),
            Some((bm, bs)) => {
                let mut out = (bm.clone(), bs.clone());
                for j in 0..m.len() {
                    if m[j] < bm[j] {
                        out.0[j] = m[j];
                        out.1[j] = s[j];
                    }
                }
                out
            }
        });
        per_policy.push(m);
    }
    let (mean, se) = best.expect("nonempty");
    let (slope, slope_se, intercept) = slope_with_se(&times, &mean, &se);
    Ok(LocalTimeGrowth {
        probe_passed: slope > 0.0 && slope > 3.0 * slope_se,
        times,
        mean,
        se,
        per_policy,
        slope,
        slope_se,
        intercept,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MuAtTime {
    pub t: f64,
    pub mu: f64,
    pub se: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MuFormulaEstimate {
    /// Estimate at the largest time.
    pub mu: f64,
    pub se: f64,
    pub per_time: Vec<MuAtTime>,
    /// `|mu(t_i) - mu(t_last)|` is nonincreasing along the time list.
    pub stabilizing: bool,
    pub local_time_slope: f64,
    pub local_time_slope_se: f64,
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
}

fn ratio_estimate(e: &PathEstimate) -> MuAtTime {
    let n = e.n_paths;
    let k = e.local_time_stat.mean;
    let num = e.running_stat.mean + e.boundary_stat.mean;
    let mu = -num / k;
    // delta method: mu_hat - mu ~ -(mean(N) + mu mean(K)) / mean(K)
    let z: Vec<f64> = (0..n).map(|p| e.running_cost[p] + e.boundary_cost[p] + mu * e.local_time[p]).collect();
    let se = Stat::of(&z).se / k.abs();
    MuAtTime { t: e.t, mu, se }
}

/// Representation-formula estimate of `mu(lambda)` under `policy`.
pub fn estimate_mu_formula(
    diff: &ControlledDiffusion,
    lambda: f64,
    x: &[f64],
    t_list: &[f64],
    policy: &Policy,
    opts: &McOptions,
) -> Result<MuFormulaEstimate, SdeError> {
    let est = simulate_paths(diff, x, t_list, lambda, policy, opts)?;
    let times: Vec<f64> = est.iter().map(|e| e.t).collect();
    let km: Vec<f64> = est.iter().map(|e| e.local_time_stat.mean).collect();
    let ks: Vec<f64> = est.iter().map(|e| e.local_time_stat.se).collect();
    let (slope, slope_se, _) = slope_with_se(&times, &km, &ks);
    let k_last = *km.last().expect("nonempty");
    if !(k_last > 0.0) || !(slope > 0.0) {
        return Err(SdeError::DegenerateDenominator { mean_local_time: k_last, slope });
    }
    let per_time: Vec<MuAtTime> = est.iter().filter(|e| e.local_time_stat.mean > 0.0).map(ratio_estimate).collect();
    let last = *per_time.last().expect("positive local time at the last horizon");
    let gaps: Vec<f64> = per_time.iter().map(|m| (m.mu - last.mu).abs()).collect();
    Ok(MuFormulaEstimate {
        mu: last.mu,
        se: last.se,
        stabilizing: gaps.windows(2).all(|w| w[1] <= w[0] + 1e-15),
        per_time,
        local_time_slope: slope,
        local_time_slope_se: slope_se,
        n_paths: opts.n_paths,
        dt: opts.dt,
        seed: opts.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit() -> DomainSpec {
        DomainSpec::interval(0.0, 1.0)
    }

    fn bm() -> ControlledDiffusion {
        ControlledDiffusion::uncontrolled(unit(), 2f64.sqrt())
    }

    fn opts(n: usize, dt: f64, seed: u64) -> McOptions {
        McOptions { n_paths: n, dt, seed }
    }

    #[test]
    fn reflection_examples() {
        let r = step_reflect(&unit(), None, &[0.5], &[0.0], &[0.1], 1.0).unwrap();
        assert_eq!((r.x.clone(), r.dk), (vec![0.6], 0.0));
        let r = step_reflect(&unit(), None, &[0.95], &[0.0], &[0.15], 1.0).unwrap();
        assert!((r.x[0] - 1.0).abs() < 1e-15 && (r.dk - 0.1).abs() < 1e-12 && !r.projection_failed);
        let disk = DomainSpec::unit_disk();
        let r = step_reflect(&disk, None, &[0.9, 0.0], &[0.0, 0.0], &[0.3, 0.0], 1.0).unwrap();
        assert!((r.x[0] - 1.0).abs() < 1e-12 && r.x[1].abs() < 1e-15 && (r.dk - 0.2).abs() < 1e-12);
    }

    #[test]
    fn oblique_reflection_moves_along_gamma() {
        let disk = DomainSpec::unit_disk();
        let gamma = VectorField::Components { components: vec![ScalarField::affine(0.0, vec![1.0, -0.5]), ScalarField::affine(0.0, vec![0.5, 1.0])] };
        let r = step_reflect(&disk, Some(&gamma), &[0.0, 0.95], &[0.0, 0.0], &[0.0, 0.2], 1.0).unwrap();
        assert!(disk.signed_distance(&r.x).abs() < 1e-12);
        // y - x_next is parallel to gamma at the exit point (0, 1)
        let d = [0.0 - r.x[0], 1.15 - r.x[1]];
        let g = [-0.5, 1.0];
        assert!((d[0] * g[1] - d[1] * g[0]).abs() < 1e-12 && d[0] * g[0] + d[1] * g[1] > 0.0);
    }

    proptest! {
        #[test]
        fn reflected_points_stay_in_closure(x in -0.99f64..0.99, y in -0.99f64..0.99, nx in -0.5f64..0.5, ny in -0.5f64..0.5) {
            let disk = DomainSpec::unit_disk();
            prop_assume!(x * x + y * y <= 1.0);
            let r = step_reflect(&disk, None, &[x, y], &[0.0, 0.0], &[nx, ny], 1.0).unwrap();
            prop_assert!(disk.signed_distance(&r.x) >= -1e-12);
            prop_assert!(r.dk >= 0.0);
            let outside = (x + nx).hypot(y + ny) > 1.0;
            prop_assert_eq!(r.dk > 0.0, outside);
        }
    }

    #[test]
    fn constant_terminal_cost_is_exact() {
        let est = simulate_value(&bm(), &[0.3], 1.0, 0.0, 0.0, &|_| 1.5, &Policy::Fixed(0), &opts(500, 1e-3, 3)).unwrap();
        assert_eq!(est.value.mean, 1.5);
        assert_eq!(est.value.se, 0.0);
    }

    #[test]
    fn value_is_bounded_exactly_at_the_ergodic_cost() {
        // stationary pair for lambda = 1: u = x (1 - x) / 2, mu = -1/2
        let u = |x: &[f64]| 0.5 * x[0] * (1.0 - x[0]);
        let o = opts(1000, 1e-4, 11);
        let times = [5.0, 10.0, 20.0];
        let at = simulate_paths(&bm(), &[0.5], &times, 1.0, &Policy::Fixed(0), &o).unwrap();
        for e in &at {
            let v: Vec<f64> = (0..e.n_paths).map(|p| e.running_cost[p] - 0.5 * e.local_time[p] + u(&e.terminal[p])).collect();
            let s = Stat::of(&v);
            // the projected scheme under-counts local time by O(sqrt(dt)) per unit time
            let tol = 3.0 * s.se + 0.02 * e.t;
            assert!((s.mean - u(&[0.5])).abs() <= tol, "t={}: {s:?}", e.t);
            let growing = e.running_cost.iter().sum::<f64>() / e.n_paths as f64;
            assert!((growing / e.t - 1.0).abs() < 1e-12);
        }
        let off = simulate_value(&bm(), &[0.5], 10.0, 1.0, 0.0, &|_| 0.0, &Policy::Fixed(0), &o).unwrap();
        assert!((off.value.mean / 10.0 - 1.0).abs() < 0.05, "{:?}", off.value);
    }

    #[test]
    fn local_time_growth_on_interval_and_disk() {
        let g = estimate_local_time_growth(&bm(), &[0.5], &[2.0, 4.0, 6.0, 8.0], &[Policy::Fixed(0)], &opts(2000, 1e-4, 5)).unwrap();
        assert!((g.slope / 2.0 - 1.0).abs() < 0.05, "{g:?}");
        assert!(g.probe_passed);
        let disk = ControlledDiffusion::uncontrolled(DomainSpec::unit_disk(), 2f64.sqrt());
        let g = estimate_local_time_growth(&disk, &[0.0, 0.0], &[1.0, 2.0, 3.0], &[Policy::Fixed(0)], &opts(1000, 1e-4, 5)).unwrap();
        assert!((g.slope / 2.0 - 1.0).abs() < 0.1, "{g:?}");
    }

    #[test]
    fn resting_particle_never_touches_the_boundary() {
        let still = ControlledDiffusion::uncontrolled(unit(), 0.0);
        let g = estimate_local_time_growth(&still, &[0.5], &[1.0, 2.0], &[Policy::Fixed(0)], &opts(10, 1e-2, 0)).unwrap();
        assert_eq!(g.slope, 0.0);
        assert!(!g.probe_passed);
        assert!(matches!(
            estimate_mu_formula(&still, 1.0, &[0.5], &[1.0, 2.0], &Policy::Fixed(0), &opts(10, 1e-2, 0)),
            Err(SdeError::DegenerateDenominator { .. })
        ));
    }

    #[test]
    fn representation_formula_examples() {
        let o = opts(2000, 1e-4, 9);
        let t = [2.0, 4.0];
        let zero = estimate_mu_formula(&bm(), 0.0, &[0.5], &t, &Policy::Fixed(0), &o).unwrap();
        assert!(zero.mu.abs() <= zero.se);
        let one = estimate_mu_formula(&bm(), 1.0, &[0.5], &t, &Policy::Fixed(0), &o).unwrap();
        assert!((one.mu + 0.5).abs() <= (3.0 * one.se).max(0.02), "{one:?}");
        let c = 0.3;
        let shifted = estimate_mu_formula(&bm().with_boundary_cost(ScalarField::constant(c)), 1.0, &[0.5], &t, &Policy::Fixed(0), &o).unwrap();
        assert!((shifted.mu + 0.5 + c).abs() <= (3.0 * shifted.se).max(0.02), "{shifted:?}");
    }

    #[test]
    fn bit_identical_reruns_and_thread_independence() {
        let run = || simulate_paths(&bm(), &[0.2], &[0.5, 1.0], 1.0, &Policy::Fixed(0), &opts(64, 1e-3, 42)).unwrap();
        let a = run();
        let b = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap().install(run);
        assert_eq!(a, b);
        for e in &a {
            assert!(e.terminal.iter().all(|x| (0.0..=1.0).contains(&x[0])));
        }
        for p in 0..64 {
            assert!(a[1].local_time[p] >= a[0].local_time[p]);
        }
        let c = simulate_paths(&bm(), &[0.2], &[0.5, 1.0], 1.0, &Policy::Fixed(0), &opts(64, 1e-3, 43)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn standard_error_scales_with_path_count() {
        let se: Vec<f64> = [1000, 4000, 16000]
            .iter()
            .map(|&n| simulate_paths(&bm(), &[0.5], &[1.0], 0.0, &Policy::Fixed(0), &opts(n, 1e-3, 1)).unwrap()[0].local_time_stat.se)
            .collect();
        for w in se.windows(2) {
            let r = w[0] / w[1];
            assert!(r > 2.0 / 1.5 && r < 2.0 * 1.5, "{se:?}");
        }
    }

    #[test]
    fn time_step_refinement_is_within_error_bars() {
        let t = [2.0, 4.0];
        let a = estimate_mu_formula(&bm(), 1.0, &[0.5], &t, &Policy::Fixed(0), &opts(2000, 4e-4, 2)).unwrap();
        let b = estimate_mu_formula(&bm(), 1.0, &[0.5], &t, &Policy::Fixed(0), &opts(2000, 1e-4, 3)).unwrap();
        assert!((a.mu - b.mu).abs() <= 3.0 * (a.se + b.se), "{} {} {} {}", a.mu, a.se, b.mu, b.se);
    }

    #[test]
    fn pde_bridge_flips_the_boundary_cost() {
        let f = HamiltonianSpec::laplacian(1.0, 0.0);
        let l = BoundaryOperatorSpec::normal(0.7);
        let d = ControlledDiffusion::from_pde(&f, &l, &unit()).unwrap();
        assert_eq!(d.boundary_cost, Some(ScalarField::constant(-0.7)));
        assert_eq!(d.controls[0].diffusion, MatrixField::identity_times(2.0));
        assert!(ControlledDiffusion::from_pde(&HamiltonianSpec::pucci(1.0, 2.0, 0.0), &l, &unit()).is_err());
    }

    #[test]
    fn feedback_prefers_the_cheaper_control() {
        let branch = |c: f64| ControlBranch { diffusion: MatrixField::identity_times(2.0), drift: None, cost: Some(ScalarField::constant(c)) };
        let diff = ControlledDiffusion { domain: unit(), controls: vec![branch(1.0), branch(0.2)], boundary_cost: None, direction: None };
        let grid = Arc::new(Grid::new(unit(), 11).unwrap());
        let u = vec![0.0; grid.len()];
        let table = FeedbackTable::from_solution(&diff, grid, &u).unwrap();
        assert!(table.choices().iter().all(|&a| a == 1));
        let est = simulate_paths(&diff, &[0.5], &[1.0], 0.0, &Policy::Feedback(table), &opts(10, 1e-2, 0)).unwrap();
        assert!((est[0].running_stat.mean - 0.2).abs() < 1e-12);
    }
}
