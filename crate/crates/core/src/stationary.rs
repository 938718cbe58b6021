//! Ergodic solver: vanishing-discount approximation of `(u, mu)` for a given
//! `lambda`, the curve `lambda -> mu(lambda)`, its fixed point and diagnostics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::Grid;
use crate::linalg::{BandedLu, SparseRow};
use crate::models::{BoundaryOperatorSpec, HamiltonianSpec, Mat2};
use crate::scheme::{newton, sup_norm, DiscreteSystem, NewtonOptions, SchemeError, Terms};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StationaryError {
    #[error("ill-posed penalization: {0}")]
    IllPosed(String),
    #[error("no convergence after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("schedule exhausted: mu iterates failed the Cauchy test (last gap {last_gap:.3e})")]
    ScheduleExhausted { last_gap: f64 },
    #[error("no sign change of lambda - mu(lambda) in [{lo}, {hi}]")]
    BracketNotFound { lo: f64, hi: f64 },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Scheme(SchemeError),
}

impl From<SchemeError> for StationaryError {
    fn from(e: SchemeError) -> Self {
        match e {
            SchemeError::NonConvergence { iterations, residual } => StationaryError::NonConvergence { iterations, residual },
            other => StationaryError::Scheme(other),
        }
    }
}

/// Tolerances of the inner solves.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverOptions {
    /// Residual tolerance when both operators are linear.
    pub linear_tol: f64,
    /// Residual tolerance for HJB / Pucci / nonlinear boundary operators.
    pub nonlinear_tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { linear_tol: 1e-10, nonlinear_tol: 1e-8, max_iter: 200 }
    }
}

impl SolverOptions {
    pub fn tolerance_for(&self, sys: &DiscreteSystem) -> f64 {
        let linear = matches!(sys.fspec(), HamiltonianSpec::Linear { .. })
            && matches!(sys.lspec(), BoundaryOperatorSpec::LinearOblique { .. });
        if linear {
            self.linear_tol
        } else {
            self.nonlinear_tol
        }
    }

    fn newton(&self, sys: &DiscreteSystem) -> NewtonOptions {
        NewtonOptions { tol: self.tolerance_for(sys), max_iter: self.max_iter }
    }
}

/// Discount schedule `alpha_k = alpha0 * ratio^k` down to `alpha_min`, with
/// `eps_k = alpha_k^eps_power`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub alpha0: f64,
    pub alpha_min: f64,
    pub ratio: f64,
    pub eps_power: f64,
    /// Largest acceptable gap between the last two mu iterates.
    pub cauchy_tol: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self { alpha0: 0.1, alpha_min: 1e-4, ratio: 0.5, eps_power: 2.0, cauchy_tol: 1e-3 }
    }
}

impl Schedule {
    pub fn violations(&self) -> Vec<String> {
        let mut v = vec![];
        if !(self.alpha0 > 0.0) {
            v.push("schedule.alpha0 must be positive".into());
        }
        if !(self.alpha_min > 0.0 && self.alpha_min <= self.alpha0) {
            v.push("schedule.alpha_min must lie in (0, alpha0]".into());
        }
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            v.push("schedule.ratio must lie in (0, 1)".into());
        }
        if !(self.eps_power > 1.0) {
            v.push("schedule.eps_power must exceed 1 so that eps/alpha -> 0".into());
        }
        if !(self.cauchy_tol > 0.0) {
            v.push("schedule.cauchy_tol must be positive".into());
        }
        v
    }

    /// `(alpha_k, eps_k)`; the last alpha is the first one `<= alpha_min`.
    pub fn steps(&self) -> Vec<(f64, f64)> {
        let mut out = vec![];
        let mut a = self.alpha0;
        loop {
            out.push((a, a.powf(self.eps_power)));
            if a <= self.alpha_min * (1.0 + 1e-12) || out.len() > 200 {
                break;
            }
            a *= self.ratio;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleStep {
    pub alpha: f64,
    pub eps: f64,
    /// `sup |alpha u~|`.
    pub sup_alpha_u: f64,
    /// `-alpha u~(x0)`.
    pub mu_estimate: f64,
    pub residual: f64,
    pub iterations: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HolderDiagnostic {
    pub beta: f64,
    pub seminorm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErgodicResult {
    pub lambda: f64,
    /// Ergodic boundary constant of the discrete problem.
    pub mu: f64,
    /// Richardson extrapolation of the schedule iterates.
    pub mu_extrapolated: f64,
    /// Normalized solution, `u[x0] = 0`.
    pub u: Vec<f64>,
    pub reference: usize,
    pub trace: Vec<ScheduleStep>,
    /// Residual sup norm of `(u, mu)` in the undiscounted discrete system.
    pub residual: f64,
    /// True when `(u, mu)` was refined to the discrete fixed point; otherwise
    /// `u` is the last schedule iterate and `mu` the extrapolated value.
    pub refined: bool,
    /// Observed convergence order of the mu iterates in alpha.
    pub observed_order: Option<f64>,
    /// Set when the observed order is far from first order.
    pub order_flag: bool,
    /// `max_k sup|alpha_k u~_k| <= 2 sup|alpha_0 u~_0|`.
    pub bound_ok: bool,
    pub holder: HolderDiagnostic,
}

/// Solution of the discounted problem, kept as `w + offset` with `w[x0] = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct PenalizedSolution {
    pub w: Vec<f64>,
    pub offset: f64,
    pub residual: f64,
    pub iterations: usize,
}

impl PenalizedSolution {
    /// Node values `u~ = w + offset`.
    pub fn values(&self) -> Vec<f64> {
        self.w.iter().map(|v| v + self.offset).collect()
    }
}

fn split_warm(sys: &DiscreteSystem, warm: Option<&[f64]>) -> Result<(Vec<f64>, f64), StationaryError> {
    let x0 = sys.grid().reference();
    match warm {
        None => Ok((vec![0.0; sys.len()], 0.0)),
        Some(u) => {
            if u.len() != sys.len() {
                return Err(SchemeError::LengthMismatch { expected: sys.len(), got: u.len() }.into());
            }
            let c = u[x0];
            Ok((u.iter().map(|v| v - c).collect(), c))
        }
    }
}

/// Solves `F + eps u = lambda` in the interior, `L + alpha u = 0` on the boundary.
pub fn solve_penalized(
    sys: &DiscreteSystem,
    lambda: f64,
    eps: f64,
    alpha: f64,
    warm_start: Option<&[f64]>,
    opts: &SolverOptions,
) -> Result<PenalizedSolution, StationaryError> {
    let (mut w, mut c) = split_warm(sys, warm_start)?;
    penalized_in_place(sys, lambda, eps, alpha, &mut w, &mut c, opts)
}

fn penalized_in_place(
    sys: &DiscreteSystem,
    lambda: f64,
    eps: f64,
    alpha: f64,
    w: &mut [f64],
    c: &mut f64,
    opts: &SolverOptions,
) -> Result<PenalizedSolution, StationaryError> {
    if !(eps > 0.0) || !(alpha > 0.0) {
        return Err(StationaryError::IllPosed(format!("need eps > 0 and alpha > 0, got eps = {eps}, alpha = {alpha}")));
    }
    let t = Terms { lambda, mu: 0.0, eps, alpha, corr_eps: eps, shift: None, shift_mu: false };
    let x0 = sys.grid().reference();
    let out = newton(sys, &t, w, c, Some(x0), opts.newton(sys))?;
    Ok(PenalizedSolution { w: w.to_vec(), offset: *c, residual: out.residual, iterations: out.iterations })
}

/// Value at zero of the quadratic through the last three `(alpha, mu)` points.
fn richardson(points: &[(f64, f64)]) -> f64 {
    match points.len() {
        0 => f64::NAN,
        1 | 2 => points[points.len() - 1].1,
        n => {
            let p = &points[n - 3..];
            let mut v = 0.0;
            for i in 0..3 {
                let mut l = 1.0;
                for j in 0..3 {
                    if i != j {
                        l *= (0.0 - p[j].0) / (p[i].0 - p[j].0);
                    }
                }
                v += l * p[i].1;
            }
            v
        }
    }
}

/// Undiscounted residual of `(w, mu)`.
pub fn stationary_residual(sys: &DiscreteSystem, lambda: f64, mu: f64, u: &[f64]) -> f64 {
    let mut r = vec![0.0; sys.len()];
    sys.residual_into(&Terms::stationary(lambda, mu), u, 0.0, &mut r);
    sup_norm(&r)
}

/// Defect correction of the undiscounted pair `(w, mu)`, preconditioned by
/// the discounted linearization at the smallest `(eps, alpha)`.
fn refine_pair(
    sys: &DiscreteSystem,
    lambda: f64,
    eps: f64,
    alpha: f64,
    w: &mut [f64],
    mu: &mut f64,
    tol: f64,
) -> Option<f64> {
    let n = sys.len();
    let x0 = sys.grid().reference();
    let pen = Terms { lambda, mu: 0.0, eps, alpha, corr_eps: 0.0, shift: None, shift_mu: false };
    let mut res = vec![0.0; n];
    let mut rows = vec![SparseRow::new(); n];
    let mut cached: Option<(Vec<SparseRow>, BandedLu)> = None;
    let mut best = f64::INFINITY;
    for _ in 0..100 {
        sys.residual_into(&Terms::stationary(lambda, *mu), w, 0.0, &mut res);
        let r = sup_norm(&res);
        if r <= tol {
            return Some(r);
        }
        if !(r < 2.0 * best) {
            return None;
        }
        best = best.min(r);
        let mut scratch = vec![0.0; n];
        sys.linearize(&pen, w, 0.0, &mut scratch, &mut rows);
        if !matches!(&cached, Some((old, _)) if *old == rows) {
            let lu = BandedLu::factor(&rows).ok()?;
            cached = Some((rows.clone(), lu));
        }
        let lu = &cached.as_ref()?.1;
        let mut delta: Vec<f64> = res.iter().map(|v| -v).collect();
        lu.solve_in_place(&mut delta);
        let s = delta[x0];
        for i in 0..n {
            w[i] += delta[i] - s;
        }
        *mu -= alpha * s;
    }
    None
}

/// Runs the vanishing-discount schedule and extracts `(u, mu)`.
pub fn ergodic_solve(sys: &DiscreteSystem, lambda: f64, schedule: &Schedule, opts: &SolverOptions) -> Result<ErgodicResult, StationaryError> {
    ergodic_solve_from(sys, lambda, schedule, opts, None)
}

pub fn ergodic_solve_from(
    sys: &DiscreteSystem,
    lambda: f64,
    schedule: &Schedule,
    opts: &SolverOptions,
    warm_start: Option<&[f64]>,
) -> Result<ErgodicResult, StationaryError> {
    let v = schedule.violations();
    if !v.is_empty() {
        return Err(StationaryError::InvalidInput(v.join("; ")));
    }
    let x0 = sys.grid().reference();
    let (mut w, mut c) = split_warm(sys, warm_start)?;
    let mut trace: Vec<ScheduleStep> = vec![];
    let mut prev_alpha: Option<f64> = None;
    for (alpha, eps) in schedule.steps() {
        if let Some(pa) = prev_alpha {
            // alpha u~(x0) is O(1): rescale the offset to the new alpha
            c *= pa / alpha;
        }
        let sol = penalized_in_place(sys, lambda, eps, alpha, &mut w, &mut c, opts)?;
        let sup = w.iter().map(|v| (alpha * (v + c)).abs()).fold(0.0, f64::max);
        trace.push(ScheduleStep {
            alpha,
            eps,
            sup_alpha_u: sup,
            mu_estimate: -alpha * c,
            residual: sol.residual,
            iterations: sol.iterations,
        });
        prev_alpha = Some(alpha);
    }
    let pts: Vec<(f64, f64)> = trace.iter().map(|s| (s.alpha, s.mu_estimate)).collect();
    let mu_extrapolated = richardson(&pts);
    let gaps: Vec<f64> = pts.windows(2).map(|p| (p[1].1 - p[0].1).abs()).collect();
    let last_gap = gaps.last().copied().unwrap_or(0.0);
    let noise = 1e-12;
    let tail_ok = gaps.len() < 3 || gaps[gaps.len() - 3..].windows(2).all(|g| g[1] <= g[0] + noise);
    if last_gap > schedule.cauchy_tol || !tail_ok {
        return Err(StationaryError::ScheduleExhausted { last_gap });
    }
    let observed_order = if gaps.len() >= 2 {
        let (g0, g1) = (gaps[gaps.len() - 2], gaps[gaps.len() - 1]);
        (g0 > 1e-13 && g1 > 1e-13).then(|| (g0 / g1).ln() / (1.0 / schedule.ratio).ln())
    } else {
        None
    };
    let order_flag = observed_order.is_some_and(|p| !(0.5..=2.5).contains(&p));
    let bound0 = trace[0].sup_alpha_u;
    let bound_ok = trace.iter().all(|s| s.sup_alpha_u <= 2.0 * bound0 + 1e-12);

    let (alpha, eps) = (trace.last().unwrap().alpha, trace.last().unwrap().eps);
    let tol = opts.tolerance_for(sys);
    let mut wr = w.clone();
    let mut mur = mu_extrapolated;
    let refined = refine_pair(sys, lambda, eps, alpha, &mut wr, &mut mur, tol);
    let (u, mu, residual, refined) = match refined {
        Some(r) => (wr, mur, r, true),
        None => {
            let r = stationary_residual(sys, lambda, mu_extrapolated, &w);
            (w, mu_extrapolated, r, false)
        }
    };
    debug_assert_eq!(u[x0], 0.0);
    let beta = 0.9;
    let holder = HolderDiagnostic { beta, seminorm: holder_seminorm(&u, sys.grid(), beta) };
    Ok(ErgodicResult {
        lambda,
        mu,
        mu_extrapolated,
        u,
        reference: x0,
        trace,
        residual,
        refined,
        observed_order,
        order_flag,
        bound_ok,
        holder,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MuPoint {
    pub lambda: f64,
    pub mu: f64,
    pub mu_extrapolated: f64,
    pub residual: f64,
    pub refined: bool,
    pub bound_ok: bool,
    pub order_flag: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MuCurve {
    pub points: Vec<MuPoint>,
    /// True when `mu(lambda_{i+1}) <= mu(lambda_i) + tolerance` for every pair.
    pub nonincreasing: bool,
    /// Offending consecutive pairs `(lambda_i, lambda_{i+1}, increase)`.
    pub violations: Vec<(f64, f64, f64)>,
    /// `max |d mu| / |d lambda|` over consecutive points.
    pub modulus: f64,
}

impl MuCurve {
    pub fn strictly_decreasing(&self) -> bool {
        self.points.windows(2).all(|p| p[1].mu < p[0].mu)
    }
}

/// Monotonicity tolerance of the mu-curve verdict.
pub const MONOTONE_TOL: f64 = 1e-6;

/// Solves for `mu` at each `lambda` (in parallel) and audits the curve.
pub fn mu_curve(sys: &DiscreteSystem, lambdas: &[f64], schedule: &Schedule, opts: &SolverOptions) -> Result<MuCurve, StationaryError> {
    if lambdas.len() < 3 {
        return Err(StationaryError::InvalidInput("a mu-curve needs at least 3 lambda values".into()));
    }
    if lambdas.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(StationaryError::InvalidInput("lambda values must be strictly increasing".into()));
    }
    let results: Vec<Result<ErgodicResult, StationaryError>> =
        lambdas.par_iter().map(|&l| ergodic_solve(sys, l, schedule, opts)).collect();
    let mut points = vec![];
    for r in results {
        let r = r?;
        points.push(MuPoint {
            lambda: r.lambda,
            mu: r.mu,
            mu_extrapolated: r.mu_extrapolated,
            residual: r.residual,
            refined: r.refined,
            bound_ok: r.bound_ok,
            order_flag: r.order_flag,
        });
    }
    let mut violations = vec![];
    let mut modulus: f64 = 0.0;
    for p in points.windows(2) {
        let inc = p[1].mu - p[0].mu;
        if inc > MONOTONE_TOL {
            violations.push((p[0].lambda, p[1].lambda, inc));
        }
        modulus = modulus.max(inc.abs() / (p[1].lambda - p[0].lambda));
    }
    Ok(MuCurve { nonincreasing: violations.is_empty(), violations, points, modulus })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedPoint {
    pub lambda: f64,
    pub mu: f64,
    /// `lambda - mu(lambda)` at the returned point.
    pub chi: f64,
    pub bracket: (f64, f64),
    pub evaluations: usize,
}

/// Bisection on `chi(lambda) = lambda - mu(lambda)`, which is increasing.
pub fn find_fixed_point(
    sys: &DiscreteSystem,
    bracket: (f64, f64),
    tol: f64,
    schedule: &Schedule,
    opts: &SolverOptions,
) -> Result<FixedPoint, StationaryError> {
    let (mut lo, mut hi) = bracket;
    if !(lo < hi) || !(tol > 0.0) {
        return Err(StationaryError::InvalidInput("need lambda_lo < lambda_hi and tol > 0".into()));
    }
    let mut evals = 0;
    let mut chi = |l: f64| -> Result<(f64, f64), StationaryError> {
        evals += 1;
        let mu = ergodic_solve(sys, l, schedule, opts)?.mu;
        Ok((l - mu, mu))
    };
    let (mut c_lo, mut mu_lo) = chi(lo)?;
    let (mut c_hi, mut mu_hi) = chi(hi)?;
    let mut width = hi - lo;
    let mut expansions = 0;
    while c_lo > 0.0 || c_hi < 0.0 {
        if expansions >= 30 {
            return Err(StationaryError::BracketNotFound { lo, hi });
        }
        expansions += 1;
        width *= 2.0;
        if c_lo > 0.0 {
            hi = lo;
            c_hi = c_lo;
            mu_hi = mu_lo;
            lo -= width;
            (c_lo, mu_lo) = chi(lo)?;
        } else {
            lo = hi;
            c_lo = c_hi;
            mu_lo = mu_hi;
            hi += width;
            (c_hi, mu_hi) = chi(hi)?;
        }
    }
    let initial = (lo, hi);
    if c_lo.abs() <= tol {
        return Ok(FixedPoint { lambda: lo, mu: mu_lo, chi: c_lo, bracket: initial, evaluations: evals });
    }
    if c_hi.abs() <= tol {
        return Ok(FixedPoint { lambda: hi, mu: mu_hi, chi: c_hi, bracket: initial, evaluations: evals });
    }
    for _ in 0..200 {
        // regula falsi guarded by bisection
        let mid = {
            let secant = lo - c_lo * (hi - lo) / (c_hi - c_lo);
            let half = 0.5 * (lo + hi);
            if secant > lo + 0.1 * (hi - lo) && secant < hi - 0.1 * (hi - lo) {
                secant
            } else {
                half
            }
        };
        let (c, mu) = chi(mid)?;
        if c.abs() <= tol {
            return Ok(FixedPoint { lambda: mid, mu, chi: c, bracket: initial, evaluations: evals });
        }
        if c < 0.0 {
            lo = mid;
            c_lo = c;
        } else {
            hi = mid;
            c_hi = c;
        }
        if hi - lo <= f64::EPSILON * (1.0 + lo.abs()) {
            return Err(StationaryError::NonConvergence { iterations: evals, residual: c.abs() });
        }
    }
    Err(StationaryError::NonConvergence { iterations: evals, residual: c_lo.abs().min(c_hi.abs()) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub mu1: f64,
    pub mu2: f64,
    pub delta_mu: f64,
    /// Sampled `sup |F1 - F2|`.
    pub f_diff: f64,
    /// Sampled `sup |L1 - L2|`.
    pub l_diff: f64,
    /// `|delta mu| / (f_diff + l_diff)`, absent when the operators coincide.
    pub ratio: Option<f64>,
    pub cap: f64,
    pub violated: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensitivityOptions {
    pub n_samples: usize,
    pub seed: u64,
    /// Bound on `|p|` and `|M|` entries in the sampling window.
    pub window: f64,
    pub cap: f64,
}

impl Default for SensitivityOptions {
    fn default() -> Self {
        Self { n_samples: 10_000, seed: 0, window: 10.0, cap: 10.0 }
    }
}

/// Compares `mu` between two systems on the same grid and `lambda`.
pub fn sensitivity_check(
    sys1: &DiscreteSystem,
    sys2: &DiscreteSystem,
    lambda: f64,
    schedule: &Schedule,
    opts: &SolverOptions,
    sopts: &SensitivityOptions,
) -> Result<SensitivityReport, StationaryError> {
    if sys1.len() != sys2.len() || sys1.grid().domain() != sys2.grid().domain() {
        return Err(StationaryError::InvalidInput("systems must share the grid".into()));
    }
    let mu1 = ergodic_solve(sys1, lambda, schedule, opts)?.mu;
    let mu2 = ergodic_solve(sys2, lambda, schedule, opts)?.mu;
    let domain = sys1.grid().domain();
    let dim = domain.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(sopts.seed);
    let r = sopts.window;
    let (mut fd, mut ld): (f64, f64) = (0.0, 0.0);
    for _ in 0..sopts.n_samples.max(1) {
        let x = domain.sample_interior(&mut rng);
        let mut p = [0.0; 2];
        let mut m: Mat2 = [[0.0; 2]; 2];
        for k in 0..dim {
            p[k] = rng.random_range(-r..r);
            for j in k..dim {
                let v = rng.random_range(-r..r);
                m[k][j] = v;
                m[j][k] = v;
            }
        }
        fd = fd.max((sys1.fspec().eval_small(&x, &p, &m, dim) - sys2.fspec().eval_small(&x, &p, &m, dim)).abs());
        let xb = domain.sample_boundary(&mut rng);
        let n = domain.normal_near(&xb);
        let l = |s: &BoundaryOperatorSpec| s.eval_with(&xb, &s.direction_at(&xb, &n)[..dim], &p[..dim]);
        ld = ld.max((l(sys1.lspec()) - l(sys2.lspec())).abs());
    }
    let delta_mu = mu2 - mu1;
    let denom = fd + ld;
    let ratio = (denom > 1e-14).then(|| delta_mu.abs() / denom);
    Ok(SensitivityReport {
        mu1,
        mu2,
        delta_mu,
        f_diff: fd,
        l_diff: ld,
        ratio,
        cap: sopts.cap,
        violated: ratio.is_some_and(|q| q > sopts.cap),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniquenessReport {
    pub restarts: usize,
    /// Max over pairs of restarts of `osc(u_i - u_j)`.
    pub oscillation: f64,
    pub mus: Vec<f64>,
}

/// Solves from random warm starts and measures how far the normalized
/// solutions differ.
pub fn uniqueness_probe(
    sys: &DiscreteSystem,
    lambda: f64,
    n_restarts: usize,
    rng_seed: u64,
    schedule: &Schedule,
    opts: &SolverOptions,
) -> Result<UniquenessReport, StationaryError> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut sols = vec![];
    let mut mus = vec![];
    for _ in 0..n_restarts.max(1) {
        let warm: Vec<f64> = (0..sys.len()).map(|_| rng.random_range(-5.0..5.0)).collect();
        let r = ergodic_solve_from(sys, lambda, schedule, opts, Some(&warm))?;
        mus.push(r.mu);
        sols.push(r.u);
    }
    let mut osc: f64 = 0.0;
    for i in 0..sols.len() {
        for j in i + 1..sols.len() {
            let d = sols[i].iter().zip(&sols[j]).map(|(a, b)| a - b);
            let (lo, hi) = d.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            osc = osc.max(hi - lo);
        }
    }
    Ok(UniquenessReport { restarts: sols.len(), oscillation: osc, mus })
}

/// Largest pair count evaluated exactly by [`holder_seminorm`].
const HOLDER_EXACT_LIMIT: usize = 4096;

/// `max |u_i - u_j| / |x_i - x_j|^beta` over node pairs (strided subsample
/// on large grids). Returns NaN for `beta` outside `(0, 1]`.
pub fn holder_seminorm(u: &[f64], grid: &Grid, beta: f64) -> f64 {
    if !(beta > 0.0 && beta <= 1.0) || u.len() != grid.len() {
        return f64::NAN;
    }
    let stride = grid.len().div_ceil(HOLDER_EXACT_LIMIT).max(1);
    let idx: Vec<usize> = (0..grid.len()).step_by(stride).collect();
    let mut best: f64 = 0.0;
    for (a, &i) in idx.iter().enumerate() {
        for &j in &idx[a + 1..] {
            let d = crate::domain::dist2(grid.point(i), grid.point(j)).sqrt();
            if d > 0.0 {
                best = best.max((u[i] - u[j]).abs() / d.powf(beta));
            }
        }
    }
    best
}
