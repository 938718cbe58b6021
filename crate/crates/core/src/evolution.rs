//! Parabolic problems: `chi_t + F = lambda` with `L = mu` (fixed boundary
//! relation) and `phi_t + F = 0` with `phi_t + L = 0` (dynamic boundary).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scheme::{newton, DiscreteSystem, NewtonOptions, SchemeError, Terms};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvolutionError {
    #[error("explicit step dt = {dt:.3e} exceeds the stability bound {max_dt:.3e}")]
    StabilityViolation { dt: f64, max_dt: f64 },
    #[error("horizon {horizon} is shorter than 10 relaxation times ({required})")]
    HorizonTooShort { horizon: f64, required: f64 },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Scheme(#[from] SchemeError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvolutionOptions {
    /// Time step; defaults to `cfl` times the explicit stability bound.
    pub dt: Option<f64>,
    pub cfl: f64,
    /// Backward Euler in time (Newton per step) instead of forward Euler.
    pub implicit: bool,
    /// Approximate number of recorded samples.
    pub n_records: usize,
    /// Number of stored field snapshots (evenly spaced over the records).
    pub n_snapshots: usize,
    /// Fraction of the horizon used for the tail slope fit.
    pub tail_fraction: f64,
    /// Newton tolerance for implicit steps.
    pub implicit_tol: f64,
    /// Optional reference field; `sup |chi - reference|` is then recorded.
    #[serde(skip)]
    pub reference: Option<Vec<f64>>,
}

impl Default for EvolutionOptions {
    fn default() -> Self {
        Self {
            dt: None,
            cfl: 0.9,
            implicit: false,
            n_records: 500,
            n_snapshots: 5,
            tail_fraction: 0.2,
            implicit_tol: 1e-10,
            reference: None,
        }
    }
}

/// Least-squares line `value = slope * t + intercept`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual of the fit.
    pub residual: f64,
    pub samples: usize,
}

/// Least-squares slope of `(t, v)` pairs.
pub fn fit_line(t: &[f64], v: &[f64]) -> SlopeFit {
    let n = t.len().min(v.len());
    if n < 2 {
        return SlopeFit { slope: f64::NAN, intercept: v.first().copied().unwrap_or(f64::NAN), residual: 0.0, samples: n };
    }
    let tm = t[..n].iter().sum::<f64>() / n as f64;
    let vm = v[..n].iter().sum::<f64>() / n as f64;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for i in 0..n {
        sxx += (t[i] - tm) * (t[i] - tm);
        sxy += (t[i] - tm) * (v[i] - vm);
    }
    let slope = sxy / sxx;
    let intercept = vm - slope * tm;
    let rss: f64 = (0..n).map(|i| (v[i] - slope * t[i] - intercept).powi(2)).sum();
    SlopeFit { slope, intercept, residual: (rss / n as f64).sqrt(), samples: n }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub time: f64,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub sup: Vec<f64>,
    pub inf: Vec<f64>,
    pub mean: Vec<f64>,
    pub x0_value: Vec<f64>,
    /// `osc(chi(t) - chi(0))`.
    pub osc_from_initial: Vec<f64>,
    /// `sup |chi(t) - reference|` when a reference field was supplied.
    pub reference_distance: Option<Vec<f64>>,
    pub snapshots: Vec<Snapshot>,
    pub final_values: Vec<f64>,
    pub dt: f64,
    pub steps: usize,
    pub horizon: f64,
    /// Relaxation time estimate `diam^2 / (pi^2 kappa_min)`.
    pub relaxation_time: f64,
    /// Tail fit of the spatial mean.
    pub mean_fit: SlopeFit,
    /// Tail fit of the value at the reference node.
    pub x0_fit: SlopeFit,
}

impl Trajectory {
    pub fn max_reference_distance(&self) -> Option<f64> {
        self.reference_distance.as_ref().map(|d| d.iter().copied().fold(0.0, f64::max))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Boundedness {
    Bounded,
    Growing(f64),
}

/// `Bounded` when the tail slope of the mean is within `slope_tol`.
pub fn classify_boundedness(traj: &Trajectory, slope_tol: f64) -> Result<Boundedness, EvolutionError> {
    let required = 10.0 * traj.relaxation_time;
    if traj.horizon < required {
        return Err(EvolutionError::HorizonTooShort { horizon: traj.horizon, required });
    }
    let s = traj.mean_fit.slope;
    Ok(if s.abs() <= slope_tol { Boundedness::Bounded } else { Boundedness::Growing(s) })
}

struct Recorder<'a> {
    every: usize,
    x0: usize,
    initial: Vec<f64>,
    reference: Option<&'a [f64]>,
    snapshot_every: usize,
    traj: Trajectory,
    count: usize,
}

impl<'a> Recorder<'a> {
    fn new(u0: &[f64], x0: usize, steps: usize, opts: &'a EvolutionOptions, dt: f64, horizon: f64, relax: f64) -> Self {
        let every = (steps / opts.n_records.max(1)).max(1);
        let n_rec = steps / every + 1;
        let snapshot_every = (n_rec / opts.n_snapshots.max(1)).max(1);
        Recorder {
            every,
            x0,
            initial: u0.to_vec(),
            reference: opts.reference.as_deref(),
            snapshot_every,
            traj: Trajectory {
                times: vec![],
                sup: vec![],
                inf: vec![],
                mean: vec![],
                x0_value: vec![],
                osc_from_initial: vec![],
                reference_distance: opts.reference.as_ref().map(|_| vec![]),
                snapshots: vec![],
                final_values: vec![],
                dt,
                steps,
                horizon,
                relaxation_time: relax,
                mean_fit: fit_line(&[], &[]),
                x0_fit: fit_line(&[], &[]),
            },
            count: 0,
        }
    }

    fn record(&mut self, t: f64, u: &[f64], force: bool) {
        if let Some(&last) = self.traj.times.last() {
            if t <= last {
                return;
            }
        }
        let n = u.len() as f64;
        let (mut lo, mut hi, mut sum, mut dlo, mut dhi) =
            (f64::INFINITY, f64::NEG_INFINITY, 0.0, f64::INFINITY, f64::NEG_INFINITY);
        for (v, v0) in u.iter().zip(&self.initial) {
            lo = lo.min(*v);
            hi = hi.max(*v);
            sum += v;
            dlo = dlo.min(v - v0);
            dhi = dhi.max(v - v0);
        }
        let tr = &mut self.traj;
        tr.times.push(t);
        tr.sup.push(hi.abs().max(lo.abs()));
        tr.inf.push(lo);
        tr.mean.push(sum / n);
        tr.x0_value.push(u[self.x0]);
        tr.osc_from_initial.push(dhi - dlo);
        if let (Some(r), Some(d)) = (self.reference, tr.reference_distance.as_mut()) {
            d.push(u.iter().zip(r).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        }
        if self.count.is_multiple_of(self.snapshot_every) || force {
            tr.snapshots.push(Snapshot { time: t, values: u.to_vec() });
        }
        self.count += 1;
    }

    fn finish(mut self, u: &[f64], tail_fraction: f64) -> Trajectory {
        let tr = &mut self.traj;
        tr.final_values = u.to_vec();
        let t_end = *tr.times.last().unwrap_or(&0.0);
        let start = t_end * (1.0 - tail_fraction.clamp(0.2, 1.0));
        let k = tr.times.partition_point(|&t| t < start);
        tr.mean_fit = fit_line(&tr.times[k..], &tr.mean[k..]);
        tr.x0_fit = fit_line(&tr.times[k..], &tr.x0_value[k..]);
        self.traj
    }
}

fn relaxation_time(sys: &DiscreteSystem) -> f64 {
    let d = sys.grid().domain().diameter();
    d * d / (std::f64::consts::PI.powi(2) * sys.min_diffusion())
}

/// Step size and count for horizon `t_end`.
fn choose_dt(sys: &DiscreteSystem, t_end: f64, opts: &EvolutionOptions, boundary_explicit: bool) -> Result<(f64, usize), EvolutionError> {
    if !(t_end > 0.0) {
        return Err(EvolutionError::InvalidInput("horizon must be positive".into()));
    }
    let mut max_dt = 1.0 / sys.max_interior_diagonal().max(1e-300);
    if boundary_explicit {
        max_dt = max_dt.min(1.0 / sys.max_boundary_diagonal().max(1e-300));
    }
    let dt = match opts.dt {
        Some(dt) => {
            if !(dt > 0.0) {
                return Err(EvolutionError::InvalidInput("dt must be positive".into()));
            }
            if !opts.implicit && dt > max_dt * (1.0 + 1e-12) {
                return Err(EvolutionError::StabilityViolation { dt, max_dt });
            }
            dt
        }
        None => {
            if opts.implicit {
                return Err(EvolutionError::InvalidInput("implicit stepping needs an explicit dt".into()));
            }
            opts.cfl * max_dt
        }
    };
    let steps = (t_end / dt).ceil().max(1.0) as usize;
    Ok((t_end / steps as f64, steps))
}

fn check_initial(sys: &DiscreteSystem, u0: &[f64], opts: &EvolutionOptions) -> Result<(), EvolutionError> {
    if u0.len() != sys.len() {
        return Err(SchemeError::LengthMismatch { expected: sys.len(), got: u0.len() }.into());
    }
    if let Some(r) = &opts.reference {
        if r.len() != sys.len() {
            return Err(EvolutionError::InvalidInput("reference field has the wrong length".into()));
        }
    }
    Ok(())
}

/// `chi_t + F(x, D chi, D2 chi) = lambda` with `L(x, D chi) = mu` on the boundary.
pub fn evolve_fixed_bc(
    sys: &DiscreteSystem,
    lambda: f64,
    mu: f64,
    u0: &[f64],
    t_end: f64,
    opts: &EvolutionOptions,
) -> Result<Trajectory, EvolutionError> {
    check_initial(sys, u0, opts)?;
    let (dt, steps) = choose_dt(sys, t_end, opts, false)?;
    let n = sys.len();
    let x0 = sys.grid().reference();
    let mut rec = Recorder::new(u0, x0, steps, opts, dt, t_end, relaxation_time(sys));
    let mut u = u0.to_vec();
    let mut next = u.clone();
    let mut shift = vec![0.0; n];
    let boundary: Vec<usize> = sys.grid().boundary_indices().collect();
    let interior: Vec<usize> = sys.grid().interior_indices().collect();
    let stat = Terms::stationary(lambda, mu);
    // the initial boundary values are made consistent with the relation
    {
        let t = Terms { corr_eps: 1.0 / dt, shift: Some(&u.iter().map(|v| v / dt).collect::<Vec<_>>()), ..stat };
        let mut w = u.clone();
        for &b in &boundary {
            sys.solve_boundary_value(b, &t, &mut w)?;
        }
        u = w;
    }
    rec.record(0.0, &u, true);
    for step in 1..=steps {
        for i in 0..n {
            shift[i] = u[i] / dt;
        }
        if opts.implicit {
            let t = Terms { eps: 1.0 / dt, corr_eps: 1.0 / dt, shift: Some(&shift), ..stat };
            let mut c = 0.0;
            next.copy_from_slice(&u);
            newton(sys, &t, &mut next, &mut c, None, NewtonOptions { tol: opts.implicit_tol, max_iter: 100 })?;
        } else {
            for &i in &interior {
                next[i] = u[i] - dt * sys.eval_node(i, &stat, &u, 0.0, None);
            }
            let t = Terms { corr_eps: 1.0 / dt, shift: Some(&shift), ..stat };
            for &b in &boundary {
                next[b] = u[b];
                sys.solve_boundary_value(b, &t, &mut next)?;
            }
        }
        std::mem::swap(&mut u, &mut next);
        if step % rec.every == 0 || step == steps {
            rec.record(step as f64 * dt, &u, step == steps);
        }
    }
    Ok(rec.finish(&u, opts.tail_fraction))
}

/// `phi_t + F(x, D phi, D2 phi) = 0` with `phi_t + L(x, D phi) = 0` on the boundary.
pub fn evolve_dynamic_bc(sys: &DiscreteSystem, phi0: &[f64], t_end: f64, opts: &EvolutionOptions) -> Result<Trajectory, EvolutionError> {
    check_initial(sys, phi0, opts)?;
    let (dt, steps) = choose_dt(sys, t_end, opts, true)?;
    let n = sys.len();
    let x0 = sys.grid().reference();
    let mut rec = Recorder::new(phi0, x0, steps, opts, dt, t_end, relaxation_time(sys));
    let mut u = phi0.to_vec();
    let mut next = u.clone();
    let mut shift = vec![0.0; n];
    let stat = Terms::stationary(0.0, 0.0);
    rec.record(0.0, &u, true);
    for step in 1..=steps {
        if opts.implicit {
            for i in 0..n {
                shift[i] = u[i] / dt;
            }
            let t = Terms { eps: 1.0 / dt, alpha: 1.0 / dt, corr_eps: 1.0 / dt, shift: Some(&shift), shift_mu: true, ..stat };
            let mut c = 0.0;
            next.copy_from_slice(&u);
            newton(sys, &t, &mut next, &mut c, None, NewtonOptions { tol: opts.implicit_tol, max_iter: 100 })?;
        } else {
            for i in 0..n {
                next[i] = if sys.is_boundary(i) {
                    u[i] + dt * sys.dynamic_boundary_rate(i, &u)
                } else {
                    u[i] - dt * sys.eval_node(i, &stat, &u, 0.0, None)
                };
            }
        }
        std::mem::swap(&mut u, &mut next);
        if step % rec.every == 0 || step == steps {
            rec.record(step as f64 * dt, &u, step == steps);
        }
    }
    Ok(rec.finish(&u, opts.tail_fraction))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{DomainSpec, Grid};
    use crate::models::{BoundaryOperatorSpec, HamiltonianSpec, ScalarField};
    use crate::stationary::{ergodic_solve, Schedule, SolverOptions};
    use std::sync::Arc;

    fn model(n: usize, g0: f64, g1: f64) -> DiscreteSystem {
        let grid = Arc::new(Grid::new(DomainSpec::interval(0.0, 1.0), n).unwrap());
        let l = BoundaryOperatorSpec::with_offset(ScalarField::affine(g0, vec![g1 - g0]));
        DiscreteSystem::new(grid, HamiltonianSpec::laplacian(1.0, 0.0), l).unwrap()
    }

    fn stationary(sys: &DiscreteSystem, lambda: f64) -> (Vec<f64>, f64) {
        let r = ergodic_solve(sys, lambda, &Schedule::default(), &SolverOptions::default()).unwrap();
        (r.u, r.mu)
    }

    #[test]
    fn steady_state_is_preserved() {
        let sys = model(21, 0.0, 0.0);
        let (u, mu) = stationary(&sys, 1.0);
        let opts = EvolutionOptions { reference: Some(u.clone()), ..Default::default() };
        let tr = evolve_fixed_bc(&sys, 1.0, mu, &u, 2.0, &opts).unwrap();
        assert!(tr.max_reference_distance().unwrap() <= 1e-6);
        let tr = evolve_fixed_bc(&sys, 1.0, mu, &u, 2.0, &EvolutionOptions { dt: Some(0.01), implicit: true, ..opts }).unwrap();
        assert!(tr.max_reference_distance().unwrap() <= 1e-6);
    }

    #[test]
    fn perturbations_do_not_grow() {
        let sys = model(21, 1.0, 2.0);
        let (u, mu) = stationary(&sys, 0.5);
        let u0: Vec<f64> = u.iter().enumerate().map(|(i, v)| v + 0.3 * ((i as f64) * 0.7).sin()).collect();
        let dev0 = u0.iter().zip(&u).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let opts = EvolutionOptions { reference: Some(u.clone()), ..Default::default() };
        let tr = evolve_fixed_bc(&sys, 0.5, mu, &u0, 3.0, &opts).unwrap();
        assert!(tr.max_reference_distance().unwrap() <= dev0 + 1e-3);
    }

    #[test]
    fn mismatched_mu_travels_at_twice_the_offset() {
        let sys = model(21, 0.0, 0.0);
        let (u, mu) = stationary(&sys, 1.0);
        for (delta, sign) in [(0.2, 1.0), (-0.2, -1.0)] {
            let tr = evolve_fixed_bc(&sys, 1.0, mu + delta, &u, 20.0, &EvolutionOptions::default()).unwrap();
            match classify_boundedness(&tr, 0.05).unwrap() {
                Boundedness::Growing(s) => assert!((s - sign * 0.4).abs() <= 0.04, "{s}"),
                b => panic!("{b:?}"),
            }
        }
        let tr = evolve_fixed_bc(&sys, 1.0, mu, &u, 20.0, &EvolutionOptions::default()).unwrap();
        assert_eq!(classify_boundedness(&tr, 0.05).unwrap(), Boundedness::Bounded);
        let short = evolve_fixed_bc(&sys, 1.0, mu, &u, 0.5, &EvolutionOptions::default()).unwrap();
        assert!(matches!(classify_boundedness(&short, 0.05), Err(EvolutionError::HorizonTooShort { .. })));
    }

    #[test]
    fn explicit_step_guard() {
        let sys = model(21, 0.0, 0.0);
        let opts = EvolutionOptions { dt: Some(0.01), ..Default::default() };
        assert!(matches!(
            evolve_fixed_bc(&sys, 0.0, 0.0, &[0.0; 21], 1.0, &opts),
            Err(EvolutionError::StabilityViolation { .. })
        ));
    }

    #[test]
    fn traveling_solution_of_dynamic_problem() {
        let sys = model(21, 1.0, 2.0);
        // at lambda = mu = 1 the stationary pair is a traveling wave with speed -1
        let (u, mu) = stationary(&sys, 1.0);
        assert!((mu - 1.0).abs() < 1e-9);
        let tr = evolve_dynamic_bc(&sys, &u, 5.0, &EvolutionOptions::default()).unwrap();
        let x0 = sys.grid().reference();
        for (t, v) in tr.times.iter().zip(&tr.x0_value) {
            assert!((v - (u[x0] - t)).abs() < 1e-6);
        }
        let tr = evolve_dynamic_bc(&sys, &[0.0; 21], 10.0, &EvolutionOptions { dt: Some(0.01), implicit: true, ..Default::default() })
            .unwrap();
        assert!((tr.x0_fit.slope + 1.0).abs() < 1e-3);
    }

    #[test]
    fn comparison_and_constant_shift() {
        let sys = model(21, 0.4, -0.1);
        let u0: Vec<f64> = (0..21).map(|i| ((i as f64) * 0.9).cos()).collect();
        let v0: Vec<f64> = u0.iter().enumerate().map(|(i, v)| v + 0.1 + 0.05 * (i % 3) as f64).collect();
        let opts = EvolutionOptions { n_snapshots: 50, ..Default::default() };
        let a = evolve_fixed_bc(&sys, 0.3, 0.1, &u0, 1.0, &opts).unwrap();
        let b = evolve_fixed_bc(&sys, 0.3, 0.1, &v0, 1.0, &opts).unwrap();
        for (sa, sb) in a.snapshots.iter().zip(&b.snapshots) {
            assert!(sa.values.iter().zip(&sb.values).all(|(x, y)| *x <= y + 1e-9));
        }
        let shifted: Vec<f64> = u0.iter().map(|v| v + 3.0).collect();
        let c = evolve_fixed_bc(&sys, 0.3, 0.1, &shifted, 1.0, &opts).unwrap();
        for (x, y) in a.final_values.iter().zip(&c.final_values) {
            assert!((y - x - 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn line_fit_recovers_slope() {
        let t: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let v: Vec<f64> = t.iter().map(|x| 2.0 * x - 1.0).collect();
        let f = fit_line(&t, &v);
        assert!((f.slope - 2.0).abs() < 1e-12 && (f.intercept + 1.0).abs() < 1e-12 && f.residual < 1e-12);
    }
}
