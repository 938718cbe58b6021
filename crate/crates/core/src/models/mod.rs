//! Interior operator `F`, boundary operator `L`, their recession limits and
//! randomized probes of the structural assumptions.

mod assumptions;
mod fields;

pub use assumptions::{check_assumptions, check_assumptions_with, AssumptionReport, ProbeConfig, ProbeResult};
pub use fields::{MatrixField, ScalarField, VectorField};

use nalgebra::{DMatrix, Matrix2, SymmetricEigen};
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;
use thiserror::Error;

use crate::domain::DomainSpec;

/// Row-major 2x2 buffer; 1D problems use the `[0][0]` entry only.
pub type Mat2 = [[f64; 2]; 2];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("point is not on the boundary (distance {distance:.3e})")]
    NotOnBoundary { distance: f64 },
    #[error("invalid operator: {}", .0.join("; "))]
    Invalid(Vec<String>),
}

/// One affine branch `-Tr(a M) - <b, p> - f` with the factor conventions
/// already folded into `a`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearCoeffs {
    pub a: Mat2,
    pub b: [f64; 2],
    pub f: f64,
}

impl LinearCoeffs {
    pub fn eval(&self, p: &[f64; 2], m: &Mat2, dim: usize) -> f64 {
        let mut v = -self.f;
        for i in 0..dim {
            v -= self.b[i] * p[i];
            for j in 0..dim {
                v -= self.a[i][j] * m[j][i];
            }
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlBranch {
    pub diffusion: MatrixField,
    #[serde(default)]
    pub drift: Option<VectorField>,
    #[serde(default)]
    pub cost: Option<ScalarField>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum HamiltonianSpec {
    /// `F = -Tr(a M) - <b, p> - f`.
    Linear {
        diffusion: MatrixField,
        #[serde(default)]
        drift: Option<VectorField>,
        #[serde(default)]
        source: Option<ScalarField>,
    },
    /// `F = max_k { -1/2 Tr(a_k M) - <b_k, p> - f_k }`.
    Hjb { controls: Vec<ControlBranch> },
    /// `F = -M+(M) - K1 |p|` with Pucci's maximal operator for `kappa Id <= A <= K Id`.
    Pucci {
        kappa: f64,
        #[serde(rename = "big_k")]
        big_k: f64,
        #[serde(default)]
        gradient_bound: f64,
    },
}

fn eval_opt_vec(v: &Option<VectorField>, x: &[f64], dim: usize) -> [f64; 2] {
    let mut out = [0.0; 2];
    if let Some(v) = v {
        v.eval_into(x, &mut out[..dim]);
    }
    out
}

fn eval_opt_scalar(s: &Option<ScalarField>, x: &[f64]) -> f64 {
    s.as_ref().map_or(0.0, |s| s.eval(x))
}

/// Pucci's maximal operator: `K * sum(positive eigenvalues) + kappa * sum(negative eigenvalues)`.
pub fn pucci_max(kappa: f64, big_k: f64, m: &Mat2, dim: usize) -> f64 {
    let split = |e: f64| if e > 0.0 { big_k * e } else { kappa * e };
    if dim == 1 {
        return split(m[0][0]);
    }
    let eig = SymmetricEigen::new(Matrix2::new(m[0][0], m[0][1], m[1][0], m[1][1]));
    eig.eigenvalues.iter().map(|&e| split(e)).sum()
}

fn mat_from_dmatrix(m: &DMatrix<f64>, dim: usize) -> Result<Mat2, ModelError> {
    if m.nrows() != dim || m.ncols() != dim {
        return Err(ModelError::DimensionMismatch { expected: dim, got: m.nrows() });
    }
    let mut out = [[0.0; 2]; 2];
    for i in 0..dim {
        for j in 0..dim {
            out[i][j] = 0.5 * (m[(i, j)] + m[(j, i)]);
        }
    }
    Ok(out)
}

fn vec2(p: &[f64], dim: usize) -> Result<[f64; 2], ModelError> {
    if p.len() != dim {
        return Err(ModelError::DimensionMismatch { expected: dim, got: p.len() });
    }
    let mut out = [0.0; 2];
    out[..dim].copy_from_slice(p);
    Ok(out)
}

pub(crate) fn norm(p: &[f64]) -> f64 {
    p.iter().map(|v| v * v).sum::<f64>().sqrt()
}

impl HamiltonianSpec {
    pub fn linear(diffusion: MatrixField, drift: Option<VectorField>, source: Option<ScalarField>) -> Self {
        HamiltonianSpec::Linear { diffusion, drift, source }
    }

    /// `F = -a u''`-type operator with constant scalar diffusion and source.
    pub fn laplacian(a: f64, source: f64) -> Self {
        HamiltonianSpec::Linear {
            diffusion: MatrixField::identity_times(a),
            drift: None,
            source: (source != 0.0).then(|| ScalarField::constant(source)),
        }
    }

    pub fn pucci(kappa: f64, big_k: f64, gradient_bound: f64) -> Self {
        HamiltonianSpec::Pucci { kappa, big_k, gradient_bound }
    }

    /// Lists every violated structural requirement.
    pub fn violations(&self, dim: usize) -> Vec<String> {
        let mut out = vec![];
        match self {
            HamiltonianSpec::Linear { diffusion, drift, source } => {
                diffusion.check(dim, "diffusion", &mut out);
                if let Some(d) = drift {
                    d.check(dim, "drift", &mut out);
                }
                if let Some(s) = source {
                    s.check(dim, "source", &mut out);
                }
            }
            HamiltonianSpec::Hjb { controls } => {
                if controls.is_empty() {
                    out.push("HJB control set must be nonempty".into());
                }
                for (k, c) in controls.iter().enumerate() {
                    c.diffusion.check(dim, &format!("controls[{k}].diffusion"), &mut out);
                    if let Some(d) = &c.drift {
                        d.check(dim, &format!("controls[{k}].drift"), &mut out);
                    }
                    if let Some(s) = &c.cost {
                        s.check(dim, &format!("controls[{k}].cost"), &mut out);
                    }
                }
            }
            HamiltonianSpec::Pucci { kappa, big_k, gradient_bound } => {
                if !(*kappa > 0.0) {
                    out.push("Pucci kappa must be positive".into());
                }
                if !(big_k >= kappa) {
                    out.push("Pucci K must satisfy K >= kappa".into());
                }
                if !(*gradient_bound >= 0.0) {
                    out.push("Pucci gradient bound must be nonnegative".into());
                }
            }
        }
        out
    }

    pub fn validate(&self, dim: usize) -> Result<(), ModelError> {
        let v = self.violations(dim);
        if v.is_empty() {
            Ok(())
        } else {
            Err(ModelError::Invalid(v))
        }
    }

    /// Affine branches at `x` (one for `Linear`, one per control for `Hjb`,
    /// empty for `Pucci`).
    pub fn branches_at(&self, x: &[f64], dim: usize) -> SmallVec<[LinearCoeffs; 4]> {
        let mut out = SmallVec::new();
        match self {
            HamiltonianSpec::Linear { diffusion, drift, source } => {
                let mut a = [[0.0; 2]; 2];
                diffusion.eval_into(x, dim, &mut a);
                out.push(LinearCoeffs { a, b: eval_opt_vec(drift, x, dim), f: eval_opt_scalar(source, x) });
            }
            HamiltonianSpec::Hjb { controls } => {
                for c in controls {
                    let mut a = [[0.0; 2]; 2];
                    c.diffusion.eval_into(x, dim, &mut a);
                    for row in a.iter_mut() {
                        for v in row.iter_mut() {
                            *v *= 0.5;
                        }
                    }
                    out.push(LinearCoeffs { a, b: eval_opt_vec(&c.drift, x, dim), f: eval_opt_scalar(&c.cost, x) });
                }
            }
            HamiltonianSpec::Pucci { .. } => {}
        }
        out
    }

    /// Evaluation on fixed-size buffers; the caller guarantees dimensions.
    pub fn eval_small(&self, x: &[f64], p: &[f64; 2], m: &Mat2, dim: usize) -> f64 {
        match self {
            HamiltonianSpec::Pucci { kappa, big_k, gradient_bound } => {
                -pucci_max(*kappa, *big_k, m, dim) - gradient_bound * norm(&p[..dim])
            }
            _ => self
                .branches_at(x, dim)
                .iter()
                .map(|b| b.eval(p, m, dim))
                .fold(f64::NEG_INFINITY, f64::max),
        }
    }

    /// Recession limit `F_inf(x, p, M)`: zeroth-order parts dropped.
    pub fn recession_limit_small(&self, x: &[f64], p: &[f64; 2], m: &Mat2, dim: usize) -> f64 {
        match self {
            HamiltonianSpec::Pucci { .. } => self.eval_small(x, p, m, dim),
            _ => self
                .branches_at(x, dim)
                .iter()
                .map(|b| LinearCoeffs { f: 0.0, ..*b }.eval(p, m, dim))
                .fold(f64::NEG_INFINITY, f64::max),
        }
    }

    /// `F(x, 0, 0)`.
    pub fn zeroth_order(&self, x: &[f64], dim: usize) -> f64 {
        self.eval_small(x, &[0.0; 2], &[[0.0; 2]; 2], dim)
    }

    /// Diffusion strength across the boundary at `x` in direction `n`,
    /// used to weight the half-cell interior contribution at boundary nodes.
    pub fn normal_diffusion(&self, x: &[f64], n: &[f64], dim: usize) -> f64 {
        let quad = |a: &Mat2| (0..dim).map(|i| (0..dim).map(|j| n[i] * a[i][j] * n[j]).sum::<f64>()).sum::<f64>();
        match self {
            HamiltonianSpec::Pucci { kappa, big_k, .. } => 0.5 * (kappa + big_k),
            _ => self.branches_at(x, dim).iter().map(|b| quad(&b.a)).fold(0.0, f64::max),
        }
    }

    /// Smallest eigenvalue of the diffusion over all branches at `x`.
    pub fn min_diffusion(&self, x: &[f64], dim: usize) -> f64 {
        let min_eig = |a: &Mat2| {
            if dim == 1 {
                a[0][0]
            } else {
                let tr = a[0][0] + a[1][1];
                let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
                0.5 * tr - (0.25 * tr * tr - det).max(0.0).sqrt()
            }
        };
        match self {
            HamiltonianSpec::Pucci { kappa, .. } => *kappa,
            _ => self.branches_at(x, dim).iter().map(|b| min_eig(&b.a)).fold(f64::INFINITY, f64::min),
        }
    }
}

/// `F(x, p, M)`.
pub fn eval_f(spec: &HamiltonianSpec, x: &[f64], p: &[f64], m: &DMatrix<f64>) -> Result<f64, ModelError> {
    let dim = x.len();
    if !(1..=2).contains(&dim) {
        return Err(ModelError::DimensionMismatch { expected: 2, got: dim });
    }
    let p = vec2(p, dim)?;
    let m = mat_from_dmatrix(m, dim)?;
    Ok(spec.eval_small(x, &p, &m, dim))
}

/// `t^{-1} F(x, t p, t M)`.
pub fn recession_f(spec: &HamiltonianSpec, x: &[f64], p: &[f64], m: &DMatrix<f64>, t: f64) -> Result<f64, ModelError> {
    Ok(eval_f(spec, x, &p.iter().map(|v| t * v).collect::<Vec<_>>(), &(m * t))? / t)
}

/// `F_inf(x, p, M) = lim t^{-1} F(x, t p, t M)`.
pub fn recession_limit_f(spec: &HamiltonianSpec, x: &[f64], p: &[f64], m: &DMatrix<f64>) -> Result<f64, ModelError> {
    let dim = x.len();
    let p = vec2(p, dim)?;
    let m = mat_from_dmatrix(m, dim)?;
    Ok(spec.recession_limit_small(x, &p, &m, dim))
}

fn default_nu() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BoundaryOperatorSpec {
    /// `L = <p, gamma> + g`; `direction` defaults to the outward normal.
    LinearOblique {
        #[serde(default)]
        direction: Option<VectorField>,
        #[serde(default)]
        offset: Option<ScalarField>,
        #[serde(default = "default_nu")]
        nu: f64,
    },
    /// `L = <p, gamma> + theta |p| + g`.
    NonlinearNorm {
        #[serde(default)]
        direction: Option<VectorField>,
        #[serde(default)]
        offset: Option<ScalarField>,
        theta: f64,
        #[serde(default = "default_nu")]
        nu: f64,
    },
}

/// Relative tolerance for "on the boundary" checks.
const BOUNDARY_TOL: f64 = 1e-9;

impl BoundaryOperatorSpec {
    /// Neumann-type operator `<p, n> + g` with constant `g`.
    pub fn normal(g: f64) -> Self {
        BoundaryOperatorSpec::LinearOblique {
            direction: None,
            offset: (g != 0.0).then(|| ScalarField::constant(g)),
            nu: 1.0,
        }
    }

    pub fn with_offset(g: ScalarField) -> Self {
        BoundaryOperatorSpec::LinearOblique { direction: None, offset: Some(g), nu: 1.0 }
    }

    pub fn nonlinear_normal(theta: f64, g: f64) -> Self {
        BoundaryOperatorSpec::NonlinearNorm {
            direction: None,
            offset: (g != 0.0).then(|| ScalarField::constant(g)),
            theta,
            nu: 1.0,
        }
    }

    pub fn nu(&self) -> f64 {
        match self {
            BoundaryOperatorSpec::LinearOblique { nu, .. } | BoundaryOperatorSpec::NonlinearNorm { nu, .. } => *nu,
        }
    }

    pub fn theta(&self) -> f64 {
        match self {
            BoundaryOperatorSpec::LinearOblique { .. } => 0.0,
            BoundaryOperatorSpec::NonlinearNorm { theta, .. } => *theta,
        }
    }

    /// Lower bound on `L(x, p + t n) - L(x, p)` per unit `t`.
    pub fn declared_margin(&self) -> f64 {
        self.nu() - self.theta()
    }

    pub fn is_normal_direction(&self) -> bool {
        match self {
            BoundaryOperatorSpec::LinearOblique { direction, .. } | BoundaryOperatorSpec::NonlinearNorm { direction, .. } => {
                direction.is_none()
            }
        }
    }

    /// `gamma(x)` given the outward normal `n` at `x`.
    pub fn direction_at(&self, x: &[f64], n: &[f64]) -> [f64; 2] {
        let mut out = [0.0; 2];
        match self {
            BoundaryOperatorSpec::LinearOblique { direction, .. } | BoundaryOperatorSpec::NonlinearNorm { direction, .. } => {
                match direction {
                    None => out[..n.len()].copy_from_slice(n),
                    Some(d) => d.eval_into(x, &mut out[..n.len()]),
                }
            }
        }
        out
    }

    pub fn offset_at(&self, x: &[f64]) -> f64 {
        match self {
            BoundaryOperatorSpec::LinearOblique { offset, .. } | BoundaryOperatorSpec::NonlinearNorm { offset, .. } => {
                eval_opt_scalar(offset, x)
            }
        }
    }

    /// Evaluation with a known direction; no boundary check.
    pub fn eval_with(&self, x: &[f64], gamma: &[f64], p: &[f64]) -> f64 {
        let dot: f64 = p.iter().zip(gamma).map(|(a, b)| a * b).sum();
        dot + self.theta() * norm(p) + self.offset_at(x)
    }

    pub fn violations(&self, domain: &DomainSpec) -> Vec<String> {
        let dim = domain.dim();
        let mut out = vec![];
        let (direction, offset) = match self {
            BoundaryOperatorSpec::LinearOblique { direction, offset, .. }
            | BoundaryOperatorSpec::NonlinearNorm { direction, offset, .. } => (direction, offset),
        };
        if let Some(d) = direction {
            d.check(dim, "direction", &mut out);
        }
        if let Some(g) = offset {
            g.check(dim, "offset", &mut out);
        }
        let nu = self.nu();
        if !(nu > 0.0) {
            out.push("obliqueness constant nu must be positive".into());
        }
        let theta = self.theta();
        if !(theta >= 0.0) {
            out.push("theta must be nonnegative".into());
        }
        if theta >= nu {
            out.push(format!("theta = {theta} must be smaller than nu = {nu}"));
        }
        if !out.is_empty() {
            return out;
        }
        // obliqueness <gamma, n> >= nu on a deterministic boundary sweep
        let worst = boundary_sweep(domain)
            .iter()
            .map(|x| {
                let n = domain.normal_near(x);
                let g = self.direction_at(x, &n);
                g.iter().zip(&n).map(|(a, b)| a * b).sum::<f64>()
            })
            .fold(f64::INFINITY, f64::min);
        if worst < nu - 1e-12 {
            out.push(format!("<gamma, n> reaches {worst:.6} < nu = {nu}"));
        }
        out
    }

    pub fn validate(&self, domain: &DomainSpec) -> Result<(), ModelError> {
        let v = self.violations(domain);
        if v.is_empty() {
            Ok(())
        } else {
            Err(ModelError::Invalid(v))
        }
    }
}

/// Deterministic set of boundary points covering the boundary.
pub(crate) fn boundary_sweep(domain: &DomainSpec) -> Vec<Vec<f64>> {
    match domain {
        DomainSpec::Interval { lo, hi } => vec![vec![*lo], vec![*hi]],
        DomainSpec::Disk { center, radius } => (0..720)
            .map(|k| {
                let t = k as f64 * std::f64::consts::TAU / 720.0;
                vec![center[0] + radius * t.cos(), center[1] + radius * t.sin()]
            })
            .collect(),
    }
}

fn boundary_normal(domain: &DomainSpec, x: &[f64]) -> Result<Vec<f64>, ModelError> {
    if x.len() != domain.dim() {
        return Err(ModelError::DimensionMismatch { expected: domain.dim(), got: x.len() });
    }
    let tol = BOUNDARY_TOL * domain.diameter().max(1.0);
    domain.outward_normal(x, tol).map_err(|_| ModelError::NotOnBoundary { distance: domain.signed_distance(x).abs() })
}

/// `L(x, p)` at a boundary point.
pub fn eval_l(spec: &BoundaryOperatorSpec, domain: &DomainSpec, x: &[f64], p: &[f64]) -> Result<f64, ModelError> {
    let n = boundary_normal(domain, x)?;
    if p.len() != n.len() {
        return Err(ModelError::DimensionMismatch { expected: n.len(), got: p.len() });
    }
    let gamma = spec.direction_at(x, &n);
    Ok(spec.eval_with(x, &gamma[..n.len()], p))
}

/// `t^{-1} L(x, t p)`.
pub fn recession_l(spec: &BoundaryOperatorSpec, domain: &DomainSpec, x: &[f64], p: &[f64], t: f64) -> Result<f64, ModelError> {
    let tp: Vec<f64> = p.iter().map(|v| t * v).collect();
    Ok(eval_l(spec, domain, x, &tp)? / t)
}

/// `L_inf(x, p) = <p, gamma> + theta |p|`.
pub fn recession_limit_l(spec: &BoundaryOperatorSpec, domain: &DomainSpec, x: &[f64], p: &[f64]) -> Result<f64, ModelError> {
    Ok(eval_l(spec, domain, x, p)? - spec.offset_at(x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m1(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn linear_1d_value() {
        let f = HamiltonianSpec::laplacian(1.0, 0.0);
        assert_eq!(eval_f(&f, &[0.5], &[3.0], &m1(2.0)).unwrap(), -2.0);
    }

    #[test]
    fn pucci_2d_value() {
        let f = HamiltonianSpec::pucci(1.0, 2.0, 0.0);
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let v = eval_f(&f, &[0.0, 0.0], &[0.0, 0.0], &m).unwrap();
        assert!((v + 1.0).abs() < 1e-14);
    }

    #[test]
    fn hjb_picks_cheaper_branch() {
        let branch = |c: f64| ControlBranch {
            diffusion: MatrixField::identity_times(2.0),
            drift: Some(VectorField::constant(vec![0.3])),
            cost: Some(ScalarField::constant(c)),
        };
        let f = HamiltonianSpec::Hjb { controls: vec![branch(0.0), branch(1.0)] };
        let lin = HamiltonianSpec::linear(MatrixField::identity_times(1.0), Some(VectorField::constant(vec![0.3])), None);
        let a = eval_f(&f, &[0.2], &[1.5], &m1(-0.7)).unwrap();
        let b = eval_f(&lin, &[0.2], &[1.5], &m1(-0.7)).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let f = HamiltonianSpec::laplacian(1.0, 0.0);
        assert!(matches!(eval_f(&f, &[0.5], &[1.0, 2.0], &m1(0.0)), Err(ModelError::DimensionMismatch { .. })));
    }

    #[test]
    fn boundary_operator_values() {
        let d = DomainSpec::interval(0.0, 1.0);
        assert_eq!(eval_l(&BoundaryOperatorSpec::normal(0.0), &d, &[0.0], &[2.0]).unwrap(), -2.0);
        assert_eq!(eval_l(&BoundaryOperatorSpec::normal(0.5), &d, &[0.0], &[0.0]).unwrap(), 0.5);
        let nl = BoundaryOperatorSpec::nonlinear_normal(0.25, 0.0);
        assert_eq!(eval_l(&nl, &d, &[1.0], &[2.0]).unwrap(), 2.5);
        assert!(matches!(eval_l(&nl, &d, &[0.5], &[2.0]), Err(ModelError::NotOnBoundary { .. })));
    }

    #[test]
    fn recession_examples() {
        let f = HamiltonianSpec::laplacian(1.0, 7.0);
        for t in [1.0, 10.0, 1e3] {
            let r = recession_f(&f, &[0.5], &[1.0], &m1(2.0), t).unwrap();
            let lim = recession_limit_f(&f, &[0.5], &[1.0], &m1(2.0)).unwrap();
            assert!(((r - lim).abs() - 7.0 / t).abs() < 1e-12);
        }
        let p = HamiltonianSpec::pucci(1.0, 2.0, 0.5);
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, -2.0]);
        let base = eval_f(&p, &[0.0, 0.0], &[0.4, -1.0], &m).unwrap();
        for t in [0.5, 2.0, 10.0] {
            assert!((recession_f(&p, &[0.0, 0.0], &[0.4, -1.0], &m, t).unwrap() - base).abs() < 1e-12);
        }
        let d = DomainSpec::interval(0.0, 1.0);
        let l = BoundaryOperatorSpec::normal(1.0);
        let dev = recession_l(&l, &d, &[1.0], &[2.0], 4.0).unwrap() - recession_limit_l(&l, &d, &[1.0], &[2.0]).unwrap();
        assert!((dev - 0.25).abs() < 1e-14);
        assert_eq!(recession_limit_l(&BoundaryOperatorSpec::nonlinear_normal(0.2, 3.0), &d, &[0.0], &[0.0]).unwrap(), 0.0);
    }

    #[test]
    fn hjb_recession_deviation_bounded_by_costs() {
        let br = |c: f64, a: f64| ControlBranch {
            diffusion: MatrixField::identity_times(a),
            drift: None,
            cost: Some(ScalarField::constant(c)),
        };
        let f = HamiltonianSpec::Hjb { controls: vec![br(2.0, 1.0), br(-3.0, 2.0)] };
        let lim = recession_limit_f(&f, &[0.5], &[1.0], &m1(0.1)).unwrap();
        for t in [1.0, 5.0, 100.0] {
            let dev = (recession_f(&f, &[0.5], &[1.0], &m1(0.1), t).unwrap() - lim).abs();
            assert!(dev <= 3.0 / t + 1e-12);
        }
    }

    #[test]
    fn validation_catches_bad_specs() {
        assert!(HamiltonianSpec::pucci(2.0, 1.0, 0.0).validate(2).is_err());
        assert!(HamiltonianSpec::Hjb { controls: vec![] }.validate(1).is_err());
        let d = DomainSpec::unit_disk();
        let bad = BoundaryOperatorSpec::NonlinearNorm { direction: None, offset: None, theta: 1.0, nu: 1.0 };
        assert!(bad.validate(&d).is_err());
        let tilted = BoundaryOperatorSpec::LinearOblique {
            direction: Some(VectorField::constant(vec![1.0, 0.0])),
            offset: None,
            nu: 0.5,
        };
        assert!(tilted.validate(&d).is_err());
        assert!(BoundaryOperatorSpec::normal(0.0).validate(&d).is_ok());
    }

    fn sym2() -> impl Strategy<Value = DMatrix<f64>> {
        (-5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64).prop_map(|(a, b, c)| DMatrix::from_row_slice(2, 2, &[a, b, b, c]))
    }

    fn psd2() -> impl Strategy<Value = DMatrix<f64>> {
        (-2.0..2.0f64, -2.0..2.0f64, -2.0..2.0f64, -2.0..2.0f64).prop_map(|(a, b, c, d)| {
            let b = DMatrix::from_row_slice(2, 2, &[a, b, c, d]);
            &b * b.transpose()
        })
    }

    fn sample_specs() -> Vec<HamiltonianSpec> {
        vec![
            HamiltonianSpec::linear(
                MatrixField::Constant { value: vec![vec![2.0, 0.5], vec![0.5, 1.0]] },
                Some(VectorField::constant(vec![0.3, -1.0])),
                Some(ScalarField::affine(1.0, vec![0.5, 0.5])),
            ),
            HamiltonianSpec::Hjb {
                controls: vec![
                    ControlBranch { diffusion: MatrixField::identity_times(1.0), drift: None, cost: None },
                    ControlBranch {
                        diffusion: MatrixField::Diagonal { entries: vec![ScalarField::constant(3.0), ScalarField::constant(0.5)] },
                        drift: Some(VectorField::constant(vec![1.0, 0.0])),
                        cost: Some(ScalarField::constant(0.4)),
                    },
                ],
            },
            HamiltonianSpec::pucci(1.0, 2.0, 0.7),
        ]
    }

    proptest! {
        #[test]
        fn degenerate_ellipticity(m in sym2(), n in psd2(), p0 in -5.0..5.0f64, p1 in -5.0..5.0f64) {
            let x = [0.1, -0.2];
            for f in sample_specs() {
                let a = eval_f(&f, &x, &[p0, p1], &m).unwrap();
                let b = eval_f(&f, &x, &[p0, p1], &(&m + &n)).unwrap();
                prop_assert!(b <= a + 1e-12);
            }
        }

        #[test]
        fn hjb_is_max_of_branches(m in sym2(), p0 in -5.0..5.0f64, p1 in -5.0..5.0f64) {
            let f = &sample_specs()[1];
            let x = [0.3, 0.1];
            let v = eval_f(f, &x, &[p0, p1], &m).unwrap();
            let HamiltonianSpec::Hjb { controls } = f else { unreachable!() };
            let brute = controls.iter().map(|c| {
                let single = HamiltonianSpec::linear(c.diffusion.clone(), c.drift.clone(), c.cost.clone());
                // the linear form carries no 1/2 factor
                let half = DMatrix::from_fn(2, 2, |i, j| 0.5 * m[(i, j)]);
                eval_f(&single, &x, &[p0, p1], &half).unwrap()
            }).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!((v - brute).abs() < 1e-12);
        }

        #[test]
        fn boundary_margin(theta in 0.0..0.9f64, t in 0.0..10.0f64, angle in 0.0..std::f64::consts::TAU, p0 in -5.0..5.0f64, p1 in -5.0..5.0f64) {
            let d = DomainSpec::unit_disk();
            let l = BoundaryOperatorSpec::nonlinear_normal(theta, 0.3);
            let x = [angle.cos(), angle.sin()];
            let a = eval_l(&l, &d, &x, &[p0, p1]).unwrap();
            let b = eval_l(&l, &d, &x, &[p0 + t * x[0], p1 + t * x[1]]).unwrap();
            prop_assert!(b - a >= (1.0 - theta) * t - 1e-12);
        }

        #[test]
        fn recession_limits_are_homogeneous(m in sym2(), p0 in -5.0..5.0f64, p1 in -5.0..5.0f64) {
            let x = [0.2, 0.2];
            for f in sample_specs() {
                let base = recession_limit_f(&f, &x, &[p0, p1], &m).unwrap();
                for t in [0.5, 2.0, 10.0] {
                    let scaled = recession_limit_f(&f, &x, &[t * p0, t * p1], &(&m * t)).unwrap() / t;
                    prop_assert!((scaled - base).abs() <= 1e-12 * (1.0 + base.abs()));
                }
            }
        }
    }
}
