//! Monotone finite-difference discretization of `F` and `L`.
//!
//! Interior nodes use central/Shortley-Weller second differences, the
//! monotone 7-point cross stencil for off-diagonal diffusion and upwind first
//! differences. Boundary nodes difference backwards along `-gamma` with
//! multilinear interpolation at the foot point, plus a half-cell correction
//! that accounts for the curvature term the one-sided difference drops.

use std::sync::Arc;

use nalgebra::{Matrix2, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;
use thiserror::Error;

use crate::domain::{DomainError, Grid, InteriorStencil, NodeClass, Weights};
use crate::linalg::{BandedLu, SparseRow};
use crate::models::{BoundaryOperatorSpec, HamiltonianSpec, LinearCoeffs, ModelError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchemeError {
    #[error("stencil unavailable at node {node}: {reason}")]
    StencilUnavailable { node: usize, reason: String },
    #[error("node {0} is not an interior node")]
    NotInterior(usize),
    #[error("node {0} is not a boundary node")]
    NotBoundary(usize),
    #[error("value vector has length {got}, grid has {expected} nodes")]
    LengthMismatch { expected: usize, got: usize },
    #[error("no convergence after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("singular linearization (zero pivot at row {0})")]
    Singular(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

/// Zeroth-order and right-hand-side parameters of the residual.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ResidualParams {
    pub eps: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub mu: f64,
}

/// Full set of zeroth-order terms, including the per-node shifts used by the
/// implicit time steppers.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Terms<'a> {
    pub lambda: f64,
    pub mu: f64,
    /// Coefficient of `u_i` at interior nodes.
    pub eps: f64,
    /// Coefficient of `u_b` in the boundary relation.
    pub alpha: f64,
    /// Coefficient of `u_b` inside the half-cell source argument.
    pub corr_eps: f64,
    /// Added to `lambda` (interior and half-cell argument) and optionally to `mu`.
    pub shift: Option<&'a [f64]>,
    pub shift_mu: bool,
}

impl Terms<'_> {
    pub fn from_params(p: &ResidualParams) -> Self {
        Terms {
            lambda: p.lambda,
            mu: p.mu,
            eps: p.eps,
            alpha: p.alpha,
            corr_eps: p.eps,
            shift: None,
            shift_mu: false,
        }
    }

    pub fn stationary(lambda: f64, mu: f64) -> Self {
        Terms { lambda, mu, eps: 0.0, alpha: 0.0, corr_eps: 0.0, shift: None, shift_mu: false }
    }

    #[inline]
    fn shift_at(&self, i: usize) -> f64 {
        self.shift.map_or(0.0, |s| s[i])
    }
}

type Form = SmallVec<[(usize, f64); 12]>;

fn form_add(f: &mut Form, j: usize, c: f64) {
    if c == 0.0 {
        return;
    }
    if let Some(e) = f.iter_mut().find(|e| e.0 == j) {
        e.1 += c;
    } else {
        f.push((j, c));
    }
}

fn form_axpy(f: &mut Form, s: f64, g: &Form) {
    for &(j, c) in g {
        form_add(f, j, s * c);
    }
}

#[inline]
fn form_dot(f: &Form, w: &[f64]) -> f64 {
    f.iter().map(|&(j, c)| c * w[j]).sum()
}

#[derive(Clone, Debug)]
struct Row {
    coeffs: Form,
    constant: f64,
}

/// Difference forms at one interior node.
#[derive(Clone, Debug)]
struct Differences {
    d2: [Form; 2],
    fwd: [Form; 2],
    bwd: [Form; 2],
    /// Monotone cross stencils for positive / negative off-diagonal entries.
    dxy: Option<(Form, Form)>,
    /// Central (non-monotone) cross difference, used only to pick Pucci candidates.
    dxy_central: Option<Form>,
}

impl Differences {
    fn new(i: usize, st: &InteriorStencil, h: f64) -> Self {
        let mut d2: [Form; 2] = Default::default();
        let mut fwd: [Form; 2] = Default::default();
        let mut bwd: [Form; 2] = Default::default();
        for (k, a) in st.axes.iter().enumerate() {
            let cm = 2.0 / (a.h_minus * (a.h_minus + a.h_plus));
            let cp = 2.0 / (a.h_plus * (a.h_minus + a.h_plus));
            form_add(&mut d2[k], i, -(cm + cp));
            form_add(&mut d2[k], a.minus, cm);
            form_add(&mut d2[k], a.plus, cp);
            form_add(&mut fwd[k], a.plus, 1.0 / a.h_plus);
            form_add(&mut fwd[k], i, -1.0 / a.h_plus);
            form_add(&mut bwd[k], i, 1.0 / a.h_minus);
            form_add(&mut bwd[k], a.minus, -1.0 / a.h_minus);
        }
        let (dxy, dxy_central) = match (st.is_uniform(h), st.diagonals) {
            (true, Some([pp, pm, mp, mm])) => {
                let s = 1.0 / (2.0 * h * h);
                let axis: [usize; 4] = [st.axes[0].plus, st.axes[0].minus, st.axes[1].plus, st.axes[1].minus];
                let mut plus = Form::new();
                let mut minus = Form::new();
                form_add(&mut plus, i, 2.0 * s);
                form_add(&mut minus, i, -2.0 * s);
                form_add(&mut plus, pp, s);
                form_add(&mut plus, mm, s);
                form_add(&mut minus, pm, -s);
                form_add(&mut minus, mp, -s);
                for &j in &axis {
                    form_add(&mut plus, j, -s);
                    form_add(&mut minus, j, s);
                }
                let q = 1.0 / (4.0 * h * h);
                let mut c = Form::new();
                form_add(&mut c, pp, q);
                form_add(&mut c, mm, q);
                form_add(&mut c, pm, -q);
                form_add(&mut c, mp, -q);
                (Some((plus, minus)), Some(c))
            }
            _ => (None, None),
        };
        Differences { d2, fwd, bwd, dxy, dxy_central }
    }

    /// Row of `-Tr(a D2u) - <b, Du> - f` with upwinding and the monotone cross stencil.
    fn linear_row(&self, node: usize, c: &LinearCoeffs, dim: usize) -> Result<Row, SchemeError> {
        let mut coeffs = Form::new();
        for k in 0..dim {
            form_axpy(&mut coeffs, -c.a[k][k], &self.d2[k]);
            let b = c.b[k];
            if b > 0.0 {
                form_axpy(&mut coeffs, -b, &self.fwd[k]);
            } else if b < 0.0 {
                form_axpy(&mut coeffs, -b, &self.bwd[k]);
            }
        }
        if dim == 2 {
            let a12 = 0.5 * (c.a[0][1] + c.a[1][0]);
            if a12 != 0.0 {
                self.add_cross(&mut coeffs, node, a12, c.a[0][0].min(c.a[1][1]))?;
            }
        }
        Ok(Row { coeffs, constant: -c.f })
    }

    fn add_cross(&self, coeffs: &mut Form, node: usize, a12: f64, diag_min: f64) -> Result<(), SchemeError> {
        let Some((plus, minus)) = &self.dxy else {
            return Err(SchemeError::StencilUnavailable {
                node,
                reason: "off-diagonal diffusion needs a full uniform 3x3 neighbourhood".into(),
            });
        };
        if a12.abs() > diag_min * (1.0 + 1e-12) {
            return Err(SchemeError::StencilUnavailable {
                node,
                reason: "diffusion matrix is not diagonally dominant; the cross stencil would not be monotone".into(),
            });
        }
        form_axpy(coeffs, -2.0 * a12, if a12 > 0.0 { plus } else { minus });
        Ok(())
    }

    /// Pucci second-order row `-(a11 D2x + a22 D2y + 2 a12 Dxy)`.
    fn matrix_row(&self, a11: f64, a22: f64, a12: f64) -> Form {
        let mut coeffs = Form::new();
        form_axpy(&mut coeffs, -a11, &self.d2[0]);
        form_axpy(&mut coeffs, -a22, &self.d2[1]);
        if a12 != 0.0 {
            let (plus, minus) = self.dxy.as_ref().expect("cross stencil checked by caller");
            form_axpy(&mut coeffs, -2.0 * a12, if a12 > 0.0 { plus } else { minus });
        }
        coeffs
    }
}

#[derive(Clone, Debug)]
enum InteriorOp {
    /// `max` over affine rows (Linear: one row, HJB: one per control).
    Max(SmallVec<[Row; 2]>),
    Pucci {
        /// Candidate rows `-Tr(A D2u)`; the operator takes their minimum.
        cands: SmallVec<[Form; 6]>,
        kappa: f64,
        big_k: f64,
        k1: f64,
        diff: Box<Differences>,
    },
}

#[derive(Clone, Debug)]
enum Curvature {
    None,
    /// `(trace, f)` per affine branch with positive trace.
    Branches(SmallVec<[(f64, f64); 4]>),
    Pucci { kappa: f64, big_k: f64, dim: f64 },
}

impl Curvature {
    /// Scalar `c` with `F(x, 0, c Id) = r`, and `dc/dr`.
    fn solve(&self, r: f64) -> (f64, f64) {
        match self {
            Curvature::None => (0.0, 0.0),
            Curvature::Branches(b) => {
                let mut best = (f64::NEG_INFINITY, 0.0);
                for &(t, f) in b {
                    let c = -(r + f) / t;
                    if c > best.0 {
                        best = (c, -1.0 / t);
                    }
                }
                best
            }
            Curvature::Pucci { kappa, big_k, dim } => {
                let k = if r < 0.0 { *big_k } else { *kappa };
                (-r / (dim * k), -1.0 / (dim * k))
            }
        }
    }
}

#[derive(Clone, Debug)]
struct BoundaryNode {
    weights: Weights,
    /// Step length along `-gamma` to the foot point.
    s: f64,
    gamma_norm: f64,
    theta: f64,
    g: f64,
    /// `(s / 2) |gamma|^2`, scaled by the half-cell factor at evaluation.
    hc: f64,
    curv: Curvature,
}

#[derive(Clone, Debug)]
enum NodeOp {
    Interior(InteriorOp),
    Boundary(BoundaryNode),
}

/// Discrete system on a grid: stencil tables plus residual parameters.
#[derive(Clone, Debug)]
pub struct DiscreteSystem {
    grid: Arc<Grid>,
    fspec: HamiltonianSpec,
    lspec: BoundaryOperatorSpec,
    pub params: ResidualParams,
    half_cell_factor: f64,
    ops: Vec<NodeOp>,
    dim: usize,
}

/// Multiples of `h` tried for the boundary foot point.
const FOOT_STEPS: [f64; 7] = [1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0];

impl DiscreteSystem {
    pub fn new(grid: Arc<Grid>, fspec: HamiltonianSpec, lspec: BoundaryOperatorSpec) -> Result<Self, SchemeError> {
        let dim = grid.dim();
        fspec.validate(dim)?;
        lspec.validate(grid.domain())?;
        let h = grid.h();
        let mut ops = Vec::with_capacity(grid.len());
        for i in 0..grid.len() {
            let x = grid.point(i);
            let op = match grid.class(i) {
                NodeClass::Interior(st) => {
                    let diff = Differences::new(i, st, h);
                    NodeOp::Interior(match &fspec {
                        HamiltonianSpec::Pucci { kappa, big_k, gradient_bound } => {
                            let (k, kk) = (*kappa, *big_k);
                            let mut cands: SmallVec<[Form; 6]> = SmallVec::new();
                            if dim == 1 {
                                cands.push(diff.matrix_row1(k));
                                cands.push(diff.matrix_row1(kk));
                            } else {
                                for (a, b) in [(k, k), (kk, kk), (kk, k), (k, kk)] {
                                    cands.push(diff.matrix_row(a, b, 0.0));
                                }
                                if diff.dxy.is_some() {
                                    let (m, d) = (0.5 * (k + kk), 0.5 * (kk - k));
                                    cands.push(diff.matrix_row(m, m, d));
                                    cands.push(diff.matrix_row(m, m, -d));
                                }
                            }
                            InteriorOp::Pucci { cands, kappa: k, big_k: kk, k1: *gradient_bound, diff: Box::new(diff) }
                        }
                        _ => {
                            let mut rows = SmallVec::new();
                            for c in fspec.branches_at(x, dim) {
                                rows.push(diff.linear_row(i, &c, dim)?);
                            }
                            InteriorOp::Max(rows)
                        }
                    })
                }
                NodeClass::Boundary { normal } => {
                    let n = &normal[..dim];
                    let gamma = lspec.direction_at(x, n);
                    let gnorm = crate::models::norm(&gamma[..dim]);
                    let mut found = None;
                    for k in FOOT_STEPS {
                        let s = k * h / gnorm;
                        let foot: SmallVec<[f64; 2]> = (0..dim).map(|d| x[d] - s * gamma[d]).collect();
                        if let Some(wts) = grid.interpolation_weights(&foot) {
                            found = Some((s, wts));
                            break;
                        }
                    }
                    let Some((s, weights)) = found else {
                        return Err(SchemeError::StencilUnavailable {
                            node: i,
                            reason: "no interpolation cell found along -gamma".into(),
                        });
                    };
                    let curv = match &fspec {
                        HamiltonianSpec::Pucci { kappa, big_k, .. } => {
                            Curvature::Pucci { kappa: *kappa, big_k: *big_k, dim: dim as f64 }
                        }
                        _ => {
                            let b: SmallVec<[(f64, f64); 4]> = fspec
                                .branches_at(x, dim)
                                .iter()
                                .map(|c| ((0..dim).map(|k| c.a[k][k]).sum::<f64>(), c.f))
                                .filter(|(t, _)| *t > 0.0)
                                .collect();
                            if b.is_empty() {
                                Curvature::None
                            } else {
                                Curvature::Branches(b)
                            }
                        }
                    };
                    NodeOp::Boundary(BoundaryNode {
                        weights,
                        s,
                        gamma_norm: gnorm,
                        theta: lspec.theta(),
                        g: lspec.offset_at(x),
                        hc: 0.5 * s * gnorm * gnorm,
                        curv,
                    })
                }
            };
            ops.push(op);
        }
        Ok(Self { grid, fspec, lspec, params: ResidualParams::default(), half_cell_factor: 1.0, ops, dim })
    }

    pub fn with_params(mut self, params: ResidualParams) -> Self {
        self.params = params;
        self
    }

    /// Scales the half-cell boundary correction (0 disables it).
    pub fn with_half_cell_factor(mut self, factor: f64) -> Self {
        self.half_cell_factor = factor;
        self
    }

    pub fn half_cell_factor(&self) -> f64 {
        self.half_cell_factor
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn grid_arc(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn fspec(&self) -> &HamiltonianSpec {
        &self.fspec
    }

    pub fn lspec(&self) -> &BoundaryOperatorSpec {
        &self.lspec
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn check_len(&self, u: &[f64]) -> Result<(), SchemeError> {
        if u.len() != self.len() {
            return Err(SchemeError::LengthMismatch { expected: self.len(), got: u.len() });
        }
        Ok(())
    }

    /// `F(x_i, D_h u, D2_h u) + eps u_i - lambda`.
    pub fn interior_residual(&self, u: &[f64], i: usize) -> Result<f64, SchemeError> {
        self.check_len(u)?;
        match self.ops.get(i) {
            Some(NodeOp::Interior(_)) => Ok(self.eval_node(i, &Terms::from_params(&self.params), u, 0.0, None)),
            _ => Err(SchemeError::NotInterior(i)),
        }
    }

    /// `L(x_b, D_h u) + alpha u_b - mu`, plus the half-cell correction.
    pub fn boundary_residual(&self, u: &[f64], i: usize) -> Result<f64, SchemeError> {
        self.check_len(u)?;
        match self.ops.get(i) {
            Some(NodeOp::Boundary(_)) => Ok(self.eval_node(i, &Terms::from_params(&self.params), u, 0.0, None)),
            _ => Err(SchemeError::NotBoundary(i)),
        }
    }

    pub fn assemble_residual(&self, u: &[f64]) -> Result<Vec<f64>, SchemeError> {
        self.check_len(u)?;
        let mut out = vec![0.0; self.len()];
        self.residual_into(&Terms::from_params(&self.params), u, 0.0, &mut out);
        Ok(out)
    }

    pub fn residual_sup_norm(&self, u: &[f64]) -> Result<f64, SchemeError> {
        Ok(sup_norm(&self.assemble_residual(u)?))
    }

    pub(crate) fn residual_into(&self, t: &Terms, w: &[f64], c: f64, out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.eval_node(i, t, w, c, None);
        }
    }

    pub(crate) fn linearize(&self, t: &Terms, w: &[f64], c: f64, res: &mut [f64], rows: &mut [SparseRow]) {
        for i in 0..self.len() {
            rows[i].clear();
            res[i] = self.eval_node(i, t, w, c, Some(&mut rows[i]));
        }
    }

    /// Residual at node `i` for the state `w + c`, where `c` is a constant
    /// offset that the difference operators annihilate. Optionally writes the
    /// (generalized) derivative row.
    pub(crate) fn eval_node(&self, i: usize, t: &Terms, w: &[f64], c: f64, row: Option<&mut SparseRow>) -> f64 {
        match &self.ops[i] {
            NodeOp::Interior(op) => {
                let (v, mut r) = self.eval_interior(op, w, row.is_some());
                let res = v + t.eps * (w[i] + c) - (t.lambda + t.shift_at(i));
                if let Some(row) = row {
                    push_row(row, &mut r, i, t.eps);
                }
                res
            }
            NodeOp::Boundary(b) => {
                let (l, dl, interp) = self.boundary_operator(b, i, w);
                let shift = t.shift_at(i);
                let arg = t.lambda + shift - t.corr_eps * (w[i] + c);
                let (cv, dc) = b.curv.solve(arg);
                let hc = self.half_cell_factor * b.hc;
                let mu = t.mu + if t.shift_mu { shift } else { 0.0 };
                let res = l + t.alpha * (w[i] + c) - mu + hc * cv;
                if let Some(row) = row {
                    let _ = interp;
                    row.push((i, dl + t.alpha - hc * dc * t.corr_eps));
                    for &(j, wt) in &b.weights {
                        row.push((j, -dl * wt));
                    }
                }
                res
            }
        }
    }

    /// `(L(x_b, D_h w), dL/dw_b, interpolated foot value)`.
    fn boundary_operator(&self, b: &BoundaryNode, i: usize, w: &[f64]) -> (f64, f64, f64) {
        let interp: f64 = b.weights.iter().map(|&(j, wt)| wt * w[j]).sum();
        let d = (w[i] - interp) / b.s;
        let sign = if d >= 0.0 { 1.0 } else { -1.0 };
        let l = d + b.theta * d.abs() / b.gamma_norm + b.g;
        (l, (1.0 + sign * b.theta / b.gamma_norm) / b.s, interp)
    }

    fn eval_interior(&self, op: &InteriorOp, w: &[f64], want_row: bool) -> (f64, Form) {
        match op {
            InteriorOp::Max(rows) => {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0;
                for (k, r) in rows.iter().enumerate() {
                    let v = form_dot(&r.coeffs, w) + r.constant;
                    if v > best {
                        best = v;
                        arg = k;
                    }
                }
                (best, if want_row { rows[arg].coeffs.clone() } else { Form::new() })
            }
            InteriorOp::Pucci { cands, kappa, big_k, k1, diff } => {
                let mut best = f64::INFINITY;
                let mut arg = 0;
                for (k, f) in cands.iter().enumerate() {
                    let v = form_dot(f, w);
                    if v < best {
                        best = v;
                        arg = k;
                    }
                }
                let mut form = Form::new();
                let mut eigen_form = None;
                if let Some(central) = &diff.dxy_central {
                    let xs = Matrix2::new(
                        form_dot(&diff.d2[0], w),
                        form_dot(central, w),
                        form_dot(central, w),
                        form_dot(&diff.d2[1], w),
                    );
                    let eig = SymmetricEigen::new(xs);
                    let mut a = Matrix2::zeros();
                    for k in 0..2 {
                        let v = eig.eigenvectors.column(k);
                        let s = if eig.eigenvalues[k] > 0.0 { *big_k } else { *kappa };
                        a += s * v * v.transpose();
                    }
                    let lim = a[(0, 0)].min(a[(1, 1)]);
                    let a12 = a[(0, 1)].clamp(-lim, lim);
                    let f = diff.matrix_row(a[(0, 0)], a[(1, 1)], a12);
                    let v = form_dot(&f, w);
                    if v < best {
                        best = v;
                        eigen_form = Some(f);
                    }
                }
                if want_row {
                    form = eigen_form.unwrap_or_else(|| cands[arg].clone());
                }
                let mut val = best;
                if *k1 > 0.0 {
                    let dim = self.dim;
                    let mut s = [0.0f64; 2];
                    let mut active: [Option<(&Form, f64)>; 2] = [None, None];
                    for k in 0..dim {
                        let fp = form_dot(&diff.fwd[k], w);
                        let bm = -form_dot(&diff.bwd[k], w);
                        if fp >= bm && fp > 0.0 {
                            s[k] = fp;
                            active[k] = Some((&diff.fwd[k], 1.0));
                        } else if bm > 0.0 {
                            s[k] = bm;
                            active[k] = Some((&diff.bwd[k], -1.0));
                        }
                    }
                    let norm = (s[0] * s[0] + s[1] * s[1]).sqrt();
                    val -= k1 * norm;
                    if want_row && norm > 0.0 {
                        for k in 0..dim {
                            if let Some((f, sg)) = active[k] {
                                form_axpy(&mut form, -k1 * sg * s[k] / norm, f);
                            }
                        }
                    }
                }
                (val, form)
            }
        }
    }

    /// Largest diagonal coefficient of the interior difference operator
    /// (bounds the explicit time step).
    pub fn max_interior_diagonal(&self) -> f64 {
        let mut best: f64 = 0.0;
        for (i, op) in self.ops.iter().enumerate() {
            if let NodeOp::Interior(op) = op {
                let diag = |f: &Form| f.iter().find(|e| e.0 == i).map_or(0.0, |e| e.1);
                let d = match op {
                    InteriorOp::Max(rows) => rows.iter().map(|r| diag(&r.coeffs)).fold(0.0, f64::max),
                    InteriorOp::Pucci { cands, k1, diff, .. } => {
                        let grad: f64 = (0..self.dim)
                            .map(|k| diag(&diff.bwd[k]).abs().max(diag(&diff.fwd[k]).abs()))
                            .sum();
                        cands.iter().map(diag).fold(0.0, f64::max) + k1 * grad
                    }
                };
                best = best.max(d);
            }
        }
        best
    }

    /// Largest diagonal coefficient of the boundary operator (bounds the
    /// explicit step of the dynamic boundary condition).
    pub fn max_boundary_diagonal(&self) -> f64 {
        let t = Terms::stationary(0.0, 0.0);
        let zeros = vec![0.0; self.len()];
        let mut row = SparseRow::new();
        let mut best: f64 = 0.0;
        for b in self.grid.boundary_indices() {
            row.clear();
            self.eval_node(b, &t, &zeros, 0.0, Some(&mut row));
            best = best.max(row.iter().filter(|e| e.0 == b).map(|e| e.1).sum());
        }
        best
    }

    /// Smallest diffusion eigenvalue over interior nodes.
    pub fn min_diffusion(&self) -> f64 {
        self.grid
            .interior_indices()
            .map(|i| self.fspec.min_diffusion(self.grid.point(i), self.dim))
            .fold(f64::INFINITY, f64::min)
    }

    pub(crate) fn is_boundary(&self, i: usize) -> bool {
        matches!(self.ops[i], NodeOp::Boundary(_))
    }

    /// Solves the boundary relation at node `b` for `w[b]` with every other
    /// value held fixed.
    pub(crate) fn solve_boundary_value(&self, b: usize, t: &Terms, w: &mut [f64]) -> Result<(), SchemeError> {
        let x0 = w[b];
        let mut row = SparseRow::new();
        let f = |x: f64, w: &mut [f64], row: &mut SparseRow| {
            w[b] = x;
            row.clear();
            let r = self.eval_node(b, t, w, 0.0, Some(row));
            (r, row.iter().find(|e| e.0 == b).map_or(0.0, |e| e.1))
        };
        let tol = 1e-13;
        let mut x = x0;
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        for _ in 0..200 {
            let (r, d) = f(x, w, &mut row);
            if r.abs() <= tol * (1.0 + x.abs()) {
                w[b] = x;
                return Ok(());
            }
            if r < 0.0 {
                lo = lo.max(x);
            } else {
                hi = hi.min(x);
            }
            let mut next = if d > 0.0 { x - r / d } else { f64::NAN };
            if !(next > lo && next < hi) {
                next = if lo.is_finite() && hi.is_finite() {
                    0.5 * (lo + hi)
                } else if lo.is_finite() {
                    lo + 2.0 * (lo - x0).abs().max(1.0)
                } else {
                    hi - 2.0 * (hi - x0).abs().max(1.0)
                };
            }
            if next == x {
                w[b] = x;
                return Ok(());
            }
            x = next;
        }
        let (r, _) = f(x, w, &mut row);
        Err(SchemeError::NonConvergence { iterations: 200, residual: r.abs() })
    }

    /// Rate `V` at boundary node `b` for the dynamic condition `phi_t + L = 0`,
    /// including the half-cell weighting: `V + L + hc c(-V) = 0`.
    pub(crate) fn dynamic_boundary_rate(&self, b: usize, w: &[f64]) -> f64 {
        let NodeOp::Boundary(node) = &self.ops[b] else { unreachable!("boundary node expected") };
        let (l, _, _) = self.boundary_operator(node, b, w);
        let hc = self.half_cell_factor * node.hc;
        // g(V) = V + l + hc c(-V) is increasing and piecewise linear.
        let mut v = -l;
        for _ in 0..50 {
            let (c, dc) = node.curv.solve(-v);
            let g = v + l + hc * c;
            let dg = 1.0 - hc * dc;
            let next = v - g / dg;
            if (next - v).abs() <= 1e-15 * (1.0 + v.abs()) {
                return next;
            }
            v = next;
        }
        v
    }
}

impl Differences {
    fn matrix_row1(&self, a: f64) -> Form {
        let mut coeffs = Form::new();
        form_axpy(&mut coeffs, -a, &self.d2[0]);
        coeffs
    }
}

fn push_row(row: &mut SparseRow, f: &mut Form, i: usize, diag: f64) {
    let mut has_diag = false;
    for &(j, c) in f.iter() {
        if j == i {
            row.push((j, c + diag));
            has_diag = true;
        } else {
            row.push((j, c));
        }
    }
    if !has_diag {
        row.push((i, diag));
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityAudit {
    pub probes: usize,
    pub violations: usize,
    /// Largest observed increase of a residual under a neighbour increase.
    pub worst: f64,
}

/// Randomized check that each node residual is nonincreasing in every
/// neighbouring value: random `u` in `[-1, 1]`, random node and stencil
/// neighbour, random increase of the neighbour.
pub fn monotonicity_audit(sys: &DiscreteSystem, probes: usize, seed: u64) -> MonotonicityAudit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = sys.len();
    let t = Terms::from_params(&sys.params);
    let mut out = MonotonicityAudit { probes, violations: 0, worst: 0.0 };
    let mut row = SparseRow::new();
    for _ in 0..probes {
        let u: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let i = rng.random_range(0..n);
        row.clear();
        let before = sys.eval_node(i, &t, &u, 0.0, Some(&mut row));
        let neighbours: Vec<usize> = row.iter().map(|e| e.0).filter(|&j| j != i).collect();
        if neighbours.is_empty() {
            continue;
        }
        let j = neighbours[rng.random_range(0..neighbours.len())];
        let mut v = u;
        v[j] += rng.random_range(1e-3..1.0);
        let increase = sys.eval_node(i, &t, &v, 0.0, None) - before;
        out.worst = out.worst.max(increase);
        if increase > 1e-10 {
            out.violations += 1;
        }
    }
    out
}

pub fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Newton iteration settings.
#[derive(Clone, Copy, Debug)]
pub(crate) struct NewtonOptions {
    pub tol: f64,
    pub max_iter: usize,
}

#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct NewtonOutcome {
    pub iterations: usize,
    pub residual: f64,
}

/// Newton / policy iteration on `R(w + c) = 0`.
///
/// With `normalize = Some(x0)` the state is kept as `w` with `w[x0] = 0`
/// plus the scalar offset `c`, so large constant components never enter the
/// difference operators (they annihilate constants) and the residual stays
/// accurate even when `c` is of order `1/alpha`.
pub(crate) fn newton(
    sys: &DiscreteSystem,
    t: &Terms,
    w: &mut [f64],
    c: &mut f64,
    normalize: Option<usize>,
    opts: NewtonOptions,
) -> Result<NewtonOutcome, SchemeError> {
    let n = sys.len();
    let mut res = vec![0.0; n];
    let mut rows: Vec<SparseRow> = vec![SparseRow::new(); n];
    let mut cached: Option<(Vec<SparseRow>, BandedLu)> = None;
    let mut trial = vec![0.0; n];
    let mut trial_res = vec![0.0; n];
    let mut stalls = 0;
    for it in 0..opts.max_iter {
        sys.linearize(t, w, *c, &mut res, &mut rows);
        let r = sup_norm(&res);
        if r <= opts.tol {
            return Ok(NewtonOutcome { iterations: it, residual: r });
        }
        let reuse = matches!(&cached, Some((old, _)) if *old == rows);
        if !reuse {
            let lu = BandedLu::factor(&rows).map_err(|e| SchemeError::Singular(e.0))?;
            cached = Some((rows.clone(), lu));
        }
        let lu = &cached.as_ref().expect("factorization cached").1;
        let mut delta: Vec<f64> = res.iter().map(|v| -v).collect();
        lu.solve_in_place(&mut delta);
        let shift = normalize.map_or(0.0, |x0| delta[x0]);
        let mut theta = 1.0;
        let mut accepted = false;
        for _ in 0..12 {
            for i in 0..n {
                trial[i] = w[i] + theta * (delta[i] - shift);
            }
            let tc = *c + theta * shift;
            sys.residual_into(t, &trial, tc, &mut trial_res);
            if sup_norm(&trial_res) < r {
                w.copy_from_slice(&trial);
                *c = tc;
                accepted = true;
                break;
            }
            theta *= 0.5;
        }
        if !accepted {
            // policy switches can raise the sup norm transiently; take the full step
            stalls += 1;
            if stalls > 20 {
                return Err(SchemeError::NonConvergence { iterations: it + 1, residual: r });
            }
            for i in 0..n {
                w[i] += delta[i] - shift;
            }
            *c += shift;
        }
    }
    sys.residual_into(t, w, *c, &mut res);
    let r = sup_norm(&res);
    if r <= opts.tol {
        Ok(NewtonOutcome { iterations: opts.max_iter, residual: r })
    } else {
        Err(SchemeError::NonConvergence { iterations: opts.max_iter, residual: r })
    }
}
