//! Bounded domains, their signed distance and outward normal, and the
//! finite-difference grids built on top of them.
//!
//! Two domain kinds are supported: an interval on the real line and a disk
//! in the plane. Both have smooth boundaries and closed-form geometry.
//!
//! Disk grids use a Cartesian lattice. Lattice points well inside the disk
//! become interior nodes; the intersections of lattice lines with the circle
//! become boundary nodes ("cut cells"). Interior nodes next to the circle use
//! the boundary node as a closer axis neighbour.

use rand::Rng;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;
use thiserror::Error;

/// Lattice points closer to the circle than this fraction of `h` are dropped
/// in favour of the cut-cell boundary nodes.
const INTERIOR_MARGIN: f64 = 0.2;

/// Relative tolerance used when snapping interpolation points onto nodes.
const SNAP: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("invalid domain: {0}")]
    Invalid(String),
    #[error("point is not on the boundary (signed distance {distance:e})")]
    NotOnBoundary { distance: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("resolution too coarse: {0}")]
    ResolutionTooCoarse(String),
}

/// A bounded domain with smooth boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DomainSpec {
    Interval { lo: f64, hi: f64 },
    Disk { center: [f64; 2], radius: f64 },
}

impl DomainSpec {
    pub fn interval(lo: f64, hi: f64) -> Self {
        DomainSpec::Interval { lo, hi }
    }

    pub fn disk(center: [f64; 2], radius: f64) -> Self {
        DomainSpec::Disk { center, radius }
    }

    pub fn unit_disk() -> Self {
        DomainSpec::disk([0.0, 0.0], 1.0)
    }

    pub fn dim(&self) -> usize {
        match self {
            DomainSpec::Interval { .. } => 1,
            DomainSpec::Disk { .. } => 2,
        }
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        match *self {
            DomainSpec::Interval { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return Err(DomainError::Invalid(format!(
                        "interval needs finite lo < hi, got [{lo}, {hi}]"
                    )));
                }
            }
            DomainSpec::Disk { center, radius } => {
                if !(radius.is_finite() && radius > 0.0) || !center.iter().all(|c| c.is_finite()) {
                    return Err(DomainError::Invalid(format!(
                        "disk needs a finite center and radius > 0, got radius {radius}"
                    )));
                }
            }
        }
        Ok(())
    }

    fn check_dim(&self, x: &[f64]) -> Result<(), DomainError> {
        if x.len() != self.dim() {
            return Err(DomainError::DimensionMismatch { expected: self.dim(), got: x.len() });
        }
        Ok(())
    }

    /// Signed distance to the boundary, positive inside.
    ///
    /// Panics if `x` has the wrong dimension.
    pub fn signed_distance(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.dim(), "point dimension");
        match *self {
            DomainSpec::Interval { lo, hi } => (x[0] - lo).min(hi - x[0]),
            DomainSpec::Disk { center, radius } => {
                radius - (x[0] - center[0]).hypot(x[1] - center[1])
            }
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.signed_distance(x) >= 0.0
    }

    /// Unit outward normal at a boundary point; `tol` bounds the accepted
    /// distance from the boundary.
    pub fn outward_normal(&self, x: &[f64], tol: f64) -> Result<Vec<f64>, DomainError> {
        self.check_dim(x)?;
        let d = self.signed_distance(x);
        if d.abs() > tol {
            return Err(DomainError::NotOnBoundary { distance: d });
        }
        Ok(self.normal_near(x))
    }

    /// Outward normal of the nearest boundary point, without the proximity check.
    pub fn normal_near(&self, x: &[f64]) -> Vec<f64> {
        match *self {
            DomainSpec::Interval { lo, hi } => {
                if x[0] - lo <= hi - x[0] {
                    vec![-1.0]
                } else {
                    vec![1.0]
                }
            }
            DomainSpec::Disk { center, radius } => {
                let dx = x[0] - center[0];
                let dy = x[1] - center[1];
                let r = dx.hypot(dy);
                if r < 1e-300 * radius {
                    vec![1.0, 0.0]
                } else {
                    vec![dx / r, dy / r]
                }
            }
        }
    }

    /// Nearest point of the boundary.
    pub fn project_to_boundary(&self, x: &[f64]) -> Vec<f64> {
        match *self {
            DomainSpec::Interval { lo, hi } => {
                if x[0] - lo <= hi - x[0] {
                    vec![lo]
                } else {
                    vec![hi]
                }
            }
            DomainSpec::Disk { center, radius } => {
                let n = self.normal_near(x);
                vec![center[0] + radius * n[0], center[1] + radius * n[1]]
            }
        }
    }

    /// Nearest point of the closed domain.
    pub fn project_to_closure(&self, x: &[f64]) -> Vec<f64> {
        if self.contains(x) {
            x.to_vec()
        } else {
            self.project_to_boundary(x)
        }
    }

    /// Smallest `s >= 0` with `x + s*dir` on the boundary, for `x` in the
    /// closure and the ray leaving through the boundary; `None` if the ray
    /// never meets it.
    pub fn ray_exit(&self, x: &[f64], dir: &[f64]) -> Option<f64> {
        match *self {
            DomainSpec::Interval { lo, hi } => {
                if dir[0] > 0.0 {
                    Some(((hi - x[0]) / dir[0]).max(0.0))
                } else if dir[0] < 0.0 {
                    Some(((lo - x[0]) / dir[0]).max(0.0))
                } else {
                    None
                }
            }
            DomainSpec::Disk { center, radius } => {
                let ox = x[0] - center[0];
                let oy = x[1] - center[1];
                let a = dir[0] * dir[0] + dir[1] * dir[1];
                if a == 0.0 {
                    return None;
                }
                let b = ox * dir[0] + oy * dir[1];
                let c = ox * ox + oy * oy - radius * radius;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let root = (-b + disc.sqrt()) / a;
                if root < 0.0 {
                    None
                } else {
                    Some(root)
                }
            }
        }
    }

    pub fn centroid(&self) -> Vec<f64> {
        match *self {
            DomainSpec::Interval { lo, hi } => vec![0.5 * (lo + hi)],
            DomainSpec::Disk { center, .. } => center.to_vec(),
        }
    }

    pub fn diameter(&self) -> f64 {
        match *self {
            DomainSpec::Interval { lo, hi } => hi - lo,
            DomainSpec::Disk { radius, .. } => 2.0 * radius,
        }
    }

    pub fn volume(&self) -> f64 {
        match *self {
            DomainSpec::Interval { lo, hi } => hi - lo,
            DomainSpec::Disk { radius, .. } => std::f64::consts::PI * radius * radius,
        }
    }

    /// Uniform sample from the closed domain.
    pub fn sample_interior<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match *self {
            DomainSpec::Interval { lo, hi } => vec![rng.random_range(lo..=hi)],
            DomainSpec::Disk { center, radius } => {
                let r = radius * rng.random::<f64>().sqrt();
                let t = rng.random_range(0.0..std::f64::consts::TAU);
                vec![center[0] + r * t.cos(), center[1] + r * t.sin()]
            }
        }
    }

    /// Uniform sample from the boundary.
    pub fn sample_boundary<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match *self {
            DomainSpec::Interval { lo, hi } => {
                if rng.random::<bool>() {
                    vec![lo]
                } else {
                    vec![hi]
                }
            }
            DomainSpec::Disk { center, radius } => {
                let t = rng.random_range(0.0..std::f64::consts::TAU);
                vec![center[0] + radius * t.cos(), center[1] + radius * t.sin()]
            }
        }
    }
}

/// Neighbours of an interior node along one axis. Distances may be shorter
/// than `h` when the neighbour is a cut-cell boundary node.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AxisNeighbors {
    pub minus: usize,
    pub h_minus: f64,
    pub plus: usize,
    pub h_plus: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InteriorStencil {
    pub axes: SmallVec<[AxisNeighbors; 2]>,
    /// Diagonal lattice neighbours `[(+,+), (+,-), (-,+), (-,-)]`, present only
    /// when the full uniform 3x3 block consists of interior nodes.
    pub diagonals: Option<[usize; 4]>,
    /// True when at least one axis neighbour is a boundary node.
    pub near_boundary: bool,
}

impl InteriorStencil {
    pub fn is_uniform(&self, h: f64) -> bool {
        self.diagonals.is_some()
            && self
                .axes
                .iter()
                .all(|a| (a.h_minus - h).abs() <= SNAP * h && (a.h_plus - h).abs() <= SNAP * h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum NodeClass {
    Interior(InteriorStencil),
    Boundary { normal: [f64; 2] },
}

/// Interpolation weights over grid nodes; weights are nonnegative and sum to one.
pub type Weights = SmallVec<[(usize, f64); 4]>;

/// Finite-difference grid over a [`DomainSpec`].
#[derive(Clone, Debug)]
pub struct Grid {
    domain: DomainSpec,
    n_per_axis: usize,
    h: f64,
    points: Vec<[f64; 2]>,
    classes: Vec<NodeClass>,
    /// Lattice multi-index -> node, for lattice points that are nodes.
    lattice: Vec<Option<usize>>,
    reference: usize,
}

/// Builds the grid for `domain` with `n_per_axis` lattice points per axis.
pub fn build_grid(domain: &DomainSpec, n_per_axis: usize) -> Result<Grid, DomainError> {
    Grid::new(domain.clone(), n_per_axis)
}

impl Grid {
    pub fn new(domain: DomainSpec, n_per_axis: usize) -> Result<Self, DomainError> {
        domain.validate()?;
        if n_per_axis < 5 {
            return Err(DomainError::ResolutionTooCoarse(format!(
                "need at least 5 nodes per axis, got {n_per_axis}"
            )));
        }
        let mut grid = match domain {
            DomainSpec::Interval { lo, hi } => Self::build_interval(lo, hi, n_per_axis),
            DomainSpec::Disk { center, radius } => Self::build_disk(center, radius, n_per_axis)?,
        };
        grid.domain = domain;
        let centroid = grid.domain.centroid();
        grid.reference = grid
            .nearest_interior(&centroid)
            .ok_or_else(|| DomainError::ResolutionTooCoarse("no interior nodes".into()))?;
        Ok(grid)
    }

    fn build_interval(lo: f64, hi: f64, n: usize) -> Self {
        let h = (hi - lo) / (n - 1) as f64;
        let points: Vec<[f64; 2]> = (0..n)
            .map(|i| {
                let x = if i == n - 1 { hi } else { lo + i as f64 * h };
                [x, 0.0]
            })
            .collect();
        let classes = (0..n)
            .map(|i| {
                if i == 0 {
                    NodeClass::Boundary { normal: [-1.0, 0.0] }
                } else if i == n - 1 {
                    NodeClass::Boundary { normal: [1.0, 0.0] }
                } else {
                    let mut axes = SmallVec::new();
                    axes.push(AxisNeighbors { minus: i - 1, h_minus: h, plus: i + 1, h_plus: h });
                    NodeClass::Interior(InteriorStencil {
                        axes,
                        diagonals: None,
                        near_boundary: i == 1 || i == n - 2,
                    })
                }
            })
            .collect();
        Grid {
            domain: DomainSpec::Interval { lo, hi },
            n_per_axis: n,
            h,
            points,
            classes,
            lattice: (0..n).map(Some).collect(),
            reference: 0,
        }
    }

    fn build_disk(center: [f64; 2], radius: f64, n: usize) -> Result<Self, DomainError> {
        let h = 2.0 * radius / (n - 1) as f64;
        let coord = |i: usize, axis: usize| center[axis] - radius + i as f64 * h;
        let inside = |i: usize, j: usize| {
            let r = (coord(i, 0) - center[0]).hypot(coord(j, 1) - center[1]);
            radius - r > INTERIOR_MARGIN * h
        };

        // Boundary node keyed by (axis of the lattice line, line index, side).
        #[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        struct Key(usize, usize, i8);
        let boundary_point = |k: Key| -> [f64; 2] {
            let Key(axis, line, side) = k;
            let other = 1 - axis;
            let offset = coord(line, other) - center[other];
            let half = (radius * radius - offset * offset).max(0.0).sqrt();
            let mut p = [0.0; 2];
            p[axis] = center[axis] + side as f64 * half;
            p[other] = coord(line, other);
            p
        };

        enum Slot {
            Lattice(usize, usize),
            Cut(Key),
        }
        let mut slots: Vec<([f64; 2], Slot)> = Vec::new();
        let mut cut_keys = std::collections::BTreeSet::new();
        for j in 0..n {
            for i in 0..n {
                if !inside(i, j) {
                    continue;
                }
                slots.push(([coord(i, 0), coord(j, 1)], Slot::Lattice(i, j)));
                for (axis, line, pos) in [(0usize, j, i), (1usize, i, j)] {
                    for side in [-1i8, 1] {
                        let np = pos as isize + side as isize;
                        let neighbor_inside = np >= 0
                            && (np as usize) < n
                            && if axis == 0 { inside(np as usize, j) } else { inside(i, np as usize) };
                        if !neighbor_inside {
                            cut_keys.insert(Key(axis, line, side));
                        }
                    }
                }
            }
        }
        for &k in &cut_keys {
            slots.push((boundary_point(k), Slot::Cut(k)));
        }
        if slots.is_empty() {
            return Err(DomainError::ResolutionTooCoarse("disk lattice has no interior points".into()));
        }
        slots.sort_by(|a, b| {
            a.0[1].partial_cmp(&b.0[1]).unwrap().then(a.0[0].partial_cmp(&b.0[0]).unwrap())
        });

        // Assign indices, merging cut nodes that coincide.
        let mut points: Vec<[f64; 2]> = Vec::with_capacity(slots.len());
        let mut is_boundary: Vec<bool> = Vec::with_capacity(slots.len());
        let mut lattice = vec![None; n * n];
        let mut cut_index = std::collections::HashMap::new();
        for (p, slot) in &slots {
            match slot {
                Slot::Lattice(i, j) => {
                    lattice[j * n + i] = Some(points.len());
                    points.push(*p);
                    is_boundary.push(false);
                }
                Slot::Cut(k) => {
                    let dup = points.iter().rev().take(4).position(|q| {
                        (q[0] - p[0]).abs() <= SNAP * h && (q[1] - p[1]).abs() <= SNAP * h
                    });
                    let idx = match dup {
                        Some(back) if is_boundary[points.len() - 1 - back] => points.len() - 1 - back,
                        _ => {
                            points.push(*p);
                            is_boundary.push(true);
                            points.len() - 1
                        }
                    };
                    cut_index.insert(*k, idx);
                }
            }
        }

        let mut classes = Vec::with_capacity(points.len());
        for (idx, p) in points.iter().enumerate() {
            if is_boundary[idx] {
                let r = (p[0] - center[0]).hypot(p[1] - center[1]);
                classes.push(NodeClass::Boundary {
                    normal: [(p[0] - center[0]) / r, (p[1] - center[1]) / r],
                });
                continue;
            }
            let i = ((p[0] - center[0] + radius) / h).round() as usize;
            let j = ((p[1] - center[1] + radius) / h).round() as usize;
            let mut axes = SmallVec::new();
            let mut near_boundary = false;
            for (axis, line, pos) in [(0usize, j, i), (1usize, i, j)] {
                let mut ends = [(0usize, 0.0f64); 2];
                for (slot, side) in [-1i8, 1].into_iter().enumerate() {
                    let np = pos as isize + side as isize;
                    let lattice_neighbor = if np >= 0 && (np as usize) < n {
                        if axis == 0 {
                            lattice[j * n + np as usize]
                        } else {
                            lattice[np as usize * n + i]
                        }
                    } else {
                        None
                    };
                    ends[slot] = match lattice_neighbor {
                        Some(k) => (k, h),
                        None => {
                            near_boundary = true;
                            let k = cut_index[&Key(axis, line, side)];
                            (k, (points[k][axis] - p[axis]).abs())
                        }
                    };
                }
                axes.push(AxisNeighbors {
                    minus: ends[0].0,
                    h_minus: ends[0].1,
                    plus: ends[1].0,
                    h_plus: ends[1].1,
                });
            }
            let diag = |di: isize, dj: isize| -> Option<usize> {
                let (a, b) = (i as isize + di, j as isize + dj);
                if a < 0 || b < 0 || a as usize >= n || b as usize >= n {
                    None
                } else {
                    lattice[b as usize * n + a as usize]
                }
            };
            let diagonals = if near_boundary {
                None
            } else {
                match (diag(1, 1), diag(1, -1), diag(-1, 1), diag(-1, -1)) {
                    (Some(a), Some(b), Some(c), Some(d)) => Some([a, b, c, d]),
                    _ => None,
                }
            };
            classes.push(NodeClass::Interior(InteriorStencil { axes, diagonals, near_boundary }));
        }

        Ok(Grid {
            domain: DomainSpec::Disk { center, radius },
            n_per_axis: n,
            h,
            points,
            classes,
            lattice,
            reference: 0,
        })
    }

    /// Moves the reference node to the interior node nearest `x`.
    pub fn with_reference_point(mut self, x: &[f64]) -> Result<Self, DomainError> {
        self.domain.check_dim(x)?;
        self.reference = self
            .nearest_interior(x)
            .ok_or_else(|| DomainError::ResolutionTooCoarse("no interior nodes".into()))?;
        Ok(self)
    }

    pub fn domain(&self) -> &DomainSpec {
        &self.domain
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn n_per_axis(&self) -> usize {
        self.n_per_axis
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index of the reference node `x0`.
    pub fn reference(&self) -> usize {
        self.reference
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i][..self.dim()]
    }

    pub fn class(&self, i: usize) -> &NodeClass {
        &self.classes[i]
    }

    pub fn is_boundary(&self, i: usize) -> bool {
        matches!(self.classes[i], NodeClass::Boundary { .. })
    }

    pub fn interior_indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(move |&i| !self.is_boundary(i))
    }

    pub fn boundary_indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(move |&i| self.is_boundary(i))
    }

    pub fn boundary_count(&self) -> usize {
        self.boundary_indices().count()
    }

    /// Outward unit normal at a boundary node.
    pub fn normal(&self, i: usize) -> Option<&[f64]> {
        match &self.classes[i] {
            NodeClass::Boundary { normal } => Some(&normal[..self.dim()]),
            NodeClass::Interior(_) => None,
        }
    }

    pub fn nearest_interior(&self, x: &[f64]) -> Option<usize> {
        self.interior_indices().min_by(|&a, &b| {
            dist2(self.point(a), x).partial_cmp(&dist2(self.point(b), x)).unwrap()
        })
    }

    /// Node at the rounded lattice position of `x` when that lattice point is
    /// a node, otherwise the closest node by exhaustive search.
    pub fn nearest_node(&self, x: &[f64]) -> usize {
        if let Some(i) = self.lattice_lookup(x) {
            return i;
        }
        (0..self.len())
            .min_by(|&a, &b| dist2(self.point(a), x).partial_cmp(&dist2(self.point(b), x)).unwrap())
            .expect("grid is nonempty")
    }

    fn lattice_origin(&self) -> [f64; 2] {
        match self.domain {
            DomainSpec::Interval { lo, .. } => [lo, 0.0],
            DomainSpec::Disk { center, radius } => [center[0] - radius, center[1] - radius],
        }
    }

    fn lattice_lookup(&self, x: &[f64]) -> Option<usize> {
        let o = self.lattice_origin();
        let n = self.n_per_axis as isize;
        let idx: SmallVec<[isize; 2]> =
            (0..self.dim()).map(|k| ((x[k] - o[k]) / self.h).round() as isize).collect();
        if idx.iter().any(|&i| i < 0 || i >= n) {
            return None;
        }
        let flat = if self.dim() == 1 { idx[0] } else { idx[1] * n + idx[0] } as usize;
        self.lattice[flat]
    }

    /// Multilinear interpolation weights at `x` over interior nodes only.
    /// Returns `None` when a cell corner with nonzero weight is not an
    /// interior node.
    pub fn interpolation_weights(&self, x: &[f64]) -> Option<Weights> {
        let o = self.lattice_origin();
        let n = self.n_per_axis;
        let mut base = [0usize; 2];
        let mut frac = [0.0f64; 2];
        for k in 0..self.dim() {
            let t = (x[k] - o[k]) / self.h;
            if t < -SNAP || t > (n - 1) as f64 + SNAP {
                return None;
            }
            let mut i = t.floor();
            let mut f = t - i;
            if f > 1.0 - SNAP {
                i += 1.0;
                f = 0.0;
            } else if f < SNAP {
                f = 0.0;
            }
            let i = (i.max(0.0) as usize).min(n - 1);
            base[k] = i;
            frac[k] = f;
        }
        let mut out = Weights::new();
        let corners = 1usize << self.dim();
        for c in 0..corners {
            let mut w = 1.0;
            let mut idx = [0usize; 2];
            for k in 0..self.dim() {
                let up = (c >> k) & 1 == 1;
                w *= if up { frac[k] } else { 1.0 - frac[k] };
                idx[k] = base[k] + up as usize;
            }
            if w == 0.0 {
                continue;
            }
            if idx[..self.dim()].iter().any(|&i| i >= n) {
                return None;
            }
            let flat = if self.dim() == 1 { idx[0] } else { idx[1] * n + idx[0] };
            match self.lattice[flat] {
                Some(node) if !self.is_boundary(node) => out.push((node, w)),
                _ => return None,
            }
        }
        Some(out)
    }
}

pub(crate) fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
