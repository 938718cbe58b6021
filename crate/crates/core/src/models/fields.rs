//! Coefficient fields used by the operator definitions.

use serde::{Deserialize, Serialize};

/// Real-valued coefficient field on the domain closure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScalarField {
    Constant {
        value: f64,
    },
    /// `value + <gradient, x>`.
    Affine {
        value: f64,
        gradient: Vec<f64>,
    },
    /// `base + amplitude * cos^2(pi r / (2 width))` for `r = |x - center| < width`,
    /// `base` elsewhere.
    Bump {
        base: f64,
        amplitude: f64,
        center: Vec<f64>,
        width: f64,
    },
    /// Tabulated values: piecewise linear in 1D (points sorted ascending,
    /// clamped outside), nearest point in higher dimensions.
    Tabulated {
        points: Vec<Vec<f64>>,
        values: Vec<f64>,
    },
}

impl ScalarField {
    pub fn constant(value: f64) -> Self {
        ScalarField::Constant { value }
    }

    pub fn affine(value: f64, gradient: Vec<f64>) -> Self {
        ScalarField::Affine { value, gradient }
    }

    /// The field multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        match self {
            ScalarField::Constant { value } => ScalarField::Constant { value: c * value },
            ScalarField::Affine { value, gradient } => {
                ScalarField::Affine { value: c * value, gradient: gradient.iter().map(|g| c * g).collect() }
            }
            ScalarField::Bump { base, amplitude, center, width } => ScalarField::Bump {
                base: c * base,
                amplitude: c * amplitude,
                center: center.clone(),
                width: *width,
            },
            ScalarField::Tabulated { points, values } => {
                ScalarField::Tabulated { points: points.clone(), values: values.iter().map(|v| c * v).collect() }
            }
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            ScalarField::Constant { value } => *value,
            ScalarField::Affine { value, gradient } => {
                value + gradient.iter().zip(x).map(|(g, xi)| g * xi).sum::<f64>()
            }
            ScalarField::Bump { base, amplitude, center, width } => {
                let r = center.iter().zip(x).map(|(c, xi)| (xi - c) * (xi - c)).sum::<f64>().sqrt();
                if r < *width {
                    let c = (std::f64::consts::FRAC_PI_2 * r / width).cos();
                    base + amplitude * c * c
                } else {
                    *base
                }
            }
            ScalarField::Tabulated { points, values } => {
                if x.len() == 1 {
                    let t = x[0];
                    let n = points.len();
                    if t <= points[0][0] {
                        return values[0];
                    }
                    if t >= points[n - 1][0] {
                        return values[n - 1];
                    }
                    let k = points.partition_point(|p| p[0] <= t).max(1) - 1;
                    let (a, b) = (points[k][0], points[k + 1][0]);
                    let w = (t - a) / (b - a);
                    (1.0 - w) * values[k] + w * values[k + 1]
                } else {
                    let k = (0..points.len())
                        .min_by(|&a, &b| {
                            crate::domain::dist2(&points[a], x)
                                .partial_cmp(&crate::domain::dist2(&points[b], x))
                                .unwrap()
                        })
                        .expect("nonempty table");
                    values[k]
                }
            }
        }
    }

    pub fn check(&self, dim: usize, what: &str, out: &mut Vec<String>) {
        match self {
            ScalarField::Constant { value } => {
                if !value.is_finite() {
                    out.push(format!("{what}: constant must be finite"));
                }
            }
            ScalarField::Affine { gradient, .. } => {
                if gradient.len() != dim {
                    out.push(format!("{what}: affine gradient needs {dim} entries"));
                }
            }
            ScalarField::Bump { center, width, .. } => {
                if center.len() != dim {
                    out.push(format!("{what}: bump center needs {dim} entries"));
                }
                if !(*width > 0.0) {
                    out.push(format!("{what}: bump width must be positive"));
                }
            }
            ScalarField::Tabulated { points, values } => {
                if points.is_empty() || points.len() != values.len() {
                    out.push(format!("{what}: table needs matching nonempty points and values"));
                }
                if points.iter().any(|p| p.len() != dim) {
                    out.push(format!("{what}: table points must have {dim} coordinates"));
                }
                if dim == 1 && points.windows(2).any(|w| w.len() == 2 && w[0].len() == 1 && w[1].len() == 1 && w[0][0] >= w[1][0]) {
                    out.push(format!("{what}: 1D table points must be strictly increasing"));
                }
            }
        }
    }

    /// A bound on `sup |field|` when one is available in closed form.
    pub fn sup_bound(&self) -> Option<f64> {
        match self {
            ScalarField::Constant { value } => Some(value.abs()),
            ScalarField::Bump { base, amplitude, .. } => Some(base.abs() + amplitude.abs()),
            ScalarField::Tabulated { values, .. } => values.iter().map(|v| v.abs()).reduce(f64::max),
            ScalarField::Affine { .. } => None,
        }
    }
}

/// Vector-valued field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum VectorField {
    Constant { value: Vec<f64> },
    Components { components: Vec<ScalarField> },
}

impl VectorField {
    pub fn constant(value: Vec<f64>) -> Self {
        VectorField::Constant { value }
    }

    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        match self {
            VectorField::Constant { value } => out.copy_from_slice(&value[..out.len()]),
            VectorField::Components { components } => {
                for (o, c) in out.iter_mut().zip(components) {
                    *o = c.eval(x);
                }
            }
        }
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.eval_into(x, &mut out);
        out
    }

    pub fn check(&self, dim: usize, what: &str, out: &mut Vec<String>) {
        match self {
            VectorField::Constant { value } => {
                if value.len() != dim {
                    out.push(format!("{what}: vector needs {dim} entries"));
                }
            }
            VectorField::Components { components } => {
                if components.len() != dim {
                    out.push(format!("{what}: vector needs {dim} components"));
                }
                for (k, c) in components.iter().enumerate() {
                    c.check(dim, &format!("{what}[{k}]"), out);
                }
            }
        }
    }
}

/// Symmetric-matrix-valued field (diffusion matrices and volatilities).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MatrixField {
    /// `s(x) * Id`.
    Scalar { field: ScalarField },
    /// `diag(d_1(x), ..., d_n(x))`.
    Diagonal { entries: Vec<ScalarField> },
    /// Constant matrix given row by row.
    Constant { value: Vec<Vec<f64>> },
}

impl MatrixField {
    pub fn identity_times(s: f64) -> Self {
        MatrixField::Scalar { field: ScalarField::constant(s) }
    }

    pub fn scaled(&self, c: f64) -> Self {
        match self {
            MatrixField::Scalar { field } => MatrixField::Scalar { field: field.scaled(c) },
            MatrixField::Diagonal { entries } => MatrixField::Diagonal { entries: entries.iter().map(|e| e.scaled(c)).collect() },
            MatrixField::Constant { value } => {
                MatrixField::Constant { value: value.iter().map(|r| r.iter().map(|v| c * v).collect()).collect() }
            }
        }
    }

    /// Evaluates into a row-major `dim x dim` buffer (at most 2x2).
    pub fn eval_into(&self, x: &[f64], dim: usize, out: &mut [[f64; 2]; 2]) {
        *out = [[0.0; 2]; 2];
        match self {
            MatrixField::Scalar { field } => {
                let s = field.eval(x);
                for (k, row) in out.iter_mut().enumerate().take(dim) {
                    row[k] = s;
                }
            }
            MatrixField::Diagonal { entries } => {
                for (k, row) in out.iter_mut().enumerate().take(dim) {
                    row[k] = entries[k].eval(x);
                }
            }
            MatrixField::Constant { value } => {
                for (i, row) in out.iter_mut().enumerate().take(dim) {
                    row[..dim].copy_from_slice(&value[i][..dim]);
                }
            }
        }
    }

    pub fn eval(&self, x: &[f64], dim: usize) -> nalgebra::DMatrix<f64> {
        let mut buf = [[0.0; 2]; 2];
        self.eval_into(x, dim, &mut buf);
        nalgebra::DMatrix::from_fn(dim, dim, |i, j| buf[i][j])
    }

    pub fn check(&self, dim: usize, what: &str, out: &mut Vec<String>) {
        match self {
            MatrixField::Scalar { field } => field.check(dim, what, out),
            MatrixField::Diagonal { entries } => {
                if entries.len() != dim {
                    out.push(format!("{what}: diagonal needs {dim} entries"));
                }
                for (k, e) in entries.iter().enumerate() {
                    e.check(dim, &format!("{what}[{k}]"), out);
                }
            }
            MatrixField::Constant { value } => {
                if value.len() != dim || value.iter().any(|r| r.len() != dim) {
                    out.push(format!("{what}: matrix must be {dim}x{dim}"));
                } else if (0..dim).any(|i| (0..dim).any(|j| value[i][j] != value[j][i])) {
                    out.push(format!("{what}: matrix must be symmetric"));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_fields_evaluate() {
        assert_eq!(ScalarField::affine(1.0, vec![1.0]).eval(&[1.0]), 2.0);
        let bump = ScalarField::Bump { base: 1.0, amplitude: 2.0, center: vec![0.0, 0.0], width: 0.5 };
        assert_eq!(bump.eval(&[0.0, 0.0]), 3.0);
        assert_eq!(bump.eval(&[0.6, 0.0]), 1.0);
        let tab = ScalarField::Tabulated {
            points: vec![vec![0.0], vec![0.5], vec![1.0]],
            values: vec![0.0, 1.0, 4.0],
        };
        assert_eq!(tab.eval(&[0.25]), 0.5);
        assert_eq!(tab.eval(&[0.75]), 2.5);
        assert_eq!(tab.eval(&[2.0]), 4.0);
    }

    #[test]
    fn field_checks_report_dimension_errors() {
        let mut out = vec![];
        ScalarField::affine(0.0, vec![1.0, 2.0]).check(1, "f", &mut out);
        MatrixField::Constant { value: vec![vec![1.0, 2.0], vec![0.0, 1.0]] }.check(2, "a", &mut out);
        assert_eq!(out.len(), 2);
    }
}
