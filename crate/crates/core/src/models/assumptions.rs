//! Randomized certificates for the structural assumptions on `F` and `L`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{norm, BoundaryOperatorSpec, HamiltonianSpec, Mat2};
use crate::domain::DomainSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub n_samples: usize,
    pub seed: u64,
    /// Ellipticity that must be certified by the monotonicity probes.
    pub kappa_probe: f64,
    /// Largest acceptable Lipschitz ratio.
    pub lipschitz_cap: f64,
    /// Scaling used for the recession probes.
    pub t_large: f64,
    /// Acceptable deviation from the recession limit at `t_large`.
    pub recession_tol: f64,
    /// Slack for the sign inequalities (roundoff).
    pub sign_tol: f64,
    /// Range of sampled gradients and Hessian entries.
    pub sample_range: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            n_samples: 2000,
            seed: 0,
            kappa_probe: 1e-6,
            lipschitz_cap: 1e6,
            t_large: 1e6,
            recession_tol: 1e-4,
            sign_tol: 1e-10,
            sample_range: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub name: String,
    pub passed: bool,
    /// Worst violation observed (nonnegative).
    pub violation: f64,
    pub tolerance: f64,
    /// Tightest constant observed, when the probe estimates one.
    pub estimate: Option<f64>,
    pub samples: usize,
    pub note: Option<String>,
}

impl ProbeResult {
    fn new(name: &str, violation: f64, tolerance: f64, estimate: Option<f64>, samples: usize) -> Self {
        let violation = violation.max(0.0);
        Self {
            name: name.to_string(),
            passed: violation <= tolerance,
            violation,
            tolerance,
            estimate,
            samples,
            note: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub n_samples: usize,
    pub probes: Vec<ProbeResult>,
    /// Lipschitz constant estimate for `F`.
    pub lipschitz_k: f64,
    /// Ellipticity estimate `min (F(M) - F(M+N)) / Tr N`.
    pub ellipticity_kappa: f64,
    /// Obliqueness estimate `min (L(p + t n) - L(p)) / t`.
    pub obliqueness_nu: f64,
    /// Lipschitz constant estimate for `L`.
    pub boundary_k_bar: f64,
}

impl AssumptionReport {
    pub fn probe(&self, name: &str) -> Option<&ProbeResult> {
        self.probes.iter().find(|p| p.name == name)
    }

    pub fn all_passed(&self) -> bool {
        self.probes.iter().all(|p| p.passed)
    }
}

struct Sampler<'a> {
    rng: ChaCha8Rng,
    domain: &'a DomainSpec,
    dim: usize,
    range: f64,
}

impl Sampler<'_> {
    fn vec(&mut self, r: f64) -> [f64; 2] {
        let mut p = [0.0; 2];
        for v in p.iter_mut().take(self.dim) {
            *v = self.rng.random_range(-r..r);
        }
        p
    }

    fn sym(&mut self, r: f64) -> Mat2 {
        let mut m = [[0.0; 2]; 2];
        for i in 0..self.dim {
            for j in i..self.dim {
                let v = self.rng.random_range(-r..r);
                m[i][j] = v;
                m[j][i] = v;
            }
        }
        m
    }

    /// Random PSD increment normalised to a trace in `[1, 5]`.
    fn psd(&mut self) -> Mat2 {
        loop {
            let b = self.sym(1.0);
            let mut n = [[0.0; 2]; 2];
            for i in 0..self.dim {
                for j in 0..self.dim {
                    n[i][j] = (0..self.dim).map(|k| b[i][k] * b[j][k]).sum();
                }
            }
            let tr: f64 = (0..self.dim).map(|k| n[k][k]).sum();
            if tr > 1e-3 {
                let s = self.rng.random_range(1.0..5.0) / tr;
                return n.map(|r| r.map(|v| v * s));
            }
        }
    }

    fn interior(&mut self) -> Vec<f64> {
        self.domain.sample_interior(&mut self.rng)
    }

    fn boundary(&mut self) -> Vec<f64> {
        self.domain.sample_boundary(&mut self.rng)
    }

    /// A point near `x`, kept inside the closure.
    fn nearby(&mut self, x: &[f64], scale: f64) -> Vec<f64> {
        let d = self.vec(scale);
        let y: Vec<f64> = x.iter().zip(d).map(|(a, b)| a + b).collect();
        self.domain.project_to_closure(&y)
    }
}

fn add(a: &Mat2, b: &Mat2) -> Mat2 {
    let mut out = *a;
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] += b[i][j];
        }
    }
    out
}

fn spectral_norm(m: &Mat2, dim: usize) -> f64 {
    if dim == 1 {
        return m[0][0].abs();
    }
    let tr = m[0][0] + m[1][1];
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let disc = (0.25 * tr * tr - det).max(0.0).sqrt();
    (0.5 * tr).abs() + disc
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    crate::domain::dist2(a, b).sqrt()
}

fn diff2(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Samples the inequalities behind the well-posedness theory and reports the
/// worst violations together with the tightest constants observed.
pub fn check_assumptions(
    fspec: &HamiltonianSpec,
    lspec: &BoundaryOperatorSpec,
    domain: &DomainSpec,
    n_samples: usize,
    rng_seed: u64,
) -> AssumptionReport {
    check_assumptions_with(fspec, lspec, domain, &ProbeConfig { n_samples, seed: rng_seed, ..ProbeConfig::default() })
}

pub fn check_assumptions_with(
    fspec: &HamiltonianSpec,
    lspec: &BoundaryOperatorSpec,
    domain: &DomainSpec,
    cfg: &ProbeConfig,
) -> AssumptionReport {
    let n = cfg.n_samples.max(1);
    let dim = domain.dim();
    let r = cfg.sample_range;
    let mut s = Sampler { rng: ChaCha8Rng::seed_from_u64(cfg.seed), domain, dim, range: r };
    let f = |x: &[f64], p: &[f64; 2], m: &Mat2| fspec.eval_small(x, p, m, dim);
    let l = |x: &[f64], p: &[f64; 2]| {
        let nrm = domain.normal_near(x);
        let g = lspec.direction_at(x, &nrm);
        lspec.eval_with(x, &g[..dim], &p[..dim])
    };
    let mut probes = vec![];

    // local Lipschitz structure
    let mut k_hat: f64 = 0.0;
    for k in 0..n {
        let x = s.interior();
        let p = s.vec(r);
        let m = s.sym(r);
        let (y, q, nn) = if k % 2 == 0 {
            (s.interior(), s.vec(r), s.sym(r))
        } else {
            let y = s.nearby(&x, 1e-3);
            let dq = s.vec(1e-3);
            let dm = s.sym(1e-3);
            (y, [p[0] + dq[0], p[1] + dq[1]], add(&m, &dm))
        };
        let lhs = (f(&x, &p, &m) - f(&y, &q, &nn)).abs();
        let mut dm = m;
        for i in 0..2 {
            for j in 0..2 {
                dm[i][j] -= nn[i][j];
            }
        }
        let rhs = dist(&x, &y) * (1.0 + norm(&p) + norm(&q) + spectral_norm(&m, dim) + spectral_norm(&nn, dim))
            + diff2(&p, &q)
            + spectral_norm(&dm, dim);
        if rhs > 1e-14 {
            k_hat = k_hat.max(lhs / rhs);
        }
    }
    let _ = s.range;
    probes.push(ProbeResult::new("lipschitz", k_hat - cfg.lipschitz_cap, 0.0, Some(k_hat), n));

    // uniform ellipticity
    let mut kappa_hat = f64::INFINITY;
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let x = s.interior();
        let p = s.vec(r);
        let m = s.sym(r);
        let nn = s.psd();
        let tr: f64 = (0..dim).map(|k| nn[k][k]).sum();
        let a = f(&x, &p, &m);
        let b = f(&x, &p, &add(&m, &nn));
        kappa_hat = kappa_hat.min((a - b) / tr);
        worst = worst.max(b - a + cfg.kappa_probe * tr);
    }
    probes.push(ProbeResult::new("ellipticity", worst, cfg.sign_tol, Some(kappa_hat), n));

    // recession limit
    let mut dev: f64 = 0.0;
    for _ in 0..n {
        let x = s.interior();
        let p = s.vec(r);
        let m = s.sym(r);
        let t = cfg.t_large;
        let tp = [t * p[0], t * p[1]];
        let tm = m.map(|row| row.map(|v| v * t));
        let lhs = f(&x, &tp, &tm) / t;
        let lim = fspec.recession_limit_small(&x, &p, &m, dim);
        dev = dev.max((lhs - lim).abs() / (1.0 + norm(&p) + spectral_norm(&m, dim)));
    }
    probes.push(ProbeResult::new("recession", dev, cfg.recession_tol, Some(dev), n));

    // obliqueness margin along the normal
    let margin = lspec.declared_margin();
    let mut nu_hat = f64::INFINITY;
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let x = s.boundary();
        let nrm = domain.normal_near(&x);
        let p = s.vec(r);
        let t = s.rng.random_range(1e-3..r);
        let mut pt = p;
        for k in 0..dim {
            pt[k] += t * nrm[k];
        }
        let d = l(&x, &pt) - l(&x, &p);
        nu_hat = nu_hat.min(d / t);
        worst = worst.max(margin * t - d);
    }
    let mut l1 = ProbeResult::new("obliqueness", worst, cfg.sign_tol * (1.0 + r), Some(nu_hat), n);
    if !(nu_hat > 0.0) {
        l1.passed = false;
    }
    l1.note = Some(format!("declared margin {margin}"));
    probes.push(l1);

    // Lipschitz structure of L
    let mut kbar: f64 = 0.0;
    for k in 0..n {
        let x = s.boundary();
        let p = s.vec(r);
        let (y, q) = if k % 2 == 0 {
            (s.boundary(), s.vec(r))
        } else {
            let y = domain.project_to_boundary(&s.nearby(&x, 1e-3));
            let dq = s.vec(1e-3);
            (y, [p[0] + dq[0], p[1] + dq[1]])
        };
        let lhs = (l(&x, &p) - l(&y, &q)).abs();
        let rhs = dist(&x, &y) * (1.0 + norm(&p) + norm(&q)) + diff2(&p, &q);
        if rhs > 1e-14 {
            kbar = kbar.max(lhs / rhs);
        }
    }
    probes.push(ProbeResult::new("boundary-lipschitz", kbar - cfg.lipschitz_cap, 0.0, Some(kbar), n));

    // recession limit of L
    let mut dev: f64 = 0.0;
    for _ in 0..n {
        let x = s.boundary();
        let p = s.vec(r);
        let t = cfg.t_large;
        let lhs = l(&x, &[t * p[0], t * p[1]]) / t;
        let lim = l(&x, &p) - lspec.offset_at(&x);
        dev = dev.max((lhs - lim).abs() / (1.0 + norm(&p)));
    }
    probes.push(ProbeResult::new("boundary-recession", dev, cfg.recession_tol, Some(dev), n));

    // ellipticity in the gradient direction, probed only for gamma = n
    if lspec.is_normal_direction() {
        let mut k2 = f64::INFINITY;
        let mut worst: f64 = 0.0;
        for _ in 0..n {
            let x = s.interior();
            let mut p = s.vec(1.0);
            let pn = norm(&p[..dim]).max(1e-12);
            let scale = s.rng.random_range(r..10.0 * r) / pn;
            p = p.map(|v| v * scale);
            let q = p.map(|v| v / norm(&p[..dim]));
            let m = s.sym(r);
            let c = s.rng.random_range(0.1..r);
            let mut nn = [[0.0; 2]; 2];
            for i in 0..dim {
                for j in 0..dim {
                    nn[i][j] = c * q[i] * q[j];
                }
            }
            let a = f(&x, &p, &m);
            let b = f(&x, &p, &add(&m, &nn));
            k2 = k2.min((a - b) / c);
            worst = worst.max(b - a + cfg.kappa_probe * c);
        }
        probes.push(ProbeResult::new("gradient-ellipticity", worst, cfg.sign_tol, Some(k2), n));
    } else {
        let mut skipped = ProbeResult::new("gradient-ellipticity", 0.0, cfg.sign_tol, None, 0);
        skipped.note = Some("probed only when the boundary direction is the outward normal".into());
        probes.push(skipped);
    }

    let est = |name: &str| probes.iter().find(|p| p.name == name).and_then(|p| p.estimate).unwrap_or(f64::NAN);
    AssumptionReport {
        n_samples: n,
        lipschitz_k: est("lipschitz"),
        ellipticity_kappa: est("ellipticity"),
        obliqueness_nu: est("obliqueness"),
        boundary_k_bar: est("boundary-lipschitz"),
        probes,
    }
}
