//! Banded LU factorization for the M-matrices produced by the monotone scheme.

use smallvec::SmallVec;

/// Sparse row: `(column, coefficient)` pairs.
pub type SparseRow = SmallVec<[(usize, f64); 16]>;

/// LU factors of a banded matrix, computed without pivoting. Stable for
/// nonsingular M-matrices, which is what the scheme produces.
#[derive(Clone, Debug)]
pub struct BandedLu {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    data: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZeroPivot(pub usize);

impl BandedLu {
    /// Factors the matrix whose row `i` is `rows[i]`.
    pub fn factor(rows: &[SparseRow]) -> Result<Self, ZeroPivot> {
        let n = rows.len();
        let (mut kl, mut ku) = (0usize, 0usize);
        for (i, row) in rows.iter().enumerate() {
            for &(j, _) in row {
                if j < i {
                    kl = kl.max(i - j);
                } else {
                    ku = ku.max(j - i);
                }
            }
        }
        let width = kl + ku + 1;
        let mut lu = Self { n, kl, ku, width, data: vec![0.0; n * width] };
        for (i, row) in rows.iter().enumerate() {
            for &(j, v) in row {
                *lu.at_mut(i, j) += v;
            }
        }
        lu.decompose()?;
        Ok(lu)
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        i * self.width + (j + self.kl - i)
    }

    #[inline]
    fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        let k = self.idx(i, j);
        &mut self.data[k]
    }

    fn decompose(&mut self) -> Result<(), ZeroPivot> {
        let (n, kl, ku) = (self.n, self.kl, self.ku);
        for k in 0..n {
            let pivot = self.data[self.idx(k, k)];
            if pivot == 0.0 || !pivot.is_finite() {
                return Err(ZeroPivot(k));
            }
            let jmax = (k + ku).min(n - 1);
            let imax = (k + kl).min(n - 1);
            let prow = self.idx(k, k);
            for i in k + 1..=imax {
                let ik = self.idx(i, k);
                let l = self.data[ik] / pivot;
                if l == 0.0 {
                    continue;
                }
                self.data[ik] = l;
                let base = self.idx(i, k);
                for off in 1..=(jmax - k) {
                    self.data[base + off] -= l * self.data[prow + off];
                }
            }
        }
        Ok(())
    }

    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            let lo = i.saturating_sub(self.kl);
            let mut s = b[i];
            let base = self.idx(i, lo);
            for (off, bj) in b[lo..i].iter().enumerate() {
                s -= self.data[base + off] * bj;
            }
            b[i] = s;
        }
        for i in (0..n).rev() {
            let hi = (i + self.ku).min(n - 1);
            let d = self.idx(i, i);
            let mut s = b[i];
            for j in i + 1..=hi {
                s -= self.data[d + (j - i)] * b[j];
            }
            b[i] = s / self.data[d];
        }
    }

    pub fn bandwidths(&self) -> (usize, usize) {
        (self.kl, self.ku)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use smallvec::smallvec;

    #[test]
    fn solves_tridiagonal_system() {
        let n = 6;
        let rows: Vec<SparseRow> = (0..n)
            .map(|i| {
                let mut r: SparseRow = smallvec![(i, 2.5)];
                if i > 0 {
                    r.push((i - 1, -1.0));
                }
                if i + 1 < n {
                    r.push((i + 1, -1.0));
                }
                r
            })
            .collect();
        let lu = BandedLu::factor(&rows).unwrap();
        let x: Vec<f64> = (0..n).map(|i| i as f64 * 0.5 - 1.0).collect();
        let mut b: Vec<f64> = rows.iter().map(|r| r.iter().map(|&(j, v)| v * x[j]).sum()).collect();
        lu.solve_in_place(&mut b);
        for i in 0..n {
            assert!((b[i] - x[i]).abs() < 1e-13);
        }
        assert_eq!(lu.bandwidths(), (1, 1));
    }

    #[test]
    fn solves_unsymmetric_band() {
        // lower bandwidth 3, upper 1, diagonally dominant
        let n = 10;
        let rows: Vec<SparseRow> = (0..n)
            .map(|i| {
                let mut r: SparseRow = smallvec![(i, 4.0)];
                if i >= 3 {
                    r.push((i - 3, -1.5));
                }
                if i + 1 < n {
                    r.push((i + 1, -0.7));
                }
                r
            })
            .collect();
        let lu = BandedLu::factor(&rows).unwrap();
        let x: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let mut b: Vec<f64> = rows.iter().map(|r| r.iter().map(|&(j, v)| v * x[j]).sum()).collect();
        lu.solve_in_place(&mut b);
        for i in 0..n {
            assert!((b[i] - x[i]).abs() < 1e-13);
        }
    }

    #[test]
    fn zero_pivot_is_reported() {
        let rows: Vec<SparseRow> = vec![smallvec![(0, 0.0)], smallvec![(1, 1.0)]];
        assert_eq!(BandedLu::factor(&rows).unwrap_err(), ZeroPivot(0));
    }
}
