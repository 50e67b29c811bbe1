//! Sparse matrix helpers and a banded LU factorization.
//!
//! Node ordering on the polar grid (origin first, then ring by ring) keeps
//! every operator inside a band of half-width `n_phi`, so implicit steps are
//! solved with a dense banded LU without pivoting. The implicit-step matrices
//! are M-matrices (diagonally dominant), for which elimination without
//! pivoting is stable.

use sprs::{CsMat, TriMat};

use crate::error::{Error, Result};

/// Relative residual that every linear solve must reach.
pub const SOLVE_TOL: f64 = 1e-10;

/// Accumulates `(row, col, value)` entries; duplicates are summed.
#[derive(Debug)]
pub struct Triplets {
    tri: TriMat<f64>,
}

impl Triplets {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            tri: TriMat::new((rows, cols)),
        }
    }

    pub fn push(&mut self, row: usize, col: usize, value: f64) {
        if value != 0.0 {
            self.tri.add_triplet(row, col, value);
        }
    }

    pub fn into_csr(self) -> CsMat<f64> {
        self.tri.to_csr()
    }
}

/// `y = A x`.
pub fn matvec(a: &CsMat<f64>, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.cols(), x.len());
    a.outer_iterator()
        .map(|row| row.iter().map(|(j, &v)| v * x[j]).sum())
        .collect()
}

/// `y = Aᵀ x`.
pub fn matvec_t(a: &CsMat<f64>, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.rows(), x.len());
    let mut y = vec![0.0; a.cols()];
    for (i, row) in a.outer_iterator().enumerate() {
        let xi = x[i];
        if xi == 0.0 {
            continue;
        }
        for (j, &v) in row.iter() {
            y[j] += v * xi;
        }
    }
    y
}

/// `diag(d) + c·A`, returned as a new CSR matrix.
pub fn diag_plus_scaled(d: &[f64], c: f64, a: &CsMat<f64>) -> CsMat<f64> {
    let n = d.len();
    let mut t = Triplets::new(n, n);
    for (i, &di) in d.iter().enumerate() {
        t.push(i, i, di);
    }
    for (i, row) in a.outer_iterator().enumerate() {
        for (j, &v) in row.iter() {
            t.push(i, j, c * v);
        }
    }
    t.into_csr()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Largest lower and upper bandwidth of a square matrix.
pub fn bandwidth(a: &CsMat<f64>) -> (usize, usize) {
    let (mut kl, mut ku) = (0, 0);
    for (i, row) in a.outer_iterator().enumerate() {
        for (j, _) in row.iter() {
            if j < i {
                kl = kl.max(i - j);
            } else {
                ku = ku.max(j - i);
            }
        }
    }
    (kl, ku)
}

/// LU factors of a banded matrix, stored row-major inside the band.
#[derive(Debug, Clone)]
pub struct BandedLu {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    band: Vec<f64>,
}

impl BandedLu {
    pub fn factor(a: &CsMat<f64>) -> Result<Self> {
        let n = a.rows();
        if a.cols() != n {
            return Err(Error::Dimension(format!("{}x{} matrix is not square", n, a.cols())));
        }
        let (kl, ku) = bandwidth(a);
        let width = kl + ku + 1;
        let mut band = vec![0.0; n * width];
        for (i, row) in a.outer_iterator().enumerate() {
            for (j, &v) in row.iter() {
                band[i * width + j + kl - i] += v;
            }
        }
        let at = |i: usize, j: usize| i * width + j + kl - i;
        for k in 0..n {
            let pivot = band[at(k, k)];
            if pivot == 0.0 || !pivot.is_finite() {
                return Err(Error::SingularPivot(k));
            }
            let jmax = (k + ku).min(n - 1);
            for i in k + 1..=(k + kl).min(n - 1) {
                let lik = band[at(i, k)] / pivot;
                band[at(i, k)] = lik;
                if lik == 0.0 {
                    continue;
                }
                for j in k + 1..=jmax {
                    band[at(i, j)] -= lik * band[at(k, j)];
                }
            }
        }
        Ok(Self { n, kl, ku, width, band })
    }

    #[inline]
    fn get(&self, i: usize, j: usize) -> f64 {
        self.band[i * self.width + j + self.kl - i]
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solves `A x = b` in place.
    pub fn solve_in_place(&self, x: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            let mut s = x[i];
            for j in i.saturating_sub(self.kl)..i {
                s -= self.get(i, j) * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in i + 1..=(i + self.ku).min(n - 1) {
                s -= self.get(i, j) * x[j];
            }
            x[i] = s / self.get(i, i);
        }
    }

    /// Solves `Aᵀ x = b` in place using the same factors.
    pub fn solve_transpose_in_place(&self, x: &mut [f64]) {
        let n = self.n;
        // Uᵀ z = b
        for i in 0..n {
            let mut s = x[i];
            for j in i.saturating_sub(self.ku)..i {
                s -= self.get(j, i) * x[j];
            }
            x[i] = s / self.get(i, i);
        }
        // Lᵀ x = z
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in i + 1..=(i + self.kl).min(n - 1) {
                s -= self.get(j, i) * x[j];
            }
            x[i] = s;
        }
    }
}

/// A sparse matrix together with its banded factors; every solve is checked
/// against [`SOLVE_TOL`] and refined if necessary.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    mat: CsMat<f64>,
    lu: BandedLu,
}

impl LinearSystem {
    pub fn new(mat: CsMat<f64>) -> Result<Self> {
        let lu = BandedLu::factor(&mat)?;
        Ok(Self { mat, lu })
    }

    pub fn matrix(&self) -> &CsMat<f64> {
        &self.mat
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        self.solve_impl(b, false)
    }

    pub fn solve_transpose(&self, b: &[f64]) -> Result<Vec<f64>> {
        self.solve_impl(b, true)
    }

    fn solve_impl(&self, b: &[f64], transpose: bool) -> Result<Vec<f64>> {
        let bnorm = norm2(b);
        let mut x = b.to_vec();
        if bnorm == 0.0 {
            return Ok(x);
        }
        let apply = |x: &[f64]| {
            if transpose {
                matvec_t(&self.mat, x)
            } else {
                matvec(&self.mat, x)
            }
        };
        let solve = |r: &mut [f64]| {
            if transpose {
                self.lu.solve_transpose_in_place(r)
            } else {
                self.lu.solve_in_place(r)
            }
        };
        solve(&mut x);
        let mut rel = f64::INFINITY;
        for _ in 0..4 {
            let ax = apply(&x);
            let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
            rel = norm2(&r) / bnorm;
            if rel <= SOLVE_TOL {
                return Ok(x);
            }
            solve(&mut r);
            for (xi, ri) in x.iter_mut().zip(&r) {
                *xi += ri;
            }
        }
        Err(Error::SolverNonconvergence(rel))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tridiag(n: usize) -> CsMat<f64> {
        let mut t = Triplets::new(n, n);
        for i in 0..n {
            t.push(i, i, 4.0 + i as f64 * 0.1);
            if i > 0 {
                t.push(i, i - 1, -1.0);
            }
            if i + 2 < n {
                t.push(i, i + 2, -0.5);
            }
        }
        t.into_csr()
    }

    #[test]
    fn banded_solve_and_transpose_solve() {
        let a = tridiag(12);
        let sys = LinearSystem::new(a.clone()).unwrap();
        let b: Vec<f64> = (0..12).map(|i| (i as f64).sin() + 1.0).collect();
        let x = sys.solve(&b).unwrap();
        let ax = matvec(&a, &x);
        for (u, v) in ax.iter().zip(&b) {
            assert!((u - v).abs() < 1e-13);
        }
        let y = sys.solve_transpose(&b).unwrap();
        let aty = matvec_t(&a, &y);
        for (u, v) in aty.iter().zip(&b) {
            assert!((u - v).abs() < 1e-13);
        }
    }

    #[test]
    fn bandwidth_is_detected() {
        assert_eq!(bandwidth(&tridiag(8)), (1, 2));
    }

    #[test]
    fn zero_pivot_is_reported() {
        let mut t = Triplets::new(2, 2);
        t.push(0, 1, 1.0);
        t.push(1, 0, 1.0);
        assert!(matches!(BandedLu::factor(&t.into_csr()), Err(Error::SingularPivot(0))));
    }
}
