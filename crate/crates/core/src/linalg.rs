//! Compressed sparse rows, Jacobi-preconditioned BiCGSTAB and a dense LU fallback.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Square or rectangular matrix in CSR layout; column indices sorted per row.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from `(row, col, value)` triplets, summing duplicates.
    pub fn from_triplets(nrows: usize, ncols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by_key(|a| (a.0, a.1));
        let mut row_ptr = vec![0usize; nrows + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            assert!(r < nrows && c < ncols, "triplet ({r}, {c}) out of bounds");
            if last == Some((r, c)) {
                *values.last_mut().expect("duplicate follows an entry") += v;
            } else {
                col_idx.push(c);
                values.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..nrows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Self { nrows, ncols, row_ptr, col_idx, values }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_triplets(n, n, (0..n).map(|i| (i, i, 1.0)).collect())
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// `(col, value)` pairs of row `r`.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.nrows).flat_map(move |r| self.row(r).map(move |(c, v)| (r, c, v)))
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        match self.col_idx[span.clone()].binary_search(&c) {
            Ok(k) => self.values[span.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.nrows.min(self.ncols)).map(|i| self.get(i, i)).collect()
    }

    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.ncols);
        assert_eq!(y.len(), self.nrows);
        for (r, yr) in y.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            *yr = acc;
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        self.mul_vec_into(x, &mut y);
        y
    }

    pub fn transpose(&self) -> Self {
        Self::from_triplets(self.ncols, self.nrows, self.triplets().map(|(r, c, v)| (c, r, v)).collect())
    }

    /// `a * self + b * I`.
    pub fn scale_shift(&self, a: f64, b: f64) -> Self {
        assert_eq!(self.nrows, self.ncols);
        let mut t: Vec<_> = self.triplets().map(|(r, c, v)| (r, c, a * v)).collect();
        t.extend((0..self.nrows).map(|i| (i, i, b)));
        Self::from_triplets(self.nrows, self.ncols, t)
    }

    /// `D^{-1} self^T D` for the diagonal weights `w`.
    pub fn weighted_adjoint(&self, w: &[f64]) -> Self {
        assert_eq!(self.nrows, self.ncols);
        Self::from_triplets(self.nrows, self.ncols, self.triplets().map(|(r, c, v)| (c, r, w[r] * v / w[c])).collect())
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for (r, c, v) in self.triplets() {
            m[(r, c)] += v;
        }
        m
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Outcome of a linear solve.
#[derive(Clone, Debug)]
pub struct SolveOutcome {
    pub solution: Vec<f64>,
    pub iterations: usize,
    /// `|A u - f| / |f|` measured with the true residual.
    pub residual: f64,
}

/// Jacobi-preconditioned BiCGSTAB with restarts. Each cycle starts from the current
/// iterate with a freshly computed residual, so drift between the recursive and the
/// true residual or a breakdown only costs a restart. Stops when the true residual
/// is at most `tol * |b|` or after `max_iter` inner iterations in total.
pub fn bicgstab(a: &CsrMatrix, b: &[f64], tol: f64, max_iter: usize) -> Result<SolveOutcome> {
    let n = b.len();
    let bnorm = norm2(b);
    if bnorm == 0.0 {
        return Ok(SolveOutcome { solution: vec![0.0; n], iterations: 0, residual: 0.0 });
    }
    let inv_diag: Vec<f64> = a.diagonal().iter().map(|&d| if d != 0.0 { 1.0 / d } else { 1.0 }).collect();
    let true_residual = |x: &[f64], r: &mut [f64]| {
        a.mul_vec_into(x, r);
        for i in 0..n {
            r[i] = b[i] - r[i];
        }
        norm2(r)
    };
    let mut x = vec![0.0; n];
    let mut r = vec![0.0; n];
    let mut iterations = 0;
    let mut best = f64::INFINITY;
    let mut stalls = 0;
    while iterations < max_iter {
        let rn = true_residual(&x, &mut r);
        if rn <= tol * bnorm {
            break;
        }
        // a restart that gains less than a factor 2 counts as a stall
        if rn > 0.5 * best {
            stalls += 1;
            if stalls > 5 {
                break;
            }
        }
        best = best.min(rn);
        iterations += bicgstab_cycle(a, &inv_diag, &mut x, &mut r, tol * bnorm, max_iter - iterations);
    }
    let residual = true_residual(&x, &mut r) / bnorm;
    Ok(SolveOutcome { solution: x, iterations, residual })
}

/// One BiCGSTAB run from `x` with residual `r`; returns the iterations spent.
fn bicgstab_cycle(a: &CsrMatrix, inv_diag: &[f64], x: &mut [f64], r: &mut [f64], target: f64, budget: usize) -> usize {
    let n = x.len();
    let r_hat = r.to_vec();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut t = vec![0.0; n];
    for it in 1..=budget {
        let rho_new = dot(&r_hat, r);
        let beta = (rho_new / rho) * (alpha / omega);
        if rho_new == 0.0 || !beta.is_finite() {
            return it;
        }
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
            y[i] = inv_diag[i] * p[i];
        }
        a.mul_vec_into(&y, &mut v);
        let a_new = rho_new / dot(&r_hat, &v);
        if !a_new.is_finite() {
            return it;
        }
        alpha = a_new;
        for i in 0..n {
            s[i] = r[i] - alpha * v[i];
        }
        if norm2(&s) <= target {
            for i in 0..n {
                x[i] += alpha * y[i];
            }
            return it;
        }
        for i in 0..n {
            z[i] = inv_diag[i] * s[i];
        }
        a.mul_vec_into(&z, &mut t);
        let tt = dot(&t, &t);
        let w = if tt > 0.0 { dot(&t, &s) / tt } else { 0.0 };
        if w == 0.0 || !w.is_finite() {
            for i in 0..n {
                x[i] += alpha * y[i];
            }
            return it;
        }
        omega = w;
        for i in 0..n {
            x[i] += alpha * y[i] + omega * z[i];
            r[i] = s[i] - omega * t[i];
        }
        rho = rho_new;
        if norm2(r) <= target {
            return it;
        }
    }
    budget
}

/// Largest system factored densely.
pub const DENSE_LIMIT: usize = 1024;

/// A matrix prepared for repeated solves: LU-factored when small, iterative otherwise.
pub enum Factored {
    Dense(nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>, CsrMatrix),
    Iterative(CsrMatrix),
}

impl Factored {
    pub fn new(a: CsrMatrix) -> Self {
        if a.nrows() <= DENSE_LIMIT {
            Factored::Dense(a.to_dense().lu(), a)
        } else {
            Factored::Iterative(a)
        }
    }

    pub fn matrix(&self) -> &CsrMatrix {
        match self {
            Factored::Dense(_, a) | Factored::Iterative(a) => a,
        }
    }

    /// Solves `A u = f`, requiring a true relative residual of at most `1e-10`.
    pub fn solve(&self, f: &[f64]) -> Result<SolveOutcome> {
        let out = match self {
            Factored::Dense(lu, a) => {
                let rhs = DVector::from_column_slice(f);
                let u = lu.solve(&rhs).ok_or(Error::SolverDiverged { iterations: 0, residual: f64::INFINITY })?;
                let solution: Vec<f64> = u.iter().copied().collect();
                let fnorm = norm2(f);
                let residual = if fnorm == 0.0 {
                    norm2(&solution)
                } else {
                    let au = a.mul_vec(&solution);
                    norm2(&au.iter().zip(f).map(|(p, q)| p - q).collect::<Vec<_>>()) / fnorm
                };
                SolveOutcome { solution, iterations: 1, residual }
            }
            Factored::Iterative(a) => bicgstab(a, f, 1e-11, 10 * a.nrows())?,
        };
        if !(out.residual <= 1e-10) {
            return Err(Error::SolverDiverged { iterations: out.iterations, residual: out.residual });
        }
        Ok(out)
    }
}
