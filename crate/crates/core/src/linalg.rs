//! Sparse symmetric matrices and a top-k symmetric eigensolver.
//!
//! Large problems go through Lanczos with full reorthogonalisation; below
//! `dense_below` rows the matrix is densified and handed to a full
//! symmetric eigendecomposition.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, SimRng};

/// Symmetric matrix in CSR form with both triangles stored.
#[derive(Debug, Clone, PartialEq)]
pub struct SymCsr {
    dim: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl SymCsr {
    /// Builds from upper-triangle (including diagonal) entries `(i, j, x)`
    /// with `i <= j`. Duplicates are summed, explicit zeros dropped.
    pub fn from_upper(dim: usize, entries: impl IntoIterator<Item = (usize, usize, f64)>) -> Self {
        let mut full: Vec<(usize, usize, f64)> = Vec::new();
        for (i, j, x) in entries {
            assert!(i < dim && j < dim, "entry ({i}, {j}) outside {dim}x{dim}");
            if x == 0.0 {
                continue;
            }
            full.push((i, j, x));
            if i != j {
                full.push((j, i, x));
            }
        }
        full.sort_unstable_by_key(|e| (e.0, e.1));
        let mut row_ptr = vec![0usize; dim + 1];
        let mut cols = Vec::with_capacity(full.len());
        let mut vals: Vec<f64> = Vec::with_capacity(full.len());
        let mut last: Option<(usize, usize)> = None;
        for (i, j, x) in full {
            if last == Some((i, j)) {
                *vals.last_mut().unwrap() += x;
                continue;
            }
            last = Some((i, j));
            row_ptr[i + 1] += 1;
            cols.push(j);
            vals.push(x);
        }
        for i in 0..dim {
            row_ptr[i + 1] += row_ptr[i];
        }
        Self {
            dim,
            row_ptr,
            cols,
            vals,
        }
    }

    /// Builds from a dense row-major square matrix, reading the upper triangle.
    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        assert_eq!(m.nrows(), m.ncols());
        let d = m.nrows();
        Self::from_upper(
            d,
            (0..d).flat_map(|i| (i..d).map(move |j| (i, j))).map(|(i, j)| (i, j, m[(i, j)])),
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// Nonzeros of row `i` as `(column, value)`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()].iter().copied().zip(self.vals[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.cols[r.clone()].binary_search(&j) {
            Ok(pos) => self.vals[r.start + pos],
            Err(_) => 0.0,
        }
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.dim).map(|i| self.row(i).map(|(_, x)| x).sum()).collect()
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = self.row(i).map(|(j, a)| a * x[j]).sum();
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.vals.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Principal submatrix on `keep` (indices into this matrix, ascending).
    pub fn principal_submatrix(&self, keep: &[usize]) -> Self {
        let mut new_index = vec![usize::MAX; self.dim];
        for (k, &i) in keep.iter().enumerate() {
            new_index[i] = k;
        }
        let entries = keep.iter().enumerate().flat_map(|(a, &i)| {
            let new_index = &new_index;
            self.row(i).filter_map(move |(j, x)| {
                let b = new_index[j];
                (b != usize::MAX && a <= b).then_some((a, b, x))
            })
        });
        Self::from_upper(keep.len(), entries.collect::<Vec<_>>())
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for i in 0..self.dim {
            for (j, x) in self.row(i) {
                m[(i, j)] = x;
            }
        }
        m
    }
}

/// Which end of the spectrum to extract.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Spectrum {
    /// Largest eigenvalues in signed order.
    LargestAlgebraic,
    /// Largest eigenvalues in absolute value.
    LargestMagnitude,
}

impl Spectrum {
    fn key(self, x: f64) -> f64 {
        match self {
            Spectrum::LargestAlgebraic => x,
            Spectrum::LargestMagnitude => x.abs(),
        }
    }

    /// Indices of `values` ordered by preference (best first).
    fn order(self, values: &[f64]) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..values.len()).collect();
        idx.sort_by(|&a, &b| {
            self.key(values[b])
                .total_cmp(&self.key(values[a]))
                .then(values[b].total_cmp(&values[a]))
        });
        idx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EigenPair {
    pub value: f64,
    /// Unit-norm eigenvector.
    pub vector: Vec<f64>,
    /// `||M x - lambda x||` as measured on the returned pair.
    pub residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigenOptions {
    /// Relative residual tolerance: `||Mx - lambda x|| <= tol * ||M||`.
    pub tol: f64,
    /// Seed of the Lanczos start vector.
    pub seed: u64,
    /// Matrices with fewer rows than this use the dense solver.
    pub dense_below: usize,
}

impl Default for EigenOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            seed: 0x5eed,
            dense_below: 64,
        }
    }
}

/// The `k` eigenpairs of `m` preferred by `which`, best first.
pub fn top_eigenpairs(
    m: &SymCsr,
    k: usize,
    which: Spectrum,
    opts: &EigenOptions,
) -> Result<Vec<EigenPair>> {
    if k > m.dim() {
        return Err(Error::InvalidParams(format!(
            "requested {k} eigenpairs of a {0}x{0} matrix",
            m.dim()
        )));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    if m.dim() < opts.dense_below {
        dense_top(m, k, which)
    } else {
        lanczos_top(m, k, which, opts)
    }
}

fn residual_of(m: &SymCsr, value: f64, x: &[f64], scratch: &mut [f64]) -> f64 {
    m.matvec(x, scratch);
    scratch
        .iter()
        .zip(x)
        .map(|(mx, xi)| (mx - value * xi).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Full dense symmetric eigendecomposition, then selection.
pub fn dense_top(m: &SymCsr, k: usize, which: Spectrum) -> Result<Vec<EigenPair>> {
    let eig = SymmetricEigen::new(m.to_dense());
    let values: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    let mut scratch = vec![0.0; m.dim()];
    Ok(which
        .order(&values)
        .into_iter()
        .take(k)
        .map(|i| {
            let vector: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
            let residual = residual_of(m, values[i], &vector, &mut scratch);
            EigenPair {
                value: values[i],
                vector,
                residual,
            }
        })
        .collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += alpha * xi);
}

/// Two passes of classical Gram-Schmidt against `basis`.
fn orthogonalize(w: &mut [f64], basis: &[Vec<f64>]) {
    for _ in 0..2 {
        for q in basis {
            let c = dot(q, w);
            axpy(-c, q, w);
        }
    }
}

/// A random unit vector orthogonal to `basis`, or `None` if the basis
/// already spans the space.
fn fresh_direction(dim: usize, basis: &[Vec<f64>], rng: &mut SimRng) -> Option<Vec<f64>> {
    if basis.len() >= dim {
        return None;
    }
    for _ in 0..8 {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        orthogonalize(&mut v, basis);
        let nv = norm(&v);
        if nv > 1e-10 {
            v.iter_mut().for_each(|x| *x /= nv);
            return Some(v);
        }
    }
    None
}

/// Lanczos with full reorthogonalisation. On an invariant-subspace
/// breakdown the recurrence restarts from a fresh random direction
/// orthogonal to the basis, so repeated eigenvalues are still resolved.
/// Convergence is only tested once the basis has at least `2k + 20`
/// vectors (or is complete), so a copy of a repeated eigenvalue hidden
/// behind an early breakdown is picked up by a restart first.
pub fn lanczos_top(
    m: &SymCsr,
    k: usize,
    which: Spectrum,
    opts: &EigenOptions,
) -> Result<Vec<EigenPair>> {
    let dim = m.dim();
    let mut rng = rng_from_seed(opts.seed);
    let min_block = (2 * k + 20).min(dim);

    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut alpha: Vec<f64> = Vec::new();
    // beta[j] couples basis[j] and basis[j + 1].
    let mut beta: Vec<f64> = Vec::new();
    let mut scale: f64 = 0.0;
    let mut since_check = 0usize;
    let mut last_residual = f64::INFINITY;

    basis.push(fresh_direction(dim, &basis, &mut rng).expect("dim > 0"));
    let mut w = vec![0.0; dim];
    loop {
        let j = basis.len() - 1;
        m.matvec(&basis[j], &mut w);
        let a = dot(&basis[j], &w);
        alpha.push(a);
        axpy(-a, &basis[j], &mut w);
        if j > 0 && beta[j - 1] != 0.0 {
            axpy(-beta[j - 1], &basis[j - 1], &mut w);
        }
        orthogonalize(&mut w, &basis);
        let b = norm(&w);
        scale = scale.max(a.abs()).max(b);
        since_check += 1;

        let complete = basis.len() == dim;
        let broke_down = b <= 1e-12 * scale.max(f64::MIN_POSITIVE);
        let check_every = (basis.len() / 8).max(5);
        if complete || (basis.len() >= min_block && (since_check >= check_every || broke_down)) {
            since_check = 0;
            let b_tail = if broke_down { 0.0 } else { b };
            if let Some(pairs) = ritz_pairs(m, &basis, &alpha, &beta, b_tail, k, which, opts, &mut last_residual) {
                return Ok(pairs);
            }
            if complete {
                return Err(Error::EigenNoConvergence {
                    iterations: basis.len(),
                    residual: last_residual,
                    tolerance: opts.tol,
                });
            }
        }

        if broke_down {
            beta.push(0.0);
            match fresh_direction(dim, &basis, &mut rng) {
                Some(v) => basis.push(v),
                None => {
                    return ritz_pairs(m, &basis, &alpha, &beta[..beta.len() - 1], 0.0, k, which, opts, &mut last_residual)
                        .ok_or(Error::EigenNoConvergence {
                            iterations: basis.len(),
                            residual: last_residual,
                            tolerance: opts.tol,
                        });
                }
            }
        } else {
            beta.push(b);
            basis.push(w.iter().map(|x| x / b).collect());
        }
    }
}

/// Ritz pairs of the current tridiagonal projection; `Some` once the wanted
/// pairs meet the tolerance (estimated, then measured).
#[allow(clippy::too_many_arguments)]
fn ritz_pairs(
    m: &SymCsr,
    basis: &[Vec<f64>],
    alpha: &[f64],
    beta: &[f64],
    beta_tail: f64,
    k: usize,
    which: Spectrum,
    opts: &EigenOptions,
    last_residual: &mut f64,
) -> Option<Vec<EigenPair>> {
    let size = alpha.len();
    if size < k {
        return None;
    }
    let mut t = DMatrix::zeros(size, size);
    for i in 0..size {
        t[(i, i)] = alpha[i];
        if i + 1 < size {
            t[(i, i + 1)] = beta[i];
            t[(i + 1, i)] = beta[i];
        }
    }
    let eig = SymmetricEigen::new(t);
    let values: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    let norm_est = values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let threshold = opts.tol * norm_est;
    let wanted: Vec<usize> = which.order(&values).into_iter().take(k).collect();

    let estimated = wanted
        .iter()
        .map(|&i| (beta_tail * eig.eigenvectors[(size - 1, i)]).abs())
        .fold(0.0f64, f64::max);
    if estimated > 0.5 * threshold {
        *last_residual = estimated;
        return None;
    }

    let dim = m.dim();
    let mut scratch = vec![0.0; dim];
    let mut pairs = Vec::with_capacity(k);
    let mut worst = 0.0f64;
    for &i in &wanted {
        let mut x = vec![0.0; dim];
        for (r, q) in basis.iter().take(size).enumerate() {
            axpy(eig.eigenvectors[(r, i)], q, &mut x);
        }
        let nx = norm(&x);
        x.iter_mut().for_each(|xi| *xi /= nx);
        let residual = residual_of(m, values[i], &x, &mut scratch);
        worst = worst.max(residual);
        pairs.push(EigenPair {
            value: values[i],
            vector: x,
            residual,
        });
    }
    *last_residual = worst;
    (worst <= threshold).then_some(pairs)
}
