//! Spectral Partition: trimming, spectral decomposition (sign split for
//! `K = 2`, rank-`K` ball seeding for `K >= 3`) and greedy improvement.

use std::io::{BufRead, Write};

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{top_eigenpairs, EigenOptions, EigenPair, Spectrum, SymCsr};
use crate::rng::{derive_seed, rng_from_seed, SimRng};
use crate::sampling::ObservationStore;

/// Symmetric matrix of positive-outcome counts with zero diagonal, stored
/// as CSR with both triangles.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservationMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    counts: Vec<u64>,
}

impl ObservationMatrix {
    /// Builds from `(v, w, count)` with `v != w`; order within a pair is
    /// irrelevant and duplicates are summed.
    pub fn from_entries(n: usize, entries: impl IntoIterator<Item = (usize, usize, u64)>) -> Result<Self> {
        let mut full = Vec::new();
        for (v, w, c) in entries {
            if v == w || v >= n || w >= n {
                return Err(Error::InvalidPair { v, w, n });
            }
            if c > 0 {
                full.push((v, w, c));
                full.push((w, v, c));
            }
        }
        full.sort_unstable_by_key(|&(v, w, _)| (v, w));
        let mut row_ptr = vec![0usize; n + 1];
        let mut cols: Vec<usize> = Vec::with_capacity(full.len());
        let mut counts: Vec<u64> = Vec::with_capacity(full.len());
        let mut last = None;
        for (v, w, c) in full {
            if last == Some((v, w)) {
                *counts.last_mut().unwrap() += c;
                continue;
            }
            last = Some((v, w));
            row_ptr[v + 1] += 1;
            cols.push(w);
            counts.push(c);
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        Ok(Self { n, row_ptr, cols, counts })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            row_ptr: vec![0; n + 1],
            cols: Vec::new(),
            counts: Vec::new(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn row(&self, v: usize) -> impl Iterator<Item = (usize, u64)> + '_ {
        let r = self.row_ptr[v]..self.row_ptr[v + 1];
        self.cols[r.clone()].iter().copied().zip(self.counts[r].iter().copied())
    }

    pub fn get(&self, v: usize, w: usize) -> u64 {
        let r = self.row_ptr[v]..self.row_ptr[v + 1];
        match self.cols[r.clone()].binary_search(&w) {
            Ok(i) => self.counts[r.start + i],
            Err(_) => 0,
        }
    }

    pub fn row_sum(&self, v: usize) -> u64 {
        self.row(v).map(|(_, c)| c).sum()
    }

    /// Sum over ordered pairs, i.e. twice the upper-triangle sum.
    pub fn total_ordered(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Upper-triangle entries `(v, w, count)` with `v < w`, row-major.
    pub fn upper_entries(&self) -> impl Iterator<Item = (usize, usize, u64)> + '_ {
        (0..self.n).flat_map(move |v| self.row(v).filter(move |&(w, _)| w > v).map(move |(w, c)| (v, w, c)))
    }

    /// Every entry multiplied by `factor`.
    pub fn scaled(&self, factor: u64) -> Self {
        let mut m = self.clone();
        m.counts.iter_mut().for_each(|c| *c *= factor);
        if factor == 0 {
            return Self::zeros(self.n);
        }
        m
    }

    /// Principal submatrix on `keep` (ascending original indices), reindexed.
    pub fn submatrix(&self, keep: &[usize]) -> Self {
        let mut index = vec![usize::MAX; self.n];
        for (i, &v) in keep.iter().enumerate() {
            index[v] = i;
        }
        let entries: Vec<_> = keep
            .iter()
            .enumerate()
            .flat_map(|(a, &v)| {
                let index = &index;
                self.row(v).filter_map(move |(w, c)| {
                    let b = index[w];
                    (b != usize::MAX && a < b).then_some((a, b, c))
                })
            })
            .collect();
        Self::from_entries(keep.len(), entries).expect("indices valid by construction")
    }

    pub fn to_sym_csr(&self) -> SymCsr {
        SymCsr::from_upper(self.n, self.upper_entries().map(|(v, w, c)| (v, w, c as f64)).collect::<Vec<_>>())
    }

    /// Coordinate text: a `n entries` header, then `v w count` per upper
    /// triangle entry, 0-indexed.
    pub fn write_coordinate<W: Write>(&self, mut out: W) -> Result<()> {
        let entries: Vec<_> = self.upper_entries().collect();
        writeln!(out, "{} {}", self.n, entries.len())?;
        for (v, w, c) in entries {
            writeln!(out, "{v} {w} {c}")?;
        }
        Ok(())
    }

    pub fn read_coordinate<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines.next().ok_or_else(|| Error::Parse("empty matrix file".into()))??;
        let head: Vec<usize> = parse_fields(&header)?;
        let [n, len] = head[..] else {
            return Err(Error::Parse(format!("bad matrix header {header:?}")));
        };
        let mut entries = Vec::with_capacity(len);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<u64> = parse_fields(&line)?;
            let [v, w, c] = f[..] else {
                return Err(Error::Parse(format!("bad matrix line {line:?}")));
            };
            entries.push((v as usize, w as usize, c));
        }
        if entries.len() != len {
            return Err(Error::Parse(format!("header announces {len} entries, found {}", entries.len())));
        }
        Self::from_entries(n, entries)
    }
}

fn parse_fields<T: std::str::FromStr>(line: &str) -> Result<Vec<T>> {
    line.split_whitespace()
        .map(|f| f.parse().map_err(|_| Error::Parse(format!("bad field {f:?} in {line:?}"))))
        .collect()
}

/// `A_vw` = positive outcomes on `(v, w)`; never-sampled pairs are 0.
pub fn build_matrix(store: &ObservationStore) -> ObservationMatrix {
    ObservationMatrix::from_entries(
        store.n(),
        store
            .sorted_entries()
            .into_iter()
            .map(|((v, w), t)| (v, w, t.positives)),
    )
    .expect("store keys are valid pairs")
}

/// Assignment of nodes to `k` clusters; empty clusters are allowed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionEstimate {
    pub k: usize,
    pub labels: Vec<usize>,
}

impl PartitionEstimate {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        self.labels.iter().for_each(|&l| sizes[l] += 1);
        sizes
    }
}

#[derive(Debug, Clone)]
pub struct TrimmedMatrix {
    /// Retained original node indices, ascending.
    pub gamma: Vec<usize>,
    /// `A` restricted to `gamma x gamma`, reindexed by position in `gamma`.
    pub a_gamma: ObservationMatrix,
    pub n_total: usize,
}

/// Keeps nodes whose row sum is at most `5K` times the mean row sum.
pub fn trim(a: &ObservationMatrix, k: usize) -> TrimmedMatrix {
    let n = a.n() as u128;
    let limit = 5 * k as u128 * a.total_ordered() as u128;
    let gamma: Vec<usize> = (0..a.n()).filter(|&v| a.row_sum(v) as u128 * n <= limit).collect();
    TrimmedMatrix {
        a_gamma: a.submatrix(&gamma),
        gamma,
        n_total: a.n(),
    }
}

fn ceil_ln(n: usize) -> usize {
    (n as f64).ln().ceil().max(0.0) as usize
}

/// Sign split of the centred sum of the two leading eigenvectors. Labels
/// are indexed by position in `gamma`.
pub fn spectral_split_k2(tm: &TrimmedMatrix, eigen: &EigenOptions, rng: &mut SimRng) -> Result<PartitionEstimate> {
    let g = tm.gamma.len();
    if g < 2 {
        return Err(Error::Degenerate(format!("K = 2 split needs |Gamma| >= 2, got {g}")));
    }
    let xhat = if tm.a_gamma.total_ordered() == 0 {
        vec![0.0; g]
    } else {
        let pairs = top_eigenpairs(&tm.a_gamma.to_sym_csr(), 2, Spectrum::LargestAlgebraic, eigen)?;
        let x1 = &pairs[0].vector;
        let mut x2 = pairs[1].vector.clone();
        if x1.iter().sum::<f64>() * x2.iter().sum::<f64>() > 0.0 {
            x2.iter_mut().for_each(|x| *x = -*x);
        }
        let sum: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| a + b).collect();
        let mean = sum.iter().sum::<f64>() / g as f64;
        sum.into_iter().map(|x| x - mean).collect()
    };
    let labels = xhat
        .iter()
        .map(|&x| {
            if x > 0.0 {
                0
            } else if x < 0.0 {
                1
            } else {
                rng.random_range(0..2)
            }
        })
        .collect();
    Ok(PartitionEstimate { k: 2, labels })
}

/// The `k` largest-magnitude eigenpairs of `A_Gamma`.
fn leading_pairs(tm: &TrimmedMatrix, k: usize, eigen: &EigenOptions) -> Result<Vec<EigenPair>> {
    if k > tm.gamma.len() {
        return Err(Error::Degenerate(format!(
            "rank-{k} approximation of a {0}x{0} matrix",
            tm.gamma.len()
        )));
    }
    top_eigenpairs(&tm.a_gamma.to_sym_csr(), k, Spectrum::LargestMagnitude, eigen)
}

/// Rank-`k` truncation `U Lambda U^T` of `A_Gamma` on the `k`
/// largest-magnitude eigenvalues.
pub fn rank_k_approx(tm: &TrimmedMatrix, k: usize, eigen: &EigenOptions) -> Result<DMatrix<f64>> {
    let pairs = leading_pairs(tm, k, eigen)?;
    let g = tm.gamma.len();
    let mut out = DMatrix::zeros(g, g);
    for pair in &pairs {
        let u = nalgebra::DVector::from_column_slice(&pair.vector);
        out += pair.value * &u * u.transpose();
    }
    Ok(out)
}

/// Rows `y_v = Lambda u_v`. Since `A_hat = U Lambda U^T` with orthonormal
/// `U`, `||y_v - y_w|| = ||A_hat_v - A_hat_w||` for every pair of columns.
fn spectral_embedding(pairs: &[EigenPair], g: usize) -> Vec<Vec<f64>> {
    (0..g)
        .map(|v| pairs.iter().map(|p| p.value * p.vector[v]).collect())
        .collect()
}

/// Ball radius (squared distance) used in round `i` of the `K >= 3`
/// decomposition, given `density = sum_{v,w} A_vw / n^2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BallRadius {
    /// `i * density / 100`.
    Printed,
    /// `2^(i-1) * density`.
    #[default]
    Doubling,
}

impl BallRadius {
    pub fn radius(self, round: usize, density: f64) -> f64 {
        match self {
            BallRadius::Printed => round as f64 * density / 100.0,
            BallRadius::Doubling => 2f64.powi(round as i32 - 1) * density,
        }
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// One ball-seeding round; `None` when a seed set comes out empty.
fn seed_round(y: &[Vec<f64>], k: usize, radius: f64) -> Option<(Vec<usize>, f64)> {
    let g = y.len();
    let mut label = vec![usize::MAX; g];
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    for c in 0..k {
        let mut best = (0usize, 0usize);
        for v in 0..g {
            let size = (0..g)
                .filter(|&w| label[w] == usize::MAX && dist2(&y[v], &y[w]) <= radius)
                .count();
            if size > best.1 {
                best = (v, size);
            }
        }
        if best.1 == 0 {
            return None;
        }
        let center = best.0;
        let mut centroid = vec![0.0; y[0].len()];
        for w in 0..g {
            if label[w] == usize::MAX && dist2(&y[center], &y[w]) <= radius {
                label[w] = c;
                centroid.iter_mut().zip(&y[w]).for_each(|(a, b)| *a += b);
            }
        }
        let size = best.1 as f64;
        centroid.iter_mut().for_each(|a| *a /= size);
        centroids.push(centroid);
    }
    for v in 0..g {
        if label[v] == usize::MAX {
            label[v] = (0..k)
                .min_by(|&a, &b| dist2(&y[v], &centroids[a]).total_cmp(&dist2(&y[v], &centroids[b])))
                .expect("k >= 1");
        }
    }
    let score = (0..g).map(|v| dist2(&y[v], &centroids[label[v]])).sum();
    Some((label, score))
}

/// Ball seeding on the rank-`k` approximation over `ceil(ln n)` radii,
/// keeping the round with the smallest within-cluster scatter. Labels are
/// indexed by position in `gamma`.
pub fn spectral_split_general(
    tm: &TrimmedMatrix,
    k: usize,
    density: f64,
    radius: BallRadius,
    eigen: &EigenOptions,
) -> Result<PartitionEstimate> {
    let g = tm.gamma.len();
    let pairs = leading_pairs(tm, k, eigen)?;
    let y = spectral_embedding(&pairs, g);
    let rounds = ceil_ln(tm.n_total).max(1);
    let mut best: Option<(Vec<usize>, f64)> = None;
    for i in 1..=rounds {
        if let Some((labels, score)) = seed_round(&y, k, radius.radius(i, density)) {
            if best.as_ref().is_none_or(|b| score < b.1) {
                best = Some((labels, score));
            }
        }
    }
    match best {
        Some((labels, _)) => Ok(PartitionEstimate { k, labels }),
        None => Err(Error::Degenerate(format!(
            "every seeding round left an empty seed set ({rounds} rounds, |Gamma| = {g})"
        ))),
    }
}

/// Synchronous improvement sweeps: every node moves to the cluster maximising
/// `sum_{w in S_k} A_vw / |S_k|` over the previous sweep's non-empty clusters.
/// Scores are compared exactly on integers; ties are broken uniformly.
pub fn improve(
    a: &ObservationMatrix,
    initial: &PartitionEstimate,
    rounds: usize,
    rng: &mut SimRng,
) -> Result<PartitionEstimate> {
    assert_eq!(initial.labels.len(), a.n());
    let k = initial.k;
    let mut labels = initial.labels.clone();
    let mut sums = vec![0u64; k];
    for _ in 0..rounds {
        let sizes = PartitionEstimate { k, labels: labels.clone() }.cluster_sizes();
        if sizes.iter().all(|&s| s == 0) {
            return Err(Error::Degenerate("improvement step with every cluster empty".into()));
        }
        let mut next = vec![0usize; a.n()];
        for (v, slot) in next.iter_mut().enumerate() {
            sums.iter_mut().for_each(|s| *s = 0);
            for (w, c) in a.row(v) {
                sums[labels[w]] += c;
            }
            let mut best = usize::MAX;
            let mut ties = 0u32;
            for c in 0..k {
                if sizes[c] == 0 {
                    continue;
                }
                if best == usize::MAX {
                    (best, ties) = (c, 1);
                    continue;
                }
                let lhs = sums[c] as u128 * sizes[best] as u128;
                let rhs = sums[best] as u128 * sizes[c] as u128;
                if lhs > rhs {
                    (best, ties) = (c, 1);
                } else if lhs == rhs {
                    ties += 1;
                    if rng.random_range(0..ties) == 0 {
                        best = c;
                    }
                }
            }
            *slot = best;
        }
        labels = next;
    }
    Ok(PartitionEstimate { k, labels })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralPartition {
    pub k: usize,
    pub radius: BallRadius,
    pub eigen: EigenOptions,
    /// Overrides the default `ceil(ln n)` improvement sweeps.
    pub improve_rounds: Option<usize>,
}

impl SpectralPartition {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            radius: BallRadius::default(),
            eigen: EigenOptions::default(),
            improve_rounds: None,
        }
    }

    pub fn run(&self, a: &ObservationMatrix, seed: u64) -> Result<SpOutcome> {
        let n = a.n();
        let k = self.k;
        if k < 2 {
            return Err(Error::InvalidParams(format!("K must be at least 2, got {k}")));
        }
        let mut rng = rng_from_seed(derive_seed(seed, &[0]));
        let eigen = EigenOptions {
            seed: derive_seed(seed, &[1]),
            ..self.eigen
        };
        let tm = trim(a, k);
        if tm.gamma.is_empty() {
            return Err(Error::EmptyTrimmedSet);
        }
        let split = if k == 2 {
            spectral_split_k2(&tm, &eigen, &mut rng)?
        } else {
            let density = a.total_ordered() as f64 / (n as f64 * n as f64);
            spectral_split_general(&tm, k, density, self.radius, &eigen)?
        };
        let mut labels = vec![usize::MAX; n];
        for (&v, &l) in tm.gamma.iter().zip(&split.labels) {
            labels[v] = l;
        }
        for l in labels.iter_mut().filter(|l| **l == usize::MAX) {
            *l = rng.random_range(0..k);
        }
        let initial = PartitionEstimate { k, labels };
        let rounds = self.improve_rounds.unwrap_or_else(|| ceil_ln(n));
        let estimate = improve(a, &initial, rounds, &mut rng)?;
        Ok(SpOutcome {
            estimate,
            initial,
            gamma_len: tm.gamma.len(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct SpOutcome {
    pub estimate: PartitionEstimate,
    /// Labels after the spectral step and random fill, before improvement.
    pub initial: PartitionEstimate,
    pub gamma_len: usize,
}

impl SpOutcome {
    /// Fraction of nodes removed by trimming.
    pub fn trimmed_fraction(&self) -> f64 {
        let n = self.estimate.labels.len();
        if n == 0 {
            0.0
        } else {
            (n - self.gamma_len) as f64 / n as f64
        }
    }
}

/// Spectral Partition with default settings.
pub fn run_sp(a: &ObservationMatrix, k: usize, seed: u64) -> Result<PartitionEstimate> {
    SpectralPartition::new(k).run(a, seed).map(|o| o.estimate)
}
