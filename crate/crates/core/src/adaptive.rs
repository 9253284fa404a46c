//! Adaptive Spectral Partition.
//!
//! A fifth of the budget builds reference kernels on a small random node
//! set; the rest classifies every other node by sampling it against each
//! kernel and accepting only decisive margins.

use std::collections::HashMap;
use std::io::Write;

use rand::seq::index::sample;
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::SbmInstance;
use crate::rng::{derive_seed, rng_from_seed, SimRng};
use crate::sampling::{adaptive_query, decode_pair, BudgetLedger, ObservationStore};
use crate::spectral::{run_sp, ObservationMatrix, PartitionEstimate};

/// `max(ceil(n / (5 ln n)), 10K)`.
pub fn kernel_set_size(n: usize, k: usize) -> usize {
    let raw = (n as f64 / (5.0 * (n as f64).ln())).ceil() as usize;
    raw.max(10 * k)
}

/// Uniform random kernel candidate set, ascending.
pub fn select_kernel_nodes(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if n < 3 {
        return Err(Error::InvalidParams(format!("adaptive partition needs n >= 3, got {n}")));
    }
    let size = kernel_set_size(n, k);
    if size > n {
        return Err(Error::InvalidParams(format!(
            "kernel set of {size} nodes does not fit in n = {n} (K = {k})"
        )));
    }
    let mut rng = rng_from_seed(seed);
    let mut nodes = sample(&mut rng, n, size).into_vec();
    nodes.sort_unstable();
    Ok(nodes)
}

#[derive(Debug, Clone)]
pub struct KernelState {
    /// Kernel candidate set, ascending.
    pub s: Vec<usize>,
    /// Disjoint kernels partitioning `s`.
    pub kernels: Vec<Vec<usize>>,
    pub p_hat: f64,
    pub q_hat: f64,
    pub intra_samples: u64,
    pub intra_positives: u64,
    pub inter_samples: u64,
    pub inter_positives: u64,
}

impl KernelState {
    pub fn k(&self) -> usize {
        self.kernels.len()
    }

    /// Kernel containing `v`, if any.
    pub fn kernel_of(&self, v: usize) -> Option<usize> {
        self.kernels.iter().position(|s| s.binary_search(&v).is_ok())
    }

    /// `|1 - (p_hat - q_hat) / (p - q)|`.
    pub fn estimate_error(&self, p: f64, q: f64) -> f64 {
        (1.0 - (self.p_hat - self.q_hat) / (p - q)).abs()
    }
}

/// Spends `kernel_budget` uniform with-replacement observations on pairs
/// inside `s`, clusters them with Spectral Partition and estimates the
/// intra and inter rates as empirical frequencies over the kernel pairs.
pub fn build_kernels(
    inst: &SbmInstance,
    s: &[usize],
    kernel_budget: u64,
    k: usize,
    ledger: &mut BudgetLedger,
    store: &mut ObservationStore,
    seed: u64,
) -> Result<KernelState> {
    let size = s.len();
    if kernel_budget == 0 || kernel_budget < size as u64 {
        return Err(Error::BudgetTooSmall(format!(
            "kernel budget {kernel_budget} is below the kernel set size {size}"
        )));
    }
    let pairs = (size * (size - 1) / 2) as u64;
    let mut rng = rng_from_seed(seed);
    let mut local: HashMap<(usize, usize), (u64, u64)> = HashMap::new();
    for _ in 0..kernel_budget {
        let (a, b) = decode_pair(rng.random_range(0..pairs));
        let x = adaptive_query(inst, s[a], s[b], ledger, store, &mut rng)?;
        let t = local.entry((a, b)).or_default();
        t.0 += 1;
        t.1 += x as u64;
    }
    let matrix = ObservationMatrix::from_entries(size, local.iter().map(|(&(a, b), &(_, z))| (a, b, z)))?;
    let clusters = run_sp(&matrix, k, derive_seed(seed, &[1]))?;

    let mut kernels = vec![Vec::new(); k];
    for (pos, &label) in clusters.labels.iter().enumerate() {
        kernels[label].push(s[pos]);
    }
    if let Some(empty) = kernels.iter().position(Vec::is_empty) {
        return Err(Error::Degenerate(format!("kernel {empty} is empty")));
    }
    let (mut intra, mut inter) = ((0u64, 0u64), (0u64, 0u64));
    for (&(a, b), &(m, z)) in &local {
        let t = if clusters.labels[a] == clusters.labels[b] { &mut intra } else { &mut inter };
        t.0 += m;
        t.1 += z;
    }
    let p_hat = intra.1 as f64 / intra.0 as f64;
    let q_hat = inter.1 as f64 / inter.0 as f64;
    // NaN from an empty tally fails this test too.
    if p_hat.partial_cmp(&q_hat) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::DegenerateEstimates { p_hat, q_hat });
    }
    Ok(KernelState {
        s: s.to_vec(),
        kernels,
        p_hat,
        q_hat,
        intra_samples: intra.0,
        intra_positives: intra.1,
        inter_samples: inter.0,
        inter_positives: inter.1,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationRecord {
    pub sweep: usize,
    pub node: usize,
    /// Positive outcomes against each kernel.
    pub counts: Vec<u64>,
    pub k_star: usize,
    /// `min_{k != k_star} (A_{k_star} - A_k)`.
    pub d_star: u64,
    pub accepted: bool,
    pub budget_remaining: u64,
}

/// Samples `v` against every kernel `per_kernel` times (partners uniform
/// with replacement) and accepts the best kernel when its margin reaches
/// `gamma`. Ties for the best kernel go to the lowest index.
#[allow(clippy::too_many_arguments)]
pub fn classify_node(
    inst: &SbmInstance,
    v: usize,
    ks: &KernelState,
    per_kernel: u64,
    gamma: f64,
    ledger: &mut BudgetLedger,
    store: &mut ObservationStore,
    rng: &mut SimRng,
) -> Result<ClassificationRecord> {
    let needed = per_kernel * ks.k() as u64;
    if ledger.remaining() < needed {
        return Err(Error::BudgetExhausted { total: ledger.total() });
    }
    let mut counts = vec![0u64; ks.k()];
    for (c, kernel) in ks.kernels.iter().enumerate() {
        for _ in 0..per_kernel {
            let w = kernel[rng.random_range(0..kernel.len())];
            counts[c] += adaptive_query(inst, v, w, ledger, store, rng)? as u64;
        }
    }
    let k_star = (0..counts.len()).fold(0, |best, c| if counts[c] > counts[best] { c } else { best });
    let d_star = (0..counts.len())
        .filter(|&c| c != k_star)
        .map(|c| counts[k_star] - counts[c])
        .min()
        .unwrap_or(0);
    Ok(ClassificationRecord {
        sweep: 0,
        node: v,
        counts,
        k_star,
        d_star,
        accepted: d_star as f64 >= gamma,
        budget_remaining: ledger.remaining(),
    })
}

/// `floor(2T / (3Kn))`.
pub fn per_kernel_budget(budget: u64, k: usize, n: usize) -> u64 {
    (2 * budget as u128 / (3 * k as u128 * n as u128)) as u64
}

/// Most classification attempts the post-kernel budget can pay for:
/// `floor((T - floor(T/5)) / (K b))`. Equals `floor(6n/5)` when `2T/(3Kn)`
/// is integral.
pub fn max_classification_attempts(budget: u64, k: usize, n: usize) -> u64 {
    let b = per_kernel_budget(budget, k, n);
    if b == 0 {
        return 0;
    }
    (budget - budget / 5) / (k as u64 * b)
}

#[derive(Debug, Clone)]
pub struct AspOutcome {
    pub estimate: PartitionEstimate,
    pub kernels: KernelState,
    pub audit: Vec<ClassificationRecord>,
    /// Nodes labelled at random after the budget ran out, ascending.
    pub randomly_assigned: Vec<usize>,
    pub kernel_consumed: u64,
    pub consumed: u64,
    pub gamma: f64,
    pub per_kernel: u64,
    pub store: ObservationStore,
}

/// Adaptive Spectral Partition on `inst` with budget `budget`.
pub fn run_asp(inst: &SbmInstance, budget: u64, k: usize, seed: u64) -> Result<AspOutcome> {
    let n = inst.n();
    if k < 2 {
        return Err(Error::InvalidParams(format!("K must be at least 2, got {k}")));
    }
    let per_kernel = per_kernel_budget(budget, k, n);
    if per_kernel == 0 {
        return Err(Error::BudgetTooSmall(format!(
            "T = {budget} gives a per-kernel budget floor(2T/(3Kn)) of 0"
        )));
    }
    let s = select_kernel_nodes(n, k, derive_seed(seed, &[0]))?;
    let mut ledger = BudgetLedger::new(budget);
    let mut store = ObservationStore::new(n);
    let kernels = build_kernels(inst, &s, budget / 5, k, &mut ledger, &mut store, derive_seed(seed, &[1]))?;
    let kernel_consumed = ledger.consumed();
    let gamma = (kernels.p_hat - kernels.q_hat) * budget as f64 / (2.0 * k as f64 * n as f64);

    let mut labels = vec![usize::MAX; n];
    for (c, kernel) in kernels.kernels.iter().enumerate() {
        for &v in kernel {
            labels[v] = c;
        }
    }
    let mut rng = rng_from_seed(derive_seed(seed, &[2]));
    let mut unresolved: Vec<usize> = (0..n).filter(|&v| labels[v] == usize::MAX).collect();
    let mut audit = Vec::new();
    let attempt_cost = per_kernel * k as u64;
    let mut sweep = 0;
    'sweeps: while !unresolved.is_empty() {
        sweep += 1;
        let mut still = Vec::new();
        for (i, &v) in unresolved.iter().enumerate() {
            if ledger.remaining() < attempt_cost {
                still.extend_from_slice(&unresolved[i..]);
                unresolved = still;
                break 'sweeps;
            }
            let mut rec = classify_node(inst, v, &kernels, per_kernel, gamma, &mut ledger, &mut store, &mut rng)?;
            rec.sweep = sweep;
            if rec.accepted {
                labels[v] = rec.k_star;
            } else {
                still.push(v);
            }
            audit.push(rec);
        }
        unresolved = still;
    }
    for &v in &unresolved {
        labels[v] = rng.random_range(0..k);
    }
    Ok(AspOutcome {
        estimate: PartitionEstimate { k, labels },
        kernels,
        audit,
        randomly_assigned: unresolved,
        kernel_consumed,
        consumed: ledger.consumed(),
        gamma,
        per_kernel,
        store,
    })
}

#[derive(Serialize)]
struct AuditRow {
    sweep: usize,
    node: usize,
    k_star: usize,
    d_star: u64,
    gamma: f64,
    accepted: bool,
    budget_remaining: u64,
}

/// One CSV row per classification attempt.
pub fn write_audit_csv<W: Write>(outcome: &AspOutcome, out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    if outcome.audit.is_empty() {
        wtr.write_record(["sweep", "node", "k_star", "d_star", "gamma", "accepted", "budget_remaining"])?;
    }
    for r in &outcome.audit {
        wtr.serialize(AuditRow {
            sweep: r.sweep,
            node: r.node,
            k_star: r.k_star,
            d_star: r.d_star,
            gamma: outcome.gamma,
            accepted: r.accepted,
            budget_remaining: r.budget_remaining,
        })?;
    }
    wtr.flush()?;
    Ok(())
}
