//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use budgeted_communities::adaptive::run_asp;
use budgeted_communities::Error;
use budgeted_communities::bounds::{
    adaptive_lower_bound, asp_upper_bound, kappa1, kl_bernoulli, nonadaptive_lower_bound, phase_threshold_t,
    sp_upper_bound, tau,
};
use budgeted_communities::eval::{
    best_agreement_matching, instance_seed, misclassification_labels, run_trial, Strategy,
};
use budgeted_communities::linalg::{top_eigenpairs, EigenOptions, Spectrum, SymCsr};
use budgeted_communities::model::{build_instance, sbml_dist_urs2, SbmParams};
use budgeted_communities::rng::rng_from_seed;
use budgeted_communities::spectral::{rank_k_approx, ObservationMatrix, TrimmedMatrix};
use nalgebra::DMatrix;
use rand::Rng;

type Criterion = (&'static str, fn() -> Verdict);

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn rel_close(got: f64, want: f64, tol: f64) -> bool {
    if want.abs() < 1e-300 {
        return got.abs() < 1e-290;
    }
    ((got - want) / want).abs() <= tol
}

/// Misclassification rates of `trials` seed indices; failed trials are `None`.
fn epsilons(params: &SbmParams, strategy: Strategy, t: u64, master: u64, trials: u64) -> Vec<Option<f64>> {
    (0..trials)
        .map(|s| run_trial(params, strategy, t, master, s, false).expect("valid trial").record.epsilon)
        .collect()
}

fn formula_fidelity() -> Verdict {
    let start = Instant::now();
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/bounds_oracle.csv");
    let mut rdr = csv::Reader::from_path(path).expect("oracle table");
    let header = rdr.headers().unwrap().clone();
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let mut rows = 0;
    let mut worst = 0.0f64;
    let mut bad = Vec::new();
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let f = |name: &str| rec[col(name)].parse::<f64>().unwrap();
        let u = |name: &str| rec[col(name)].parse::<u64>().unwrap();
        let (n, t, p, q, k) = (u("n") as usize, u("T"), f("p"), f("q"), u("K") as usize);
        let (a1, a2, ak) = (f("a1"), f("a2"), f("aK"));
        let dist = sbml_dist_urs2(&SbmParams::equal_sizes(n, 2, p, q).unwrap(), u("T_tau")).unwrap();
        let checks = [
            ("kl_pq", kl_bernoulli(p, q)),
            ("kl_qp", kl_bernoulli(q, p)),
            ("tau_urs2", tau(&dist, n)),
            ("kappa1", kappa1(n, t, p, q, a1, a2)),
            ("nonadaptive_lb", nonadaptive_lower_bound(n, t, p, q, &[a1, a2])),
            ("adaptive_lb", adaptive_lower_bound(n, t, p, q, ak).unwrap()),
            ("sp_ub", sp_upper_bound(n, t, p, q, a1)),
            ("asp_ub", asp_upper_bound(n, t, p, q, k)),
        ];
        for (name, got) in checks {
            let want = f(name);
            if want.abs() >= 1e-300 {
                worst = worst.max(((got - want) / want).abs());
            }
            if !rel_close(got, want, 1e-9) {
                bad.push(format!("row {rows} {name}: {got} vs {want}"));
            }
        }
        rows += 1;
    }
    let elapsed = start.elapsed();
    verdict(
        rows == 100 && bad.is_empty() && elapsed < Duration::from_secs(1),
        format!("{rows} rows, worst relative error {worst:.2e}, {:.0} ms {}", elapsed.as_secs_f64() * 1e3, bad.join("; ")),
    )
}

fn kl_inequalities() -> Verdict {
    let mut rng = rng_from_seed(2);
    let mut floor_violations = 0;
    let mut order_violations = 0;
    let mut near_ties = 0;
    for _ in 0..10_000 {
        let p: f64 = rng.random_range(1e-6..1.0 - 1e-6);
        let q: f64 = rng.random_range(1e-6..1.0 - 1e-6);
        let (pq, qp) = (kl_bernoulli(p, q), kl_bernoulli(q, p));
        if pq.min(qp) < (p - q).powi(2) / (2.0 * (p + q)) * (1.0 - 1e-12) {
            floor_violations += 1;
        }
        // Where p(1-p) and q(1-q) agree to rounding both divergences agree too.
        if (p * (1.0 - p) - q * (1.0 - q)).abs() <= 1e-12 || (pq - qp).abs() <= 1e-14 * pq.max(qp) {
            near_ties += 1;
        } else if (pq >= qp) != (p * (1.0 - p) >= q * (1.0 - q)) {
            order_violations += 1;
        }
    }
    verdict(
        floor_violations == 0 && order_violations == 0,
        format!("10000 pairs: {floor_violations} floor violations, {order_violations} ordering violations ({near_ties} rounding ties)"),
    )
}

fn sp_recovery_k2() -> Verdict {
    let start = Instant::now();
    let params = SbmParams::equal_sizes(500, 2, 0.5, 0.1).unwrap();
    let t = params.pair_count();
    let bound = sp_upper_bound(500, t, 0.5, 0.1, 0.5);
    let eps: Vec<f64> = epsilons(&params, Strategy::Urs2, t, 3, 20).into_iter().map(|e| e.unwrap_or(1.0)).collect();
    let within = eps.iter().filter(|&&e| e <= bound).count();
    let elapsed = start.elapsed();
    verdict(
        mean(&eps) <= 0.01 && within >= 18 && elapsed < Duration::from_secs(60),
        format!("mean eps {:.4}, {within}/20 within {bound:.4}, {:.1} s", mean(&eps), elapsed.as_secs_f64()),
    )
}

fn sp_recovery_k3() -> Verdict {
    let start = Instant::now();
    let params = SbmParams::equal_sizes(600, 3, 0.6, 0.1).unwrap();
    let eps: Vec<f64> = epsilons(&params, Strategy::Urs2, params.pair_count(), 4, 10)
        .into_iter()
        .map(|e| e.unwrap_or(1.0))
        .collect();
    let elapsed = start.elapsed();
    verdict(
        mean(&eps) <= 0.02 && elapsed < Duration::from_secs(60),
        format!("mean eps {:.4} over 10 seeds, {:.1} s", mean(&eps), elapsed.as_secs_f64()),
    )
}

/// Cyclic Jacobi eigensolver: eigenvalues and column eigenvectors.
#[allow(clippy::needless_range_loop)]
fn jacobi(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    let norm: f64 = a.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j].powi(2)).sum();
        if off.sqrt() <= 1e-15 * norm {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vkp, vkq) = (row[p], row[q]);
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let values = (0..n).map(|i| a[i][i]).collect();
    let vectors = (0..n).map(|j| (0..n).map(|i| v[i][j]).collect()).collect();
    (values, vectors)
}

fn spectral_oracle() -> Verdict {
    let mut rng = rng_from_seed(5);
    let mut worst_value = 0.0f64;
    let mut worst_vector = 0.0f64;
    let mut worst_approx = 0.0f64;
    for _ in 0..50 {
        let dim = 30;
        let mut entries = Vec::new();
        for v in 0..dim {
            for w in v + 1..dim {
                if rng.random_bool(0.5) {
                    entries.push((v, w, rng.random_range(1..20u64)));
                }
            }
        }
        let a = ObservationMatrix::from_entries(dim, entries).unwrap();
        let dense: Vec<Vec<f64>> = (0..dim).map(|v| (0..dim).map(|w| a.get(v, w) as f64).collect()).collect();
        let (values, vectors) = jacobi(dense);
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&i, &j| values[j].abs().total_cmp(&values[i].abs()));
        let csr: SymCsr = a.to_sym_csr();
        let tm = TrimmedMatrix { gamma: (0..dim).collect(), a_gamma: a, n_total: dim };
        let reference = {
            let mut m = DMatrix::zeros(dim, dim);
            for &i in &order[..3] {
                let u = nalgebra::DVector::from_column_slice(&vectors[i]);
                m += values[i] * &u * u.transpose();
            }
            m
        };
        for opts in [EigenOptions::default(), EigenOptions { dense_below: 0, ..EigenOptions::default() }] {
            let pairs = top_eigenpairs(&csr, 5, Spectrum::LargestMagnitude, &opts).unwrap();
            for (pair, &i) in pairs.iter().zip(&order) {
                worst_value = worst_value.max(((pair.value - values[i]) / values[i]).abs());
                let gap = order
                    .iter()
                    .filter(|&&j| j != i)
                    .map(|&j| (values[j] - values[i]).abs())
                    .fold(f64::INFINITY, f64::min);
                if gap > 1e-3 * values[order[0]].abs() {
                    let dot: f64 = pair.vector.iter().zip(&vectors[i]).map(|(x, y)| x * y).sum();
                    worst_vector = worst_vector.max(1.0 - dot.abs());
                }
            }
            let approx = rank_k_approx(&tm, 3, &opts).unwrap();
            worst_approx = worst_approx.max((&approx - &reference).norm() / reference.norm());
        }
    }
    verdict(
        worst_value <= 1e-6 && worst_approx <= 1e-6 && worst_vector <= 1e-6,
        format!("50 matrices: eigenvalue {worst_value:.2e}, eigenvector {worst_vector:.2e}, rank-3 Frobenius {worst_approx:.2e}"),
    )
}

/// Exhaustive agreement over all `k!` relabelings by Heap's algorithm.
fn exhaustive_agreement(est: &[usize], truth: &[usize], k: usize) -> usize {
    let mut perm: Vec<usize> = (0..k).collect();
    let score = |perm: &[usize]| est.iter().zip(truth).filter(|(&e, &t)| perm[e] == t).count();
    let mut best = score(&perm);
    let mut c = vec![0; k];
    let mut i = 0;
    while i < k {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.max(score(&perm));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best
}

fn metric_oracle() -> Verdict {
    let mut rng = rng_from_seed(6);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let k = rng.random_range(1..=6usize);
        let n = rng.random_range(1..=200usize);
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let est: Vec<usize> = truth
            .iter()
            .map(|&t| if rng.random_bool(0.6) { (t + 1) % k } else { rng.random_range(0..k) })
            .collect();
        let want = exhaustive_agreement(&est, &truth, k);
        let mut confusion = vec![vec![0u64; k]; k];
        for (&e, &t) in est.iter().zip(&truth) {
            confusion[e][t] += 1;
        }
        let eps = misclassification_labels(&est, &truth, k).unwrap();
        let exact = (n - want) as f64 / n as f64;
        if best_agreement_matching(&confusion) != want as u64 || eps != exact {
            mismatches += 1;
        }
    }
    verdict(mismatches == 0, format!("1000 cases, K <= 6: {mismatches} mismatches"))
}

const DOMINANCE_BUDGETS: [u64; 3] = [1_500_000, 1_700_000, 1_800_000];

fn asp_dominance() -> Verdict {
    let start = Instant::now();
    let params = SbmParams::equal_sizes(2000, 2, 0.01, 0.005).unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    for t in DOMINANCE_BUDGETS {
        let sp: Vec<f64> = epsilons(&params, Strategy::Urs1, t, 7, 10).into_iter().map(|e| e.unwrap_or(1.0)).collect();
        let asp: Vec<f64> = epsilons(&params, Strategy::Asp, t, 7, 10).into_iter().map(|e| e.unwrap_or(1.0)).collect();
        let (ms, ma) = (mean(&sp), mean(&asp));
        pass &= (0.05..=0.4).contains(&ms) && ma < ms;
        parts.push(format!("T={t}: SP {ms:.3} ASP {ma:.3}"));
    }
    let elapsed = start.elapsed();
    pass &= elapsed < Duration::from_secs(300);
    verdict(pass, format!("{}, {:.1} s", parts.join(", "), elapsed.as_secs_f64()))
}

fn asp_bound() -> Verdict {
    let configs = [
        (SbmParams::equal_sizes(2000, 2, 0.01, 0.005).unwrap(), DOMINANCE_BUDGETS[2]),
        (SbmParams::equal_sizes(1000, 2, 0.5, 0.1).unwrap(), 200_000),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (params, t) in configs {
        let bound = asp_upper_bound(params.n, t, params.p, params.q, params.k);
        let signal = (params.p - params.q).powi(2) / (params.p + params.q) * t as f64 / params.n as f64;
        let violations = epsilons(&params, Strategy::Asp, t, 8, 20)
            .into_iter()
            .filter(|e| e.is_none_or(|e| e > bound))
            .count();
        pass &= violations <= 2;
        parts.push(format!("n={} p={} T={t} signal {signal:.1} bound {bound:.3e}: {violations}/20 violations", params.n, params.p));
    }
    verdict(pass, parts.join("; "))
}

fn phase_threshold() -> Verdict {
    let t = phase_threshold_t(4000, 1e-3, 5e-5);
    verdict(
        t.is_some_and(|t| (2_300_000..=4_700_000).contains(&t)),
        format!("phase threshold {t:?}"),
    )
}

fn run_cli(args: &[&str]) -> (i32, Vec<u8>) {
    let out = Command::new(env!("CARGO_BIN_EXE_budgeted-communities"))
        .args(args)
        .env("BUDGETED_COMMUNITIES_LOG", "quiet")
        .output()
        .expect("binary runs");
    (out.status.code().unwrap_or(-1), out.stdout)
}

fn conservation_and_determinism() -> Verdict {
    let mut rng = rng_from_seed(10);
    let mut broken = Vec::new();
    let mut completed = 0;
    let mut aborted = 0;
    let mut run = 0u64;
    // Kernel-phase aborts on weak draws are legitimate and carry no ledger to inspect.
    while completed < 100 && run < 1000 {
        let k = rng.random_range(2..=3usize);
        let n = rng.random_range(200..=800usize);
        let p = rng.random_range(0.2..0.8);
        let q = p * rng.random_range(0.05..0.5);
        let t = rng.random_range(3 * k as u64 * n as u64..=40 * n as u64);
        let params = SbmParams::equal_sizes(n, k, p, q).unwrap();
        let inst = build_instance(&params, instance_seed(10, run)).unwrap();
        match run_asp(&inst, t, k, run) {
            Ok(o) => {
                completed += 1;
                if o.consumed > t || o.kernel_consumed != t / 5 || o.store.total_used() != o.consumed {
                    broken.push(format!("run {run}: consumed {} kernel {} T {t}", o.consumed, o.kernel_consumed));
                }
            }
            Err(Error::DegenerateEstimates { .. }) => aborted += 1,
            Err(e) => broken.push(format!("run {run}: {e}")),
        }
        run += 1;
    }
    if completed < 100 {
        broken.push(format!("only {completed} runs completed"));
    }
    let dir = tempfile::tempdir().unwrap();
    let d = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let model = ["--n", "300", "--K", "3", "--p", "0.4", "--q", "0.1", "--seed", "11"];
    let commands: Vec<Vec<String>> = vec![
        vec!["instance".into()],
        vec!["sample".into(), "--T".into(), "20000".into()],
        vec!["sample".into(), "--T".into(), "full".into(), "--strategy".into(), "urs2".into()],
        vec!["sp".into(), "--T".into(), "full".into(), "--labels".into(), d("labels")],
        vec!["asp".into(), "--T".into(), "60000".into(), "--audit".into(), d("audit")],
        vec!["bounds".into(), "--T".into(), "60000".into(), "--format".into(), "csv".into()],
        vec!["sweep".into(), "--T".into(), "5000,20000".into(), "--seeds".into(), "3".into(), "--jobs".into(), "2".into(), "--out".into(), d("sweep.csv")],
    ];
    let mut replays = 0;
    for cmd in &commands {
        let mut args: Vec<&str> = cmd.iter().map(String::as_str).collect();
        args.extend_from_slice(&model);
        let side_files = ["labels", "audit", "sweep.csv", "sweep.csv.aggregate.csv"];
        let snapshot = || -> Vec<Option<Vec<u8>>> { side_files.iter().map(|f| std::fs::read(d(f)).ok()).collect() };
        let (c1, o1) = run_cli(&args);
        let s1 = snapshot();
        let (c2, o2) = run_cli(&args);
        let s2 = snapshot();
        if c1 != 0 || c2 != 0 || o1 != o2 || s1 != s2 {
            broken.push(format!("`{}` did not replay (exit {c1}/{c2})", cmd[0]));
        } else {
            replays += 1;
        }
    }
    verdict(
        broken.is_empty(),
        format!("{completed} ASP runs conserve budget ({aborted} kernel aborts skipped), {replays}/{} CLI commands replay byte-identically {}", commands.len(), broken.join("; ")),
    )
}

fn estimator_quality() -> Verdict {
    let params = SbmParams::equal_sizes(2000, 2, 0.1, 0.05).unwrap();
    let mut errors = Vec::new();
    for s in 0..10 {
        let inst = build_instance(&params, instance_seed(11, s)).unwrap();
        let out = run_asp(&inst, 1_000_000, 2, s).unwrap();
        errors.push(out.kernels.estimate_error(0.1, 0.05));
    }
    let good = errors.iter().filter(|&&e| e <= 0.05).count();
    verdict(good >= 9, format!("{good}/10 seeds within 0.05 (errors {errors:.3?})"))
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("formula fidelity", formula_fidelity),
        ("KL inequalities", kl_inequalities),
        ("SP recovery, K = 2", sp_recovery_k2),
        ("SP recovery, K = 3", sp_recovery_k3),
        ("spectral oracle", spectral_oracle),
        ("metric oracle", metric_oracle),
        ("ASP dominance", asp_dominance),
        ("ASP error bound", asp_bound),
        ("phase threshold", phase_threshold),
        ("budget conservation and determinism", conservation_and_determinism),
        ("estimator quality", estimator_quality),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let v = check();
        failed += usize::from(!v.pass);
        println!("{} criterion {:>2} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, i + 1, v.detail);
    }
    println!("acceptance: {}/{} criteria pass", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
