//! Hidden stochastic block model, the pairwise interaction oracle, and the
//! labelled-SBM views of the non-adaptive samplers.
//!
//! The node pair set is the set of unordered pairs of *distinct* nodes, so a
//! network of `n` nodes has `n(n-1)/2` pairs.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, SimRng};

const ALPHA_SUM_TOL: f64 = 1e-12;

/// Number of unordered distinct node pairs.
pub fn pair_count(n: usize) -> u64 {
    let n = n as u64;
    n * n.saturating_sub(1) / 2
}

#[derive(Debug, Clone, PartialEq)]
pub struct SbmParams {
    pub n: usize,
    pub k: usize,
    /// Relative community sizes, ascending, summing to one.
    pub alphas: Vec<f64>,
    /// Intra-community interaction probability.
    pub p: f64,
    /// Inter-community interaction probability.
    pub q: f64,
}

impl SbmParams {
    /// Validated constructor. `q == p` is accepted as the no-signal null
    /// model; `q > p` is rejected.
    pub fn new(n: usize, k: usize, alphas: Vec<f64>, p: f64, q: f64) -> Result<Self> {
        let params = Self { n, k, alphas, p, q };
        params.validate()?;
        Ok(params)
    }

    pub fn equal_sizes(n: usize, k: usize, p: f64, q: f64) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidParams("K must be at least 2".into()));
        }
        Self::new(n, k, vec![1.0 / k as f64; k], p, q)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParams(msg));
        if self.n == 0 {
            return bad("n must be positive".into());
        }
        if self.k < 2 {
            return bad(format!("K must be at least 2, got {}", self.k));
        }
        if self.alphas.len() != self.k {
            return bad(format!(
                "expected {} community sizes, got {}",
                self.k,
                self.alphas.len()
            ));
        }
        if let Some(a) = self.alphas.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
            return bad(format!("community size {a} outside (0, 1)"));
        }
        if self.alphas.windows(2).any(|w| w[0] > w[1]) {
            return bad("community sizes must be sorted ascending".into());
        }
        let sum: f64 = self.alphas.iter().sum();
        if (sum - 1.0).abs() > ALPHA_SUM_TOL {
            return bad(format!("community sizes sum to {sum}, expected 1"));
        }
        if !(0.0..=1.0).contains(&self.p) || !(0.0..=1.0).contains(&self.q) {
            return bad(format!("p = {} and q = {} must lie in [0, 1]", self.p, self.q));
        }
        if self.q > self.p {
            return bad(format!("q = {} exceeds p = {}", self.q, self.p));
        }
        Ok(())
    }

    pub fn pair_count(&self) -> u64 {
        pair_count(self.n)
    }

    /// Community sizes by largest-remainder rounding of `alpha_k * n`;
    /// leftover units go to the largest fractional parts, ties to the lower
    /// community index.
    pub fn community_sizes(&self) -> Result<Vec<usize>> {
        let raw: Vec<f64> = self.alphas.iter().map(|a| a * self.n as f64).collect();
        let mut sizes: Vec<usize> = raw.iter().map(|x| x.floor() as usize).collect();
        let assigned: usize = sizes.iter().sum();
        let leftover = self.n.saturating_sub(assigned);
        let mut order: Vec<usize> = (0..self.k).collect();
        order.sort_by(|&a, &b| {
            let fa = raw[a] - raw[a].floor();
            let fb = raw[b] - raw[b].floor();
            fb.total_cmp(&fa).then(a.cmp(&b))
        });
        for &c in order.iter().take(leftover) {
            sizes[c] += 1;
        }
        if let Some(c) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::InvalidParams(format!(
                "community {c} rounds to zero nodes (n = {}, alpha = {})",
                self.n, self.alphas[c]
            )));
        }
        Ok(sizes)
    }
}

/// A realised network: the hidden partition plus the interaction rates.
/// Algorithms only ever see it through [`SbmInstance::draw_outcome`].
#[derive(Debug, Clone, PartialEq)]
pub struct SbmInstance {
    pub params: SbmParams,
    pub assignment: Vec<usize>,
    pub sizes: Vec<usize>,
}

pub fn build_instance(params: &SbmParams, seed: u64) -> Result<SbmInstance> {
    params.validate()?;
    let sizes = params.community_sizes()?;
    let mut assignment: Vec<usize> = sizes
        .iter()
        .enumerate()
        .flat_map(|(c, &s)| std::iter::repeat_n(c, s))
        .collect();
    let mut rng = rng_from_seed(seed);
    assignment.shuffle(&mut rng);
    Ok(SbmInstance {
        params: params.clone(),
        assignment,
        sizes,
    })
}

impl SbmInstance {
    pub fn n(&self) -> usize {
        self.params.n
    }

    pub fn k(&self) -> usize {
        self.params.k
    }

    pub fn same_community(&self, v: usize, w: usize) -> bool {
        self.assignment[v] == self.assignment[w]
    }

    /// One Bernoulli observation of the pair `(v, w)`.
    pub fn draw_outcome(&self, v: usize, w: usize, rng: &mut SimRng) -> Result<bool> {
        let n = self.n();
        if v == w || v >= n || w >= n {
            return Err(Error::InvalidPair { v, w, n });
        }
        Ok(self.interact(v, w, rng))
    }

    /// Unchecked observation; callers guarantee `v != w`, both in range.
    pub(crate) fn interact(&self, v: usize, w: usize, rng: &mut SimRng) -> bool {
        let rate = if self.same_community(v, w) {
            self.params.p
        } else {
            self.params.q
        };
        rng.random_bool(rate)
    }

    /// Line-based fixture format: header `n K p q`, then one
    /// `node community` line per node.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{} {} {} {}\n",
            self.n(),
            self.k(),
            self.params.p,
            self.params.q
        );
        for (v, c) in self.assignment.iter().enumerate() {
            let _ = writeln!(out, "{v} {c}");
        }
        out
    }

    /// Parses [`SbmInstance::to_text`] output. Relative sizes are recovered
    /// from the community counts.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty instance file".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::Parse(format!("bad header `{header}`")));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| Error::Parse(format!("`{s}`: {e}")))
        };
        let int = |s: &str| -> Result<usize> {
            s.parse::<usize>()
                .map_err(|e| Error::Parse(format!("`{s}`: {e}")))
        };
        let n = int(fields[0])?;
        let k = int(fields[1])?;
        let p = num(fields[2])?;
        let q = num(fields[3])?;
        let mut assignment = vec![usize::MAX; n];
        for line in lines {
            let mut it = line.split_whitespace();
            let (Some(v), Some(c), None) = (it.next(), it.next(), it.next()) else {
                return Err(Error::Parse(format!("bad line `{line}`")));
            };
            let (v, c) = (int(v)?, int(c)?);
            if v >= n || c >= k {
                return Err(Error::Parse(format!("line `{line}` out of range")));
            }
            assignment[v] = c;
        }
        if assignment.contains(&usize::MAX) {
            return Err(Error::Parse("not every node has a community".into()));
        }
        let mut sizes = vec![0usize; k];
        for &c in &assignment {
            sizes[c] += 1;
        }
        let alphas = sizes.iter().map(|&s| s as f64 / n as f64).collect();
        let params = SbmParams { n, k, alphas, p, q };
        Ok(Self {
            params,
            assignment,
            sizes,
        })
    }
}

/// Label of a node pair in the labelled-SBM view of a sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SbmlLabel {
    /// Pair observed `m` times with `z` positive outcomes (URS-1).
    Counts { m: u64, z: u64 },
    /// Pair never observed (URS-2).
    Unobserved,
    /// Pair observed once with the given outcome (URS-2).
    Outcome(bool),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SbmlLabelDist {
    pub labels: Vec<SbmlLabel>,
    /// Label probabilities for an intra-community pair.
    pub p_of: Vec<f64>,
    /// Label probabilities for an inter-community pair.
    pub q_of: Vec<f64>,
}

impl SbmlLabelDist {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn prob(&self, label: SbmlLabel) -> Option<(f64, f64)> {
        self.labels
            .iter()
            .position(|&l| l == label)
            .map(|i| (self.p_of[i], self.q_of[i]))
    }
}

const URS1_TAIL_MASS: f64 = 1e-12;

/// Binomial(trials, rate) pmf over 0..=trials, evaluated in log space.
fn binomial_row(trials: u64, rate: f64) -> Vec<f64> {
    let len = trials as usize + 1;
    if rate <= 0.0 {
        let mut row = vec![0.0; len];
        row[0] = 1.0;
        return row;
    }
    if rate >= 1.0 {
        let mut row = vec![0.0; len];
        row[len - 1] = 1.0;
        return row;
    }
    let (ln_r, ln_s) = (rate.ln(), (-rate).ln_1p());
    let mut ln_choose = 0.0;
    let mut row = Vec::with_capacity(len);
    for z in 0..=trials {
        if z > 0 {
            ln_choose += ((trials - z + 1) as f64).ln() - (z as f64).ln();
        }
        row.push((ln_choose + z as f64 * ln_r + (trials - z) as f64 * ln_s).exp());
    }
    row
}

/// Label distribution of URS-1 with budget `budget`: a pair carries label
/// `(m, z)` when sampled `m` times with `z` positives. The support is cut
/// where the remaining mass of `m` drops below 1e-12, then renormalised.
pub fn sbml_dist_urs1(params: &SbmParams, budget: u64) -> Result<SbmlLabelDist> {
    if params.n < 2 {
        return Err(Error::InvalidParams("URS-1 needs at least two nodes".into()));
    }
    let beta = 1.0 / params.pair_count() as f64;
    let (ln_beta, ln_rest) = if beta >= 1.0 {
        (0.0, f64::NEG_INFINITY)
    } else {
        (beta.ln(), (-beta).ln_1p())
    };

    // ln P(m) for Binomial(budget, beta), accumulated until the tail is negligible.
    let mut ln_pm = if beta >= 1.0 {
        if budget == 0 {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    } else {
        budget as f64 * ln_rest
    };
    let mut labels = Vec::new();
    let mut p_of = Vec::new();
    let mut q_of = Vec::new();
    let mut covered = 0.0;
    let mean = budget as f64 * beta;
    for m in 0..=budget {
        if m > 0 {
            ln_pm = if beta >= 1.0 {
                if m == budget {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            } else {
                ln_pm + ((budget - m + 1) as f64).ln() - (m as f64).ln() + ln_beta - ln_rest
            };
        }
        let pm = ln_pm.exp();
        covered += pm;
        for ((z, pz), qz) in binomial_row(m, params.p)
            .into_iter()
            .enumerate()
            .zip(binomial_row(m, params.q))
        {
            labels.push(SbmlLabel::Counts { m, z: z as u64 });
            p_of.push(pm * pz);
            q_of.push(pm * qz);
        }
        if m as f64 > mean && 1.0 - covered < URS1_TAIL_MASS {
            break;
        }
    }
    let (sp, sq): (f64, f64) = (p_of.iter().sum(), q_of.iter().sum());
    p_of.iter_mut().for_each(|x| *x /= sp);
    q_of.iter_mut().for_each(|x| *x /= sq);
    Ok(SbmlLabelDist { labels, p_of, q_of })
}

/// Label distribution of under-sampled URS-2: labels `{unobserved, 0, 1}`
/// with observed fraction `beta = 2T / (n(n-1))`.
pub fn sbml_dist_urs2(params: &SbmParams, budget: u64) -> Result<SbmlLabelDist> {
    if params.n < 2 {
        return Err(Error::InvalidParams("URS-2 needs at least two nodes".into()));
    }
    let pairs = params.pair_count();
    if budget > pairs {
        return Err(Error::InvalidParams(format!(
            "URS-2 label mapping needs T <= n(n-1)/2 = {pairs}, got {budget}"
        )));
    }
    let beta = budget as f64 / pairs as f64;
    let (p, q) = (params.p, params.q);
    Ok(SbmlLabelDist {
        labels: vec![
            SbmlLabel::Unobserved,
            SbmlLabel::Outcome(false),
            SbmlLabel::Outcome(true),
        ],
        p_of: vec![1.0 - beta, (1.0 - p) * beta, p * beta],
        q_of: vec![1.0 - beta, (1.0 - q) * beta, q * beta],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(n: usize, alphas: &[f64], p: f64, q: f64) -> SbmParams {
        SbmParams::new(n, alphas.len(), alphas.to_vec(), p, q).unwrap()
    }

    #[test]
    fn sizes_exact_split() {
        assert_eq!(params(4, &[0.5, 0.5], 0.5, 0.1).community_sizes().unwrap(), vec![2, 2]);
        assert_eq!(params(5, &[0.4, 0.6], 0.5, 0.1).community_sizes().unwrap(), vec![2, 3]);
    }

    #[test]
    fn sizes_largest_remainder() {
        assert_eq!(
            params(10, &[0.2, 0.3, 0.5], 0.5, 0.1).community_sizes().unwrap(),
            vec![2, 3, 5]
        );
        // 7 * (1/3) = 2.33 each; one leftover goes to the lowest index.
        let p = SbmParams { n: 7, k: 3, alphas: vec![1.0 / 3.0; 3], p: 0.5, q: 0.1 };
        assert_eq!(p.community_sizes().unwrap(), vec![3, 2, 2]);
        // 11 * (0.25, 0.35, 0.4) = 2.75, 3.85, 4.4 -> floors 2,3,4 + 2 leftovers to 1 and 0.
        assert_eq!(
            params(11, &[0.25, 0.35, 0.4], 0.5, 0.1).community_sizes().unwrap(),
            vec![3, 4, 4]
        );
    }

    #[test]
    fn zero_sized_community_rejected() {
        let p = params(3, &[0.1, 0.9], 0.5, 0.1);
        assert!(matches!(build_instance(&p, 0), Err(Error::InvalidParams(_))));
    }

    #[test]
    fn param_validation() {
        assert!(SbmParams::new(10, 2, vec![0.5, 0.5], 0.1, 0.5).is_err());
        assert!(SbmParams::new(10, 2, vec![0.6, 0.4], 0.5, 0.1).is_err());
        assert!(SbmParams::new(10, 2, vec![0.5, 0.6], 0.5, 0.1).is_err());
        assert!(SbmParams::new(10, 1, vec![1.0], 0.5, 0.1).is_err());
        assert!(SbmParams::new(10, 2, vec![0.5, 0.5], 1.2, 0.1).is_err());
        assert!(SbmParams::new(10, 2, vec![0.5, 0.5], 0.3, 0.3).is_ok());
    }

    #[test]
    fn instance_sizes_match_assignment() {
        let p = params(103, &[0.2, 0.3, 0.5], 0.5, 0.1);
        let inst = build_instance(&p, 9).unwrap();
        let mut counts = vec![0; 3];
        for &c in &inst.assignment {
            counts[c] += 1;
        }
        assert_eq!(counts, inst.sizes);
        for (s, a) in inst.sizes.iter().zip(&p.alphas) {
            assert!((*s as f64 - a * 103.0).abs() < 1.0);
        }
        assert_eq!(inst, build_instance(&p, 9).unwrap());
        assert_ne!(inst.assignment, build_instance(&p, 10).unwrap().assignment);
    }

    #[test]
    fn degenerate_rates_are_deterministic() {
        let inst = build_instance(&params(20, &[0.5, 0.5], 1.0, 0.0), 1).unwrap();
        let mut rng = rng_from_seed(0);
        for v in 0..20 {
            for w in 0..20 {
                if v == w {
                    continue;
                }
                let x = inst.draw_outcome(v, w, &mut rng).unwrap();
                assert_eq!(x, inst.same_community(v, w));
            }
        }
    }

    #[test]
    fn self_pairs_and_out_of_range_rejected() {
        let inst = build_instance(&params(4, &[0.5, 0.5], 0.5, 0.1), 1).unwrap();
        let mut rng = rng_from_seed(0);
        assert!(matches!(inst.draw_outcome(2, 2, &mut rng), Err(Error::InvalidPair { .. })));
        assert!(inst.draw_outcome(0, 4, &mut rng).is_err());
    }

    #[test]
    fn empirical_rate_within_four_sigma() {
        let inst = build_instance(&params(10, &[0.5, 0.5], 0.3, 0.1), 4).unwrap();
        let (v, w_same, w_diff) = {
            let v = 0;
            let same = (1..10).find(|&w| inst.same_community(v, w)).unwrap();
            let diff = (1..10).find(|&w| !inst.same_community(v, w)).unwrap();
            (v, same, diff)
        };
        let trials = 100_000;
        let mut rng = rng_from_seed(11);
        for (w, rate) in [(w_same, 0.3), (w_diff, 0.1)] {
            let hits = (0..trials)
                .filter(|_| inst.draw_outcome(v, w, &mut rng).unwrap())
                .count();
            let freq = hits as f64 / trials as f64;
            let sigma = (rate * (1.0 - rate) / trials as f64).sqrt();
            assert!((freq - rate).abs() <= 4.0 * sigma, "freq {freq} vs {rate}");
        }
    }

    #[test]
    fn text_round_trip() {
        let inst = build_instance(&params(12, &[0.25, 0.75], 0.4, 0.2), 3).unwrap();
        let back = SbmInstance::from_text(&inst.to_text()).unwrap();
        assert_eq!(back.assignment, inst.assignment);
        assert_eq!(back.sizes, inst.sizes);
        assert_eq!((back.params.p, back.params.q), (0.4, 0.2));
        assert!(SbmInstance::from_text("3 2 0.5 0.1\n0 0\n1 1\n").is_err());
    }

    #[test]
    fn urs1_dist_normalised_and_zero_label() {
        let p = params(20, &[0.5, 0.5], 0.4, 0.1);
        for budget in [0u64, 1, 50, 190, 2000] {
            let d = sbml_dist_urs1(&p, budget).unwrap();
            let (sp, sq): (f64, f64) = (d.p_of.iter().sum(), d.q_of.iter().sum());
            assert!((sp - 1.0).abs() < 1e-9 && (sq - 1.0).abs() < 1e-9);
            assert!(d.p_of.iter().chain(&d.q_of).all(|x| (0.0..=1.0).contains(x)));
            let beta = 2.0 / (20.0 * 19.0);
            let expected = (1.0f64 - beta).powi(budget as i32);
            let (p00, q00) = d.prob(SbmlLabel::Counts { m: 0, z: 0 }).unwrap();
            assert!((p00 - expected).abs() <= 1e-12 * expected.max(1e-300) + 1e-15);
            assert!((p00 - q00).abs() <= 1e-12 * p00);
        }
    }

    #[test]
    fn urs1_dist_small_case_by_hand() {
        // n = 2: beta = 1, every observation hits the single pair.
        let p = params(2, &[0.5, 0.5], 0.5, 0.25);
        let d = sbml_dist_urs1(&p, 2).unwrap();
        let (p21, q21) = d.prob(SbmlLabel::Counts { m: 2, z: 1 }).unwrap();
        assert!((p21 - 0.5).abs() < 1e-12);
        assert!((q21 - 2.0 * 0.25 * 0.75).abs() < 1e-12);
        let (p10, _) = d.prob(SbmlLabel::Counts { m: 1, z: 0 }).unwrap();
        assert_eq!(p10, 0.0);
    }

    #[test]
    fn urs2_dist_values() {
        let p = params(5, &[0.4, 0.6], 0.6, 0.2);
        let d = sbml_dist_urs2(&p, 5).unwrap();
        assert_eq!(d.p_of[0], 0.5);
        assert!((d.p_of[2] - 0.3).abs() < 1e-15);
        assert!((d.q_of[1] - 0.4).abs() < 1e-15);
        assert!((d.q_of.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let full = sbml_dist_urs2(&p, 10).unwrap();
        assert_eq!(full.prob(SbmlLabel::Unobserved).unwrap(), (0.0, 0.0));
        assert!(sbml_dist_urs2(&p, 11).is_err());
    }

    #[test]
    fn equal_rates_give_equal_label_laws() {
        let p = params(30, &[0.5, 0.5], 0.2, 0.2);
        for d in [sbml_dist_urs1(&p, 600).unwrap(), sbml_dist_urs2(&p, 300).unwrap()] {
            assert_eq!(d.p_of, d.q_of);
        }
    }
}
