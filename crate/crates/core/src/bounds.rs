//! Closed-form error bounds and necessary-condition scores.
//!
//! Natural logarithms throughout. Degenerate logarithms produce extended
//! reals rather than errors; probability-scale outputs are clamped to
//! `[0, 1]`.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::SbmlLabelDist;

/// `KL(a, b) = a ln(a/b) + (1-a) ln((1-a)/(1-b))` with `0 ln 0 = 0`;
/// `+inf` when `a > 0, b = 0` or `a < 1, b = 1`.
pub fn kl_bernoulli(a: f64, b: f64) -> f64 {
    let term = |x: f64, y: f64| {
        if x == 0.0 {
            0.0
        } else if y == 0.0 {
            f64::INFINITY
        } else {
            x * (x / y).ln()
        }
    };
    (term(a, b) + term(1.0 - a, 1.0 - b)).max(0.0)
}

/// `sum_l n (p(l) - q(l))^2 / (p(l) + q(l))` over labels of positive mass.
pub fn tau(dist: &SbmlLabelDist, n: usize) -> f64 {
    dist.p_of
        .iter()
        .zip(&dist.q_of)
        .filter(|(p, q)| *p + *q > 0.0)
        .map(|(p, q)| n as f64 * (p - q).powi(2) / (p + q))
        .sum()
}

fn clamp01(x: f64) -> f64 {
    if x.is_nan() {
        x
    } else {
        x.clamp(0.0, 1.0)
    }
}

/// `x * y^2` with `0 * inf = 0`, the limit of `q (ln q)^2` as `q -> 0`.
fn weighted_square(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y * y
    }
}

/// Exponent of the non-adaptive lower bound under uniform random sampling.
pub fn kappa1(n: usize, t: u64, p: f64, q: f64, alpha1: f64, alpha2: f64) -> f64 {
    let scale = t as f64 * (alpha1 + alpha2) / n as f64;
    let min_kl = kl_bernoulli(q, p).min(kl_bernoulli(p, q));
    let log_odds = (p * (1.0 - q) / (q * (1.0 - p))).ln();
    let log_min_ratio = (p / q).min((1.0 - q) / (1.0 - p)).ln();
    let inner = weighted_square(q.min(1.0 - p), log_odds) + log_min_ratio * log_min_ratio;
    let first = if min_kl == 0.0 { 0.0 } else { 2.0 * scale * min_kl };
    first + 2.0 * (4.0 * scale * inner).sqrt()
}

/// `(alpha_1 / 4) exp(-kappa_1)`.
pub fn nonadaptive_lower_bound(n: usize, t: u64, p: f64, q: f64, alphas: &[f64]) -> f64 {
    let k1 = kappa1(n, t, p, q, alphas[0], alphas[1]);
    clamp01(alphas[0] / 4.0 * (-k1).exp())
}

/// `exp(-8 T max{KL(q,p), KL(p,q)} / (min{1/2, 1 - alpha_K} n))`.
pub fn adaptive_lower_bound(n: usize, t: u64, p: f64, q: f64, alpha_k: f64) -> Result<f64> {
    if alpha_k >= 1.0 {
        return Err(Error::InvalidParams(format!(
            "largest cluster fraction {alpha_k} leaves no second cluster"
        )));
    }
    if t == 0 {
        return Ok(1.0);
    }
    let max_kl = kl_bernoulli(q, p).max(kl_bernoulli(p, q));
    let denom = 0.5f64.min(1.0 - alpha_k) * n as f64;
    Ok(clamp01((-8.0 * t as f64 * max_kl / denom).exp()))
}

/// `(p - q)^2 alpha_1 T / (20 p n)`.
pub fn sp_exponent(n: usize, t: u64, p: f64, q: f64, alpha1: f64) -> f64 {
    (p - q).powi(2) * alpha1 * t as f64 / (20.0 * p * n as f64)
}

/// `exp(-(p - q)^2 alpha_1 T / (20 p n))`.
pub fn sp_upper_bound(n: usize, t: u64, p: f64, q: f64, alpha1: f64) -> f64 {
    clamp01((-sp_exponent(n, t, p, q, alpha1)).exp())
}

/// Finite-size reading of the hypotheses behind [`sp_upper_bound`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpHypotheses {
    /// `(p - q)^2 alpha_1 T / (p n)`, required to be large.
    pub growth_score: f64,
    /// `(p - q)^2 alpha_1 T / (20 p n) - ln(p T / n)`.
    pub side_margin: f64,
    /// `side_margin >= -slack`.
    pub side_condition_holds: bool,
    /// `growth_score >= large`.
    pub growth_holds: bool,
}

pub fn sp_hypotheses(n: usize, t: u64, p: f64, q: f64, alpha1: f64, large: f64, slack: f64) -> SpHypotheses {
    let exponent = sp_exponent(n, t, p, q, alpha1);
    let growth_score = 20.0 * exponent;
    let side_margin = exponent - (p * t as f64 / n as f64).ln();
    SpHypotheses {
        growth_score,
        side_margin,
        side_condition_holds: side_margin >= -slack,
        growth_holds: growth_score >= large,
    }
}

/// `exp(-T (KL(q,p) + KL(p,q)) / (3 K n))`.
pub fn asp_upper_bound(n: usize, t: u64, p: f64, q: f64, k: usize) -> f64 {
    if t == 0 {
        return 1.0;
    }
    let s = kl_bernoulli(q, p) + kl_bernoulli(p, q);
    clamp01((-(t as f64) * s / (3.0 * k as f64 * n as f64)).exp())
}

/// `-ln E[eps] / max{ln(p/q), ln((1-q)/(1-p))}`, which must grow for the
/// adaptive lower bound to apply.
pub fn adaptive_side_score(mean_eps: f64, p: f64, q: f64) -> f64 {
    -mean_eps.ln() / (p / q).ln().max(((1.0 - q) / (1.0 - p)).ln())
}

/// `(p - q)^2 / (p + q) * T / n`.
pub fn signal_score(n: usize, t: u64, p: f64, q: f64) -> f64 {
    (p - q).powi(2) / (p + q) * t as f64 / n as f64
}

/// Smallest integer `T` with `(p - q)^2 / (p + q) * T / n >= 1`; `None`
/// when `p = q`.
pub fn phase_threshold_t(n: usize, p: f64, q: f64) -> Option<u64> {
    if p == q || p + q == 0.0 {
        return None;
    }
    let guess = (n as f64 * (p + q) / (p - q).powi(2)).ceil();
    if !guess.is_finite() || guess > u64::MAX as f64 / 2.0 {
        return None;
    }
    let mut t = guess as u64;
    while t > 0 && signal_score(n, t - 1, p, q) >= 1.0 {
        t -= 1;
    }
    while signal_score(n, t, p, q) < 1.0 {
        t += 1;
    }
    Some(t)
}

/// Which necessary condition a score belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    NonAdaptive,
    Adaptive,
    Both,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionScore {
    pub name: &'static str,
    pub regime: Regime,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub n: usize,
    pub t: u64,
    pub p: f64,
    pub q: f64,
    pub alphas: Vec<f64>,
    pub kl_pq: f64,
    pub kl_qp: f64,
    pub kappa1: f64,
    pub nonadaptive_lb: f64,
    pub adaptive_lb: f64,
    pub sp_ub: f64,
    pub asp_ub: f64,
    pub phase_threshold_t: Option<u64>,
    pub condition_scores: Vec<ConditionScore>,
}

/// Every bound and necessary-condition score at one parameter point.
pub fn condition_report(n: usize, t: u64, p: f64, q: f64, alphas: &[f64]) -> Result<BoundReport> {
    if alphas.len() < 2 {
        return Err(Error::InvalidParams("bounds need at least two cluster fractions".into()));
    }
    let k = alphas.len();
    let kl_pq = kl_bernoulli(p, q);
    let kl_qp = kl_bernoulli(q, p);
    let per_node = t as f64 / n as f64;
    let scores = vec![
        // T/n, (T/n) min KL, (T/n) max KL, min{p, 1-q} T/n, (p-q)^2/(p+q) T/n.
        ConditionScore { name: "t_over_n", regime: Regime::NonAdaptive, value: per_node },
        ConditionScore { name: "min_kl_score", regime: Regime::NonAdaptive, value: per_node * kl_pq.min(kl_qp) },
        ConditionScore { name: "max_kl_score", regime: Regime::Adaptive, value: per_node * kl_pq.max(kl_qp) },
        ConditionScore { name: "rate_score", regime: Regime::Adaptive, value: p.min(1.0 - q) * per_node },
        ConditionScore { name: "signal_score", regime: Regime::Both, value: signal_score(n, t, p, q) },
    ];
    Ok(BoundReport {
        n,
        t,
        p,
        q,
        alphas: alphas.to_vec(),
        kl_pq,
        kl_qp,
        kappa1: kappa1(n, t, p, q, alphas[0], alphas[1]),
        nonadaptive_lb: nonadaptive_lower_bound(n, t, p, q, alphas),
        adaptive_lb: adaptive_lower_bound(n, t, p, q, alphas[k - 1])?,
        sp_ub: sp_upper_bound(n, t, p, q, alphas[0]),
        asp_ub: asp_upper_bound(n, t, p, q, k),
        phase_threshold_t: phase_threshold_t(n, p, q),
        condition_scores: scores,
    })
}

impl BoundReport {
    fn fields(&self) -> Vec<(String, String)> {
        let alphas = self.alphas.iter().map(f64::to_string).collect::<Vec<_>>().join(";");
        let mut out = vec![
            ("n".to_string(), self.n.to_string()),
            ("T".to_string(), self.t.to_string()),
            ("p".to_string(), self.p.to_string()),
            ("q".to_string(), self.q.to_string()),
            ("alphas".to_string(), alphas),
            ("kl_pq".to_string(), self.kl_pq.to_string()),
            ("kl_qp".to_string(), self.kl_qp.to_string()),
            ("kappa1".to_string(), self.kappa1.to_string()),
            ("nonadaptive_lb".to_string(), self.nonadaptive_lb.to_string()),
            ("adaptive_lb".to_string(), self.adaptive_lb.to_string()),
            ("sp_upper_bound".to_string(), self.sp_ub.to_string()),
            ("asp_upper_bound".to_string(), self.asp_ub.to_string()),
            (
                "phase_threshold_T".to_string(),
                self.phase_threshold_t.map_or("inf".to_string(), |t| t.to_string()),
            ),
        ];
        for s in &self.condition_scores {
            let tag = match s.regime {
                Regime::NonAdaptive => "nonadaptive",
                Regime::Adaptive => "adaptive",
                Regime::Both => "both",
            };
            out.push((format!("{}[{tag}]", s.name), s.value.to_string()));
        }
        out
    }

    /// Aligned `key  value` lines.
    pub fn to_text(&self) -> String {
        let fields = self.fields();
        let width = fields.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut s = String::new();
        for (k, v) in fields {
            writeln!(s, "{k:<width$}  {v}").unwrap();
        }
        s
    }

    /// Header line and one data row.
    pub fn to_csv(&self) -> String {
        let fields = self.fields();
        let quote = |x: &str| {
            if x.contains([',', '"']) {
                format!("\"{}\"", x.replace('"', "\"\""))
            } else {
                x.to_string()
            }
        };
        let header: Vec<String> = fields.iter().map(|(k, _)| quote(k)).collect();
        let row: Vec<String> = fields.iter().map(|(_, v)| quote(v)).collect();
        format!("{}\n{}\n", header.join(","), row.join(","))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{sbml_dist_urs1, sbml_dist_urs2, SbmParams, SbmlLabel};
    use proptest::prelude::*;

    #[test]
    fn kl_values() {
        assert_eq!(kl_bernoulli(0.5, 0.5), 0.0);
        assert!((kl_bernoulli(0.2, 0.1) - 0.044_403).abs() < 1e-6);
        assert!(kl_bernoulli(0.6, 0.3) >= kl_bernoulli(0.3, 0.6));
        assert_eq!(kl_bernoulli(0.3, 0.0), f64::INFINITY);
        assert_eq!(kl_bernoulli(0.3, 1.0), f64::INFINITY);
        assert_eq!(kl_bernoulli(0.0, 0.0), 0.0);
        assert!((kl_bernoulli(1.0, 0.5) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn tau_cases() {
        let same = sbml_dist_urs2(&SbmParams::equal_sizes(100, 2, 0.3, 0.3).unwrap(), 2000).unwrap();
        assert_eq!(tau(&same, 100), 0.0);

        let (p, q) = (0.2, 0.05);
        let d = sbml_dist_urs2(&SbmParams::equal_sizes(100, 2, p, q).unwrap(), 2000).unwrap();
        let beta = 2.0 * 2000.0 / (100.0 * 99.0);
        let closed = beta * 100.0 * ((p - q).powi(2) / (p + q) + (p - q).powi(2) / (2.0 - p - q));
        assert!((tau(&d, 100) - closed).abs() < 1e-12 * closed);

        let single = SbmlLabelDist {
            labels: vec![SbmlLabel::Outcome(true), SbmlLabel::Outcome(false)],
            p_of: vec![1.0, 0.0],
            q_of: vec![0.0, 1.0],
        };
        assert!((tau(&single, 7) - 14.0).abs() < 1e-12);
        let urs1 = sbml_dist_urs1(&SbmParams::equal_sizes(30, 2, 0.4, 0.4).unwrap(), 500).unwrap();
        assert!(tau(&urs1, 30) < 1e-12);
    }

    #[test]
    fn kappa1_limits() {
        let mut last = f64::INFINITY;
        for q in [0.1, 0.15, 0.19, 0.199, 0.1999] {
            let k = kappa1(1000, 100_000, 0.2, q, 0.5, 0.5);
            assert!(k < last && k > 0.0);
            last = k;
        }
        assert!(kappa1(1000, 100_000, 0.2, 0.2, 0.5, 0.5).abs() < 1e-12);
        assert!(nonadaptive_lower_bound(1000, 100_000, 0.2, 0.1, &[0.5, 0.5]) <= 0.125);
        assert!((nonadaptive_lower_bound(1000, 0, 0.2, 0.1, &[0.5, 0.5]) - 0.125).abs() < 1e-15);
        assert_eq!(nonadaptive_lower_bound(1000, 10_000_000_000, 0.9, 0.01, &[0.5, 0.5]), 0.0);
        assert!(kappa1(1000, 1000, 0.5, 0.0, 0.5, 0.5).is_finite());
    }

    #[test]
    fn adaptive_lower_bound_cases() {
        assert_eq!(adaptive_lower_bound(1000, 0, 0.3, 0.1, 0.5).unwrap(), 1.0);
        assert_eq!(adaptive_lower_bound(1000, 10, 0.3, 0.0, 0.5).unwrap(), 0.0);
        assert!(adaptive_lower_bound(1000, 10, 0.3, 0.1, 1.0).is_err());
    }

    #[test]
    fn sp_bound_cases() {
        let b = sp_upper_bound(500, 124_750, 0.5, 0.1, 0.5);
        assert!((b - (-1.996f64).exp()).abs() < 1e-12);
        assert!((b - 0.1359).abs() < 5e-5);
        assert_eq!(sp_upper_bound(500, 124_750, 0.3, 0.3, 0.5), 1.0);
        let doubled = sp_upper_bound(500, 2 * 124_750, 0.5, 0.1, 0.5);
        assert!((doubled - b * b).abs() < 1e-15);
        let h = sp_hypotheses(500, 124_750, 0.5, 0.1, 0.5, 10.0, 0.0);
        assert!((h.growth_score - 39.92).abs() < 1e-9);
        assert!(h.growth_holds);
        assert!((h.side_margin - (1.996 - 124.75f64.ln())).abs() < 1e-9);
        assert!(!h.side_condition_holds);
        assert!(sp_hypotheses(500, 124_750, 0.5, 0.1, 0.5, 10.0, 3.0).side_condition_holds);
    }

    #[test]
    fn asp_bound_cases() {
        assert_eq!(asp_upper_bound(2000, 0, 0.01, 0.005, 2), 1.0);
        let b2 = asp_upper_bound(2000, 1_000_000, 0.01, 0.005, 2);
        let b4 = asp_upper_bound(2000, 1_000_000, 0.01, 0.005, 4);
        assert!((b4 - b2.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn report_fixture() {
        let r = condition_report(4000, 2_326_000, 1e-3, 5e-5, &[0.5, 0.5]).unwrap();
        let signal = r.condition_scores.iter().find(|s| s.name == "signal_score").unwrap();
        assert!((signal.value - 0.4998).abs() < 1e-4);
        let same = condition_report(4000, 2_326_000, 1e-3, 1e-3, &[0.5, 0.5]).unwrap();
        assert_eq!(same.condition_scores[1].value, 0.0);
        let twice = condition_report(4000, 4_652_000, 1e-3, 5e-5, &[0.5, 0.5]).unwrap();
        for (a, b) in r.condition_scores.iter().zip(&twice.condition_scores) {
            assert!((b.value - 2.0 * a.value).abs() <= 1e-12 * b.value);
        }
        let text = r.to_text();
        assert!(text.lines().any(|l| l.starts_with("sp_upper_bound")));
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 2);
        assert_eq!(
            csv.lines().next().unwrap().split(',').count(),
            csv.lines().nth(1).unwrap().split(',').count()
        );
    }

    #[test]
    fn phase_threshold_cases() {
        assert_eq!(phase_threshold_t(4000, 1e-3, 5e-5), Some(4_653_740));
        assert_eq!(phase_threshold_t(8000, 1e-3, 5e-5), Some(9_307_480));
        assert_eq!(phase_threshold_t(1, 1.0, 0.0), Some(1));
        assert_eq!(phase_threshold_t(100, 0.2, 0.2), None);
        let t = phase_threshold_t(4000, 1e-3, 5e-5).unwrap();
        assert!(signal_score(4000, t, 1e-3, 5e-5) >= 1.0);
        assert!(signal_score(4000, t - 1, 1e-3, 5e-5) < 1.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]

        #[test]
        fn kl_lower_bounds(p in 1e-6f64..1.0 - 1e-6, q in 1e-6f64..1.0 - 1e-6) {
            let (pq, qp) = (kl_bernoulli(p, q), kl_bernoulli(q, p));
            let floor = (p - q).powi(2) / (2.0 * (p + q));
            prop_assert!(pq.min(qp) >= floor * (1.0 - 1e-12) - 1e-300);
            let ordered = p * (1.0 - p) >= q * (1.0 - q);
            // Exact ties in p(1-p) make both sides equal up to rounding.
            if (p * (1.0 - p) - q * (1.0 - q)).abs() > 1e-12 && (pq - qp).abs() > 1e-14 * pq.max(qp) {
                prop_assert_eq!(pq >= qp, ordered);
            }
        }
    }

    proptest! {
        #[test]
        fn bounds_monotone_in_t(
            n in 10usize..10_000,
            t in 0u64..10_000_000,
            dt in 1u64..1_000_000,
            q in 0.001f64..0.5,
            gap in 0.01f64..0.49,
        ) {
            let p = q + gap;
            let a = [0.4, 0.6];
            prop_assert!(nonadaptive_lower_bound(n, t + dt, p, q, &a) <= nonadaptive_lower_bound(n, t, p, q, &a));
            prop_assert!(adaptive_lower_bound(n, t + dt, p, q, 0.6).unwrap() <= adaptive_lower_bound(n, t, p, q, 0.6).unwrap());
            prop_assert!(sp_upper_bound(n, t + dt, p, q, 0.4) <= sp_upper_bound(n, t, p, q, 0.4));
            prop_assert!(asp_upper_bound(n, t + dt, p, q, 2) <= asp_upper_bound(n, t, p, q, 2));
        }
    }
}
