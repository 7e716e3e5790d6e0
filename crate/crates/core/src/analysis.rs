//! Security sizing and incentive-condition checking, usable without
//! running any simulation.
//!
//! Committee compromise probabilities live deep in the binomial tail
//! (1e-4 .. 1e-6), where naive floating summation loses digits. Tails are
//! therefore computed in exact rational arithmetic up to
//! [`EXACT_CROSSOVER`] trials and in log-space floating point beyond.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

use crate::agents::GameParams;
use crate::bft::fault_threshold;
use crate::exec;

pub type Rational = BigRational;

/// Largest `n` for which tails are computed in exact rational arithmetic.
pub const EXACT_CROSSOVER: u64 = 200;

pub fn rational_from_f64(x: f64) -> Rational {
    Rational::from_float(x).expect("finite float")
}

pub fn rational_ratio(numer: i64, denom: i64) -> Rational {
    Rational::new(BigInt::from(numer), BigInt::from(denom))
}

pub(crate) fn binomial_coefficient(n: u64, k: u64) -> BigInt {
    if k > n {
        return BigInt::zero();
    }
    let k = k.min(n - k);
    let mut result = BigInt::one();
    for i in 0..k {
        result = result * BigInt::from(n - i) / BigInt::from(i + 1);
    }
    result
}

/// Exact `P(X >= k)` for `X ~ Binomial(n, p)`.
pub fn binomial_tail_exact(n: u64, p: &Rational, k: u64) -> Rational {
    assert!(!p.is_negative() && *p <= Rational::one(), "p must be a probability");
    if k == 0 {
        return Rational::one();
    }
    if k > n {
        return Rational::zero();
    }
    if p.is_zero() {
        return Rational::zero();
    }
    if p.is_one() {
        return Rational::one();
    }
    let a = p.numer().clone();
    let b = p.denom().clone();
    let b_minus_a = &b - &a;

    // Sum integer numerators over the common denominator b^n.
    let mut coeff = binomial_coefficient(n, k);
    let mut a_pow = a.pow(k as u32);
    let mut rest_pow = b_minus_a.pow((n - k) as u32);
    let mut acc = BigInt::zero();
    for i in k..=n {
        acc += &coeff * &a_pow * &rest_pow;
        if i < n {
            coeff = coeff * BigInt::from(n - i) / BigInt::from(i + 1);
            a_pow *= &a;
            rest_pow /= &b_minus_a;
        }
    }
    Rational::new(acc, b.pow(n as u32))
}

fn binomial_tail_log_space(n: u64, p: f64, k: u64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > n {
        return 0.0;
    }
    if p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return 1.0;
    }
    let mut ln_fact = vec![0.0f64; n as usize + 1];
    for i in 1..=n as usize {
        ln_fact[i] = ln_fact[i - 1] + (i as f64).ln();
    }
    let ln_p = p.ln();
    let ln_q = (1.0 - p).ln();
    let ln_pmf = |i: u64| {
        ln_fact[n as usize] - ln_fact[i as usize] - ln_fact[(n - i) as usize]
            + i as f64 * ln_p
            + (n - i) as f64 * ln_q
    };
    let max_ln = (k..=n).map(ln_pmf).fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = (k..=n).map(|i| (ln_pmf(i) - max_ln).exp()).sum();
    (max_ln + sum.ln()).exp().min(1.0)
}

/// `P(X >= k)` for `X ~ Binomial(n, p)`.
///
/// For `n <= EXACT_CROSSOVER` the f64 probability is converted to its
/// exact dyadic rational and the sum is exact; beyond that the tail is a
/// log-space floating sum.
pub fn binomial_tail(n: u64, p: f64, k: u64) -> f64 {
    assert!((0.0..=1.0).contains(&p), "p must be a probability");
    assert!(k <= n + 1, "k out of range");
    if n <= EXACT_CROSSOVER {
        binomial_tail_exact(n, &rational_from_f64(p), k).to_f64().unwrap_or(0.0)
    } else {
        binomial_tail_log_space(n, p, k)
    }
}

/// Probability that a committee of `n_csl` seats sampled with adversary
/// resource share `alpha_a` is NOT in a secure state, i.e. that the
/// adversary holds at least `fault_threshold(n_csl)` seats.
pub fn compromise_probability(n_csl: u64, alpha_a: f64) -> f64 {
    assert!(n_csl >= 4, "committee size must be at least 4");
    binomial_tail(n_csl, alpha_a, fault_threshold(n_csl as usize) as u64)
}

/// Exact-rational variant of [`compromise_probability`], for any `n`.
pub fn compromise_probability_exact(n_csl: u64, alpha_a: &Rational) -> Rational {
    assert!(n_csl >= 4, "committee size must be at least 4");
    binomial_tail_exact(n_csl, alpha_a, fault_threshold(n_csl as usize) as u64)
}

#[derive(Clone, Copy, Debug)]
pub struct SecurityQuery {
    /// Admissible compromise probability, in (0, 1).
    pub epsilon: f64,
    /// Adversary resource fraction, in [0, 1).
    pub alpha_a: f64,
    /// Scan cap for the committee size search.
    pub max_n: u64,
}

impl SecurityQuery {
    fn assert_valid(&self) {
        assert!(self.epsilon > 0.0 && self.epsilon < 1.0, "epsilon must be in (0, 1)");
        assert!((0.0..1.0).contains(&self.alpha_a), "alpha_a must be in [0, 1)");
        assert!(self.max_n >= 4, "max_n must be at least 4");
    }
}

/// Smallest committee size in `[4, max_n]` whose compromise probability
/// is at most `epsilon`, or `None` if no size below the cap qualifies.
///
/// The compromise probability is not monotone in `n` (the fault threshold
/// grows stepwise), so every size is checked.
pub fn min_committee_size(query: &SecurityQuery) -> Option<u64> {
    query.assert_valid();
    min_committee_size_exact(
        &rational_from_f64(query.epsilon),
        &rational_from_f64(query.alpha_a),
        query.max_n,
    )
}

/// Rational-input variant of [`min_committee_size`]. Comparisons are
/// exact up to `EXACT_CROSSOVER` and in log-space f64 beyond it.
pub fn min_committee_size_exact(epsilon: &Rational, alpha_a: &Rational, max_n: u64) -> Option<u64> {
    let alpha_f64 = alpha_a.to_f64().expect("alpha fits in f64");
    let epsilon_f64 = epsilon.to_f64().expect("epsilon fits in f64");
    (4..=max_n).find(|&n| {
        if n <= EXACT_CROSSOVER {
            compromise_probability_exact(n, alpha_a) <= *epsilon
        } else {
            binomial_tail_log_space(n, alpha_f64, fault_threshold(n as usize) as u64) <= epsilon_f64
        }
    })
}

/// The committee-sizing figure as data: one row per (alpha_a, epsilon).
#[derive(Clone, Debug, PartialEq)]
pub struct CommitteeSizeRow {
    pub alpha_a: f64,
    pub epsilon: f64,
    pub n_csl_min: Option<u64>,
    pub compromise_at_min: Option<f64>,
    pub scan_cap: u64,
}

/// Default adversary grid: 1% to 18% in 1% steps, as exact hundredths.
pub fn default_alpha_grid() -> Vec<Rational> {
    (1..=18).map(|i| rational_ratio(i, 100)).collect()
}

/// Default guarantee grid: 2e-4, 2e-5, 2e-6.
pub fn default_epsilon_grid() -> Vec<Rational> {
    [10_000i64, 100_000, 1_000_000].iter().map(|&d| rational_ratio(2, d)).collect()
}

/// Sweep the (alpha, epsilon) grid; rows come back sorted by
/// (alpha, epsilon). Cells are independent and computed in parallel.
pub fn committee_size_table(
    alphas: &[Rational],
    epsilons: &[Rational],
    max_n: u64,
) -> Vec<CommitteeSizeRow> {
    let mut cells = Vec::new();
    for alpha in alphas {
        for eps in epsilons {
            cells.push((alpha.clone(), eps.clone()));
        }
    }
    let mut rows = exec::map_collect(&cells, |(alpha, eps)| {
        let n_min = min_committee_size_exact(eps, alpha, max_n);
        let compromise_at_min = n_min.map(|n| {
            if n <= EXACT_CROSSOVER {
                compromise_probability_exact(n, alpha).to_f64().unwrap_or(0.0)
            } else {
                compromise_probability(n, alpha.to_f64().unwrap())
            }
        });
        CommitteeSizeRow {
            alpha_a: alpha.to_f64().unwrap(),
            epsilon: eps.to_f64().unwrap(),
            n_csl_min: n_min,
            compromise_at_min,
            scan_cap: max_n,
        }
    });
    rows.sort_by(|a, b| {
        (a.alpha_a, a.epsilon).partial_cmp(&(b.alpha_a, b.epsilon)).expect("finite keys")
    });
    rows
}

pub const COMMITTEE_SIZE_CSV_SCHEMA: &str = "# schema=committee-size.v1";

/// CSV emission; `NotFound` rows carry a `-1` sentinel and the scan cap.
pub fn committee_size_csv(rows: &[CommitteeSizeRow]) -> String {
    let mut out = String::new();
    out.push_str(COMMITTEE_SIZE_CSV_SCHEMA);
    out.push('\n');
    out.push_str("alpha_a,epsilon,n_csl_min,compromise_prob_at_min,scan_cap\n");
    for row in rows {
        match (row.n_csl_min, row.compromise_at_min) {
            (Some(n), Some(p)) => {
                out.push_str(&format!("{:.4},{:e},{},{:.6e},{}\n", row.alpha_a, row.epsilon, n, p, row.scan_cap));
            }
            _ => {
                out.push_str(&format!("{:.4},{:e},-1,,{}\n", row.alpha_a, row.epsilon, row.scan_cap));
            }
        }
    }
    out
}

/// NIC-condition report: each condition with its numeric margin.
#[derive(Clone, Debug)]
pub struct NicReport {
    /// `n_B < n_f`, margin `n_f - n_B`.
    pub fault_tolerance_ok: bool,
    pub fault_margin: i64,
    /// `phi * c_val <= kappa_R * delta_min`, slack `kappa_R*delta_min - phi*c_val`.
    pub payload_ok: bool,
    pub payload_slack: Rational,
    /// `TR >= phi * c_val + c_mine / n_TX`, slack `TR - phi*c_val - c_mine/n_TX`.
    pub reward_ok: bool,
    pub reward_slack: Rational,
    /// `c_val == 0` with `phi > 0` makes the payload condition vacuous.
    pub degenerate_validation_cost: bool,
}

impl NicReport {
    pub fn nic(&self) -> bool {
        self.fault_tolerance_ok && self.payload_ok && self.reward_ok
    }
}

/// Evaluate the three incentive-compatibility conditions exactly as
/// stated: fault tolerance (strict), maximum payload (inclusive), and
/// minimum reward (inclusive).
pub fn nic_check(params: &GameParams, n_b: u64, n_csl: u64, delta_min: &Rational) -> NicReport {
    let n_f = fault_threshold(n_csl as usize) as u64;
    let int = |v: u64| Rational::from_integer(BigInt::from(v));

    let payload_cost = int(params.phi) * int(params.c_val);
    let payload_slack = int(params.kappa_r) * delta_min.clone() - payload_cost.clone();
    let reward_slack =
        int(params.tr) - payload_cost - rational_ratio(params.c_mine as i64, params.n_tx as i64);

    NicReport {
        fault_tolerance_ok: n_b < n_f,
        fault_margin: n_f as i64 - n_b as i64,
        payload_ok: !payload_slack.is_negative(),
        payload_slack,
        reward_ok: !reward_slack.is_negative(),
        reward_slack,
        degenerate_validation_cost: params.c_val == 0 && params.phi > 0,
    }
}
