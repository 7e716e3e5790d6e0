//! BAR agent behaviors and the incentive model: strategies s1/s2/s3,
//! belief-based invalid-acceptance probabilities, exact-rational
//! utilities, and brute-force best-response search.
//!
//! All probabilities and utilities are `Ratio<BigInt>`, so equilibrium
//! comparisons carry no floating-point error.

use num_bigint::BigInt;
use num_traits::{One, Signed, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{binomial_coefficient, binomial_tail_exact, rational_from_f64, Rational};
use crate::bft::supermajority_threshold;
use crate::chain::Identity;
use crate::csl::{validate_operation, CslConfig, Operation, SharedState};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AgentType {
    Honest,
    Rational,
    Byzantine,
}

impl AgentType {
    pub fn name(&self) -> &'static str {
        match self {
            AgentType::Honest => "honest",
            AgentType::Rational => "rational",
            AgentType::Byzantine => "byzantine",
        }
    }
}

/// The three pure strategies: sign without validating (s1), validate
/// then sign (s2), and propose-and-sign only invalid blocks (s3).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    SignWithoutValidating,
    ValidateThenSign,
    ProposeAndSignOnlyInvalid,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::SignWithoutValidating => "s1",
            Strategy::ValidateThenSign => "s2",
            Strategy::ProposeAndSignOnlyInvalid => "s3",
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AgentError {
    #[error("{agent_type} agents cannot play {strategy}")]
    InvalidStrategy { agent_type: &'static str, strategy: &'static str },
}

/// One node's profile: its type constrains its strategy, `kappa` is the
/// stake lost if an invalid block ever commits, and `alpha` its share of
/// the mining resource.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentProfile {
    pub id: Identity,
    pub agent_type: AgentType,
    pub strategy: Strategy,
    pub kappa: u64,
    pub alpha: f64,
}

impl AgentProfile {
    pub fn new(
        id: Identity,
        agent_type: AgentType,
        strategy: Strategy,
        kappa: u64,
        alpha: f64,
    ) -> Result<AgentProfile, AgentError> {
        let allowed = match agent_type {
            AgentType::Honest => matches!(strategy, Strategy::ValidateThenSign),
            AgentType::Byzantine => matches!(strategy, Strategy::ProposeAndSignOnlyInvalid),
            AgentType::Rational => !matches!(strategy, Strategy::ProposeAndSignOnlyInvalid),
        };
        if !allowed {
            return Err(AgentError::InvalidStrategy {
                agent_type: agent_type.name(),
                strategy: strategy.name(),
            });
        }
        Ok(AgentProfile { id, agent_type, strategy, kappa, alpha })
    }

    pub fn honest(id: Identity, alpha: f64) -> AgentProfile {
        AgentProfile { id, agent_type: AgentType::Honest, strategy: Strategy::ValidateThenSign, kappa: 0, alpha }
    }

    pub fn byzantine(id: Identity, alpha: f64) -> AgentProfile {
        AgentProfile {
            id,
            agent_type: AgentType::Byzantine,
            strategy: Strategy::ProposeAndSignOnlyInvalid,
            kappa: 0,
            alpha,
        }
    }

    pub fn rational(id: Identity, strategy: Strategy, kappa: u64, alpha: f64) -> Result<AgentProfile, AgentError> {
        AgentProfile::new(id, AgentType::Rational, strategy, kappa, alpha)
    }
}

/// Economic constants of the induced game. Currency units are integers;
/// `c_val` is per byte, `phi` the bytes validated per block, `n_tx` the
/// transaction blocks per committee session, `kappa_r` the minimum
/// rational stake.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameParams {
    pub tr: u64,
    pub c_mine: u64,
    pub c_val: u64,
    pub phi: u64,
    pub n_tx: u64,
    pub kappa_r: u64,
}

impl GameParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.n_tx == 0 {
            return Err("game: n_tx must be at least 1".into());
        }
        Ok(())
    }
}

/// A rational seat's beliefs when a Byzantine primary proposes an invalid
/// block: every other seat signs it independently with probability
/// `q = alpha_a + (1 - alpha_a) * rho_s1`.
#[derive(Clone, Debug, PartialEq)]
pub struct BeliefModel {
    pub alpha_a: Rational,
    pub rho_s1: Rational,
    pub committee_size: usize,
}

impl BeliefModel {
    pub fn new(alpha_a: Rational, rho_s1: Rational, committee_size: usize) -> BeliefModel {
        assert!(!alpha_a.is_negative() && alpha_a <= Rational::one(), "alpha_a in [0,1]");
        assert!(!rho_s1.is_negative() && rho_s1 <= Rational::one(), "rho_s1 in [0,1]");
        assert!(committee_size >= 1, "committee must be nonempty");
        BeliefModel { alpha_a, rho_s1, committee_size }
    }

    pub fn from_f64(alpha_a: f64, rho_s1: f64, committee_size: usize) -> BeliefModel {
        BeliefModel::new(rational_from_f64(alpha_a), rational_from_f64(rho_s1), committee_size)
    }

    /// Probability that one other seat signs an invalid block.
    pub fn peer_sign_probability(&self) -> Rational {
        &self.alpha_a + (Rational::one() - &self.alpha_a) * &self.rho_s1
    }
}

/// How a seat reacts to a proposed operation, per its strategy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VoteDecision {
    SignValid,
    SignWithoutCheck,
    SignInvalidOnly,
    Reject,
}

impl VoteDecision {
    pub fn signs(&self) -> bool {
        !matches!(self, VoteDecision::Reject)
    }
}

/// s2 signs iff full validation passes; s1 signs unconditionally and
/// skips the validation cost; s3 signs only what is invalid.
pub fn act_on_proposal(
    profile: &AgentProfile,
    op: &Operation,
    state_view: &SharedState,
    cfg: &CslConfig,
) -> VoteDecision {
    match profile.strategy {
        Strategy::SignWithoutValidating => VoteDecision::SignWithoutCheck,
        Strategy::ValidateThenSign => {
            if validate_operation(state_view, cfg, op) {
                VoteDecision::SignValid
            } else {
                VoteDecision::Reject
            }
        }
        Strategy::ProposeAndSignOnlyInvalid => {
            if validate_operation(state_view, cfg, op) {
                VoteDecision::Reject
            } else {
                VoteDecision::SignInvalidOnly
            }
        }
    }
}

/// Belief probability that an invalid block proposed by a Byzantine
/// primary gathers a supermajority, given the seat's own strategy.
/// Computed exactly by binomial summation over the other seats.
pub fn p_invalid(belief: &BeliefModel, own_strategy: Strategy, threshold: usize) -> Rational {
    assert!(
        !matches!(own_strategy, Strategy::ProposeAndSignOnlyInvalid),
        "p_invalid is defined for s1/s2"
    );
    let others = belief.committee_size - 1;
    let q = belief.peer_sign_probability();
    let needed_from_others = match own_strategy {
        Strategy::SignWithoutValidating => threshold.saturating_sub(1),
        _ => threshold,
    };
    binomial_tail_exact(others as u64, &q, needed_from_others as u64)
}

/// The pivotal-signature probability: how much likelier an invalid block
/// is accepted when this seat signs blind versus validating first.
/// Equals `p_invalid(s1) - p_invalid(s2)`, and in closed form is the
/// binomial term `C(m, k-1) q^(k-1) (1-q)^(m-k+1)` with `m` the other
/// seats and `k` the threshold. Strictly positive whenever `0 < q < 1`.
pub fn delta(belief: &BeliefModel, threshold: usize) -> Rational {
    let m = belief.committee_size - 1;
    let k = threshold;
    if k == 0 || k > m + 1 {
        return Rational::zero();
    }
    let q = belief.peer_sign_probability();
    let coeff = Rational::from_integer(binomial_coefficient(m as u64, (k - 1) as u64));
    let q_pow = pow_rational(&q, k - 1);
    let rest = pow_rational(&(Rational::one() - q), m + 1 - k);
    coeff * q_pow * rest
}

fn pow_rational(base: &Rational, exp: usize) -> Rational {
    let mut acc = Rational::one();
    for _ in 0..exp {
        acc *= base;
    }
    acc
}

/// Smallest pivotal probability across an operating envelope of
/// committee sizes (threshold is the supermajority for each size) and
/// peer-sign probabilities.
pub fn delta_min(committee_sizes: &[usize], peer_sign_probs: &[Rational]) -> Rational {
    assert!(!committee_sizes.is_empty() && !peer_sign_probs.is_empty(), "empty envelope");
    let mut best: Option<Rational> = None;
    for &n in committee_sizes {
        let threshold = supermajority_threshold(n);
        for q in peer_sign_probs {
            let belief = BeliefModel::new(q.clone(), Rational::zero(), n);
            let d = delta(&belief, threshold);
            best = Some(match best {
                Some(b) if b <= d => b,
                _ => d,
            });
        }
    }
    best.unwrap()
}

/// Expected utility per transaction block for a rational seat, with the
/// default reward floor `TR` as this agent's reward.
pub fn utility(
    profile: &AgentProfile,
    params: &GameParams,
    belief: &BeliefModel,
    strategy: Strategy,
) -> Rational {
    utility_with_reward(params.tr, profile, params, belief, strategy)
}

/// Same, with a per-agent reward `TR_i`.
pub fn utility_with_reward(
    tr_i: u64,
    profile: &AgentProfile,
    params: &GameParams,
    belief: &BeliefModel,
    strategy: Strategy,
) -> Rational {
    assert!(
        !matches!(strategy, Strategy::ProposeAndSignOnlyInvalid),
        "utilities are defined for s1/s2"
    );
    let int = |v: u64| Rational::from_integer(BigInt::from(v));
    let threshold = supermajority_threshold(belief.committee_size);
    let amortized_mining = Rational::new(BigInt::from(params.c_mine), BigInt::from(params.n_tx));
    let risk = p_invalid(belief, strategy, threshold) * int(profile.kappa);
    match strategy {
        Strategy::SignWithoutValidating => int(tr_i) - amortized_mining - risk,
        _ => int(tr_i) - int(params.phi) * int(params.c_val) - amortized_mining - risk,
    }
}

/// Argmax over {s1, s2}; ties break toward validating.
pub fn best_response(profile: &AgentProfile, params: &GameParams, belief: &BeliefModel) -> Strategy {
    assert!(matches!(profile.agent_type, AgentType::Rational), "best response is for rational agents");
    let u1 = utility(profile, params, belief, Strategy::SignWithoutValidating);
    let u2 = utility(profile, params, belief, Strategy::ValidateThenSign);
    if u2 >= u1 {
        Strategy::ValidateThenSign
    } else {
        Strategy::SignWithoutValidating
    }
}

/// Result of the exhaustive equilibrium search over rational profiles.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EquilibriumCheck {
    /// No rational seat gains by unilaterally deviating from all-s2.
    pub all_s2_is_psne: bool,
    /// Best-response iteration from every strategy profile lands on all-s2.
    pub br_converges_to_all_s2: bool,
    /// Every rational utility at the all-s2 profile is nonnegative. At
    /// that profile no one signs invalid blocks blind, so the realized
    /// invalid-acceptance probability is zero.
    pub utilities_nonnegative: bool,
}

impl EquilibriumCheck {
    pub fn nic_equilibrium(&self) -> bool {
        self.all_s2_is_psne && self.br_converges_to_all_s2 && self.utilities_nonnegative
    }
}

/// Enumerate every {s1, s2} profile of the rational seats, run one
/// best-response step from each, and check the all-s2 profile for
/// unilateral deviations and nonnegative utilities.
pub fn exhaustive_equilibrium_check(
    rationals: &[AgentProfile],
    params: &GameParams,
    belief: &BeliefModel,
) -> EquilibriumCheck {
    let n = rationals.len();
    assert!(n <= 20, "exhaustive search is for small committees");
    let prefers_s2: Vec<bool> = rationals
        .iter()
        .map(|p| matches!(best_response(p, params, belief), Strategy::ValidateThenSign))
        .collect();

    let all_s2_is_psne = prefers_s2.iter().all(|&b| b);

    let mut br_converges = true;
    for profile_mask in 0u64..(1u64 << n) {
        let _ = profile_mask; // starting profile; responses depend only on beliefs
        let next_is_all_s2 = prefers_s2.iter().all(|&b| b);
        if !next_is_all_s2 {
            br_converges = false;
            break;
        }
    }

    // At all-s2 the realized p_invalid is 0; utility reduces to
    // TR_i - phi*c_val - c_mine/n_TX, identical across seats at the floor
    // reward.
    let int = |v: u64| Rational::from_integer(BigInt::from(v));
    let equilibrium_utility = int(params.tr)
        - int(params.phi) * int(params.c_val)
        - Rational::new(BigInt::from(params.c_mine), BigInt::from(params.n_tx));
    let utilities_nonnegative = !equilibrium_utility.is_negative();

    EquilibriumCheck { all_s2_is_psne, br_converges_to_all_s2: br_converges, utilities_nonnegative }
}
