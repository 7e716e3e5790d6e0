//! The Byzantine agreement engine: one primary broadcast, one
//! validate-sign-broadcast round, a latency window, and a supermajority
//! commit, with view change when the primary is silent or equivocates.
//!
//! This is deliberately a single-round sign-and-collect engine, not full
//! three-phase PBFT; the quorum rule carries the safety argument and the
//! quadratic message exchange is what the scalability accounting models.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chain::{sign, verify, Digest, Identity, Signature};
use crate::csl::Operation;

/// Supermajority commit threshold: `floor(2 n / 3) + 1` signatures.
pub fn supermajority_threshold(n_csl: usize) -> usize {
    2 * n_csl / 3 + 1
}

/// Minimum number of adversary-controlled seats that compromises the
/// agreement protocol: `ceil((n_CSL + 2) / 3)`. Fractional values round
/// up so the result stays a seat count the adversary must actually reach.
pub fn fault_threshold(n_csl: usize) -> usize {
    (n_csl + 4) / 3
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BftConfig {
    /// How long seats wait collecting votes, in simulated seconds.
    pub latency_window: f64,
    /// Wait before declaring the primary failed.
    pub view_change_timeout: f64,
    /// Per-message latency is drawn uniformly from this range.
    pub latency_min: f64,
    pub latency_max: f64,
}

impl Default for BftConfig {
    fn default() -> Self {
        BftConfig {
            latency_window: 0.5,
            view_change_timeout: 1.0,
            latency_min: 0.01,
            latency_max: 0.05,
        }
    }
}

/// A per-seat vote: the seat index matters because one identity may hold
/// several committee seats and votes once per seat.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vote {
    pub seat: usize,
    pub signer: Identity,
    pub signature: Signature,
}

/// Sign an operation digest as the given seat.
pub fn sign_vote(seat: usize, signer: &Identity, operation_digest: &Digest) -> Vote {
    Vote { seat, signer: *signer, signature: sign(signer, &operation_digest.0) }
}

/// A vote together with its simulated arrival time at the collection
/// point, measured from the start of the agreement attempt.
#[derive(Clone, Copy, Debug)]
pub struct TimedVote {
    pub vote: Vote,
    pub arrival: f64,
}

/// In-flight state of one agreement attempt (one view).
#[derive(Clone, Debug)]
pub struct AgreementRound {
    pub operation: Operation,
    pub primary_seat: usize,
    pub view: u32,
    pub collected: Vec<Vote>,
    pub deadline: f64,
}

impl AgreementRound {
    pub fn new(operation: Operation, primary_seat: usize, view: u32, deadline: f64) -> Self {
        AgreementRound { operation, primary_seat, view, collected: Vec::new(), deadline }
    }
}

/// Filter incoming votes into the round: membership, signature validity,
/// at-most-once per seat, and arrival within the deadline. Returns the
/// number of dropped votes (protocol violations the caller may log).
pub fn collect_votes(
    round: &mut AgreementRound,
    committee: &[Identity],
    incoming: &[TimedVote],
) -> u64 {
    let message = round.operation.content_digest();
    let mut dropped = 0;
    for timed in incoming {
        let vote = timed.vote;
        let valid = timed.arrival <= round.deadline
            && vote.seat < committee.len()
            && committee[vote.seat] == vote.signer
            && verify(&vote.signer, &message.0, &vote.signature)
            && !round.collected.iter().any(|v| v.seat == vote.seat);
        if valid {
            round.collected.push(vote);
        } else {
            dropped += 1;
        }
    }
    dropped
}

/// What the primary does this view.
#[derive(Clone, Debug)]
pub enum PrimaryAction {
    Propose(Operation),
    Silent,
    /// Conflicting proposals to different seats; correct seats that
    /// observe both trigger a view change.
    Equivocate(Operation, Operation),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViewChangeReason {
    SilentPrimary,
    Equivocation,
}

#[derive(Clone, Debug)]
pub enum Outcome {
    /// The operation gathered a supermajority; its vote certificate is in
    /// `operation.signatures`.
    Committed { operation: Operation },
    /// The proposal failed to gather a supermajority within the window.
    /// Nothing is committed.
    Reset { timely_votes: usize },
    ViewChanged { reason: ViewChangeReason },
}

#[derive(Clone, Debug)]
pub struct AgreementReport {
    pub outcome: Outcome,
    /// Point-to-point messages exchanged: broadcasts count as n-1.
    pub messages: u64,
    /// The timely, valid votes this attempt collected (also carried in
    /// the committed operation's signature set).
    pub votes: Vec<Vote>,
    pub dropped_votes: u64,
}

fn draw_latency(cfg: &BftConfig, rng: &mut ChaCha8Rng) -> f64 {
    if cfg.latency_max > cfg.latency_min {
        rng.gen_range(cfg.latency_min..cfg.latency_max)
    } else {
        cfg.latency_min
    }
}

/// Run one agreement attempt (one view) over the committee.
///
/// `signs(seat, op)` is each seat's decision to sign; the primary's own
/// signature rides on its proposal broadcast. Votes are counted if they
/// arrive within the latency window; the commit decision is taken once,
/// globally, so correct replicas stay in lock step.
pub fn run_agreement(
    action: PrimaryAction,
    committee: &[Identity],
    round: u64,
    view: u32,
    mut signs: impl FnMut(usize, &Operation) -> bool,
    cfg: &BftConfig,
    rng: &mut ChaCha8Rng,
) -> AgreementReport {
    let n = committee.len();
    assert!(n > 0, "committee must be nonempty");
    let primary_seat = ((round + view as u64) % n as u64) as usize;
    let broadcast = (n - 1) as u64;

    let operation = match action {
        PrimaryAction::Silent => {
            return AgreementReport {
                outcome: Outcome::ViewChanged { reason: ViewChangeReason::SilentPrimary },
                messages: 0,
                votes: Vec::new(),
                dropped_votes: 0,
            };
        }
        PrimaryAction::Equivocate(..) => {
            return AgreementReport {
                outcome: Outcome::ViewChanged { reason: ViewChangeReason::Equivocation },
                messages: 2 * broadcast,
                votes: Vec::new(),
                dropped_votes: 0,
            };
        }
        PrimaryAction::Propose(op) => op,
    };

    let mut messages = broadcast;
    let digest = operation.content_digest();
    let mut incoming = Vec::with_capacity(n);
    for (seat, member) in committee.iter().enumerate() {
        let proposal_arrival =
            if seat == primary_seat { 0.0 } else { draw_latency(cfg, rng) };
        if !signs(seat, &operation) {
            continue;
        }
        let vote = sign_vote(seat, member, &digest);
        let arrival = if seat == primary_seat {
            0.0
        } else {
            messages += broadcast;
            proposal_arrival + draw_latency(cfg, rng)
        };
        incoming.push(TimedVote { vote, arrival });
    }

    let mut round_state =
        AgreementRound::new(operation, primary_seat, view, cfg.latency_window);
    let dropped_votes = collect_votes(&mut round_state, committee, &incoming);
    let threshold = supermajority_threshold(n);
    let votes = round_state.collected.clone();
    let outcome = if round_state.collected.len() >= threshold {
        let mut operation = round_state.operation;
        operation.signatures = round_state.collected;
        Outcome::Committed { operation }
    } else {
        Outcome::Reset { timely_votes: round_state.collected.len() }
    };
    AgreementReport { outcome, messages, votes, dropped_votes }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::PowBlock;
    use crate::csl::Operation;
    use rand::SeedableRng;

    fn committee(n: usize) -> Vec<Identity> {
        (0..n).map(|i| Identity::from_label(&format!("seat{i}"))).collect()
    }

    fn some_op() -> Operation {
        Operation::pow(PowBlock::genesis(Identity::from_label("x")))
    }

    #[test]
    fn threshold_values() {
        assert_eq!(supermajority_threshold(51), 35);
        assert_eq!(supermajority_threshold(4), 3);
        assert_eq!(supermajority_threshold(1), 1);
        assert_eq!(fault_threshold(52), 18);
        assert_eq!(fault_threshold(51), 18);
        assert_eq!(fault_threshold(4), 2);
    }

    #[test]
    fn quorum_intersection_contains_a_correct_seat() {
        // Two quorums of size q among n seats overlap in at least 2q - n
        // seats; safety needs that overlap to exceed the tolerated
        // adversary count n_f - 1 for every committee size.
        for n in 1..=300 {
            let q = supermajority_threshold(n);
            assert!(2 * q >= n + fault_threshold(n), "n = {n}");
        }
    }

    #[test]
    fn fault_free_committee_commits() {
        let committee = committee(4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let report = run_agreement(
            PrimaryAction::Propose(some_op()),
            &committee,
            0,
            0,
            |_, _| true,
            &BftConfig::default(),
            &mut rng,
        );
        match report.outcome {
            Outcome::Committed { operation } => {
                assert!(operation.signatures.len() >= 3);
            }
            other => panic!("expected commit, got {other:?}"),
        }
        // primary broadcast + 3 vote broadcasts, each to n-1 peers
        assert_eq!(report.messages, 4 * 3);
    }

    #[test]
    fn silent_primary_view_change_then_commit() {
        let committee = committee(4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = BftConfig::default();
        // Seat 0 (the view-0 primary) is a silent Byzantine node.
        let first = run_agreement(PrimaryAction::Silent, &committee, 0, 0, |_, _| true, &cfg, &mut rng);
        assert!(matches!(
            first.outcome,
            Outcome::ViewChanged { reason: ViewChangeReason::SilentPrimary }
        ));
        // View 1: seat 1 proposes; the silent seat still refuses to vote.
        let second = run_agreement(
            PrimaryAction::Propose(some_op()),
            &committee,
            0,
            1,
            |seat, _| seat != 0,
            &cfg,
            &mut rng,
        );
        assert!(matches!(second.outcome, Outcome::Committed { .. }));
    }

    #[test]
    fn two_refusing_seats_reset_a_committee_of_four() {
        let committee = committee(4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let report = run_agreement(
            PrimaryAction::Propose(some_op()),
            &committee,
            0,
            0,
            |seat, _| seat < 2,
            &BftConfig::default(),
            &mut rng,
        );
        match report.outcome {
            Outcome::Reset { timely_votes } => assert_eq!(timely_votes, 2),
            other => panic!("expected reset, got {other:?}"),
        }
    }

    #[test]
    fn equivocation_triggers_view_change() {
        let committee = committee(4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let report = run_agreement(
            PrimaryAction::Equivocate(some_op(), some_op()),
            &committee,
            0,
            0,
            |_, _| true,
            &BftConfig::default(),
            &mut rng,
        );
        assert!(matches!(
            report.outcome,
            Outcome::ViewChanged { reason: ViewChangeReason::Equivocation }
        ));
        assert_eq!(report.messages, 2 * 3);
    }

    #[test]
    fn collect_votes_filters_violations() {
        let committee = committee(4);
        let op = some_op();
        let digest = op.content_digest();
        let mut round = AgreementRound::new(op, 0, 0, 1.0);

        let good = TimedVote { vote: sign_vote(1, &committee[1], &digest), arrival: 0.1 };
        assert_eq!(collect_votes(&mut round, &committee, &[good]), 0);
        assert_eq!(round.collected.len(), 1);

        // Second vote from the same seat in the same view is ignored.
        let duplicate = TimedVote { vote: sign_vote(1, &committee[1], &digest), arrival: 0.2 };
        assert_eq!(collect_votes(&mut round, &committee, &[duplicate]), 1);
        assert_eq!(round.collected.len(), 1);

        // Non-member identity is dropped.
        let outsider = Identity::from_label("outsider");
        let forged = TimedVote { vote: sign_vote(2, &outsider, &digest), arrival: 0.1 };
        assert_eq!(collect_votes(&mut round, &committee, &[forged]), 1);

        // Late vote is dropped.
        let late = TimedVote { vote: sign_vote(2, &committee[2], &digest), arrival: 2.0 };
        assert_eq!(collect_votes(&mut round, &committee, &[late]), 1);
        assert_eq!(round.collected.len(), 1);
    }

    #[test]
    fn message_count_is_quadratic_for_clean_commits() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in [4usize, 7, 10, 13, 16] {
            let committee = committee(n);
            let report = run_agreement(
                PrimaryAction::Propose(some_op()),
                &committee,
                0,
                0,
                |_, _| true,
                &BftConfig::default(),
                &mut rng,
            );
            assert!(matches!(report.outcome, Outcome::Committed { .. }));
            assert_eq!(report.messages as usize, n * (n - 1));
            assert!(report.messages as usize >= n * (n - 1));
            assert!(report.messages as usize <= 4 * n * n);
        }
    }
}
