//! Consensus layer: the replicated shared state and its three
//! pre-determined operations (powBlock, txBlock, comBlock), epoch and
//! committee bookkeeping, and primary selection.
//!
//! The shared state is a deterministic state machine: two replicas that
//! apply the same operation log end up bit-identical. Commit functions
//! re-validate their operation and refuse to mutate state on failure, so
//! a committed-but-invalid operation surfaces as an error the simulator
//! records as a protocol violation.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::bft::{supermajority_threshold, Vote};
use crate::chain::{
    digest, put_field, put_u64, verify_pow, verify_transaction_static, CanonicalBytes, ComBlock,
    Digest, Identity, PowBlock, TxBlock,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Pow,
    Tx,
    Com,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Pow => "pow",
            OpKind::Tx => "tx",
            OpKind::Com => "com",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum OpPayload {
    Pow(PowBlock),
    Tx(TxBlock),
    Com(ComBlock),
}

/// A shared-state operation: a payload plus the signature set gathered by
/// the agreement engine. Signatures are per committee seat, so one
/// identity holding several seats votes once per seat.
#[derive(Clone, Debug, PartialEq)]
pub struct Operation {
    pub payload: OpPayload,
    pub signatures: Vec<Vote>,
}

impl Operation {
    pub fn pow(block: PowBlock) -> Operation {
        Operation { payload: OpPayload::Pow(block), signatures: Vec::new() }
    }

    pub fn tx(block: TxBlock) -> Operation {
        Operation { payload: OpPayload::Tx(block), signatures: Vec::new() }
    }

    pub fn com(block: ComBlock) -> Operation {
        Operation { payload: OpPayload::Com(block), signatures: Vec::new() }
    }

    pub fn kind(&self) -> OpKind {
        match self.payload {
            OpPayload::Pow(_) => OpKind::Pow,
            OpPayload::Tx(_) => OpKind::Tx,
            OpPayload::Com(_) => OpKind::Com,
        }
    }

    /// Digest over kind tag and payload; votes sign this.
    pub fn content_digest(&self) -> Digest {
        let mut buf = Vec::new();
        buf.push(match self.kind() {
            OpKind::Pow => 1u8,
            OpKind::Tx => 2,
            OpKind::Com => 3,
        });
        match &self.payload {
            OpPayload::Pow(b) => b.encode_into(&mut buf),
            OpPayload::Tx(t) => t.encode_into(&mut buf),
            OpPayload::Com(c) => c.encode_into(&mut buf),
        }
        digest(&buf)
    }

    /// Serialized payload size, used for validation-cost accounting.
    pub fn payload_bytes(&self) -> u64 {
        match &self.payload {
            OpPayload::Pow(b) => b.canonical_bytes().len() as u64,
            OpPayload::Tx(t) => t.canonical_bytes().len() as u64,
            OpPayload::Com(c) => c.canonical_bytes().len() as u64,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CslConfig {
    pub n_csl: usize,
    pub block_reward: u64,
    pub max_block_bytes: u64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CslError {
    #[error("signature threshold unmet: {got} valid votes, need {need}")]
    ThresholdUnmet { got: usize, need: usize },
    #[error("{kind} operation failed validation at commit time")]
    InvalidAtCommit { kind: &'static str },
    #[error("comBlock committed before the epoch boundary")]
    BeforeEpochBoundary,
    #[error("comBlock epoch {got} does not follow current epoch {current}")]
    WrongEpoch { got: u64, current: u64 },
    #[error("balance underflow applying transaction")]
    BalanceUnderflow,
}

/// The six-part replicated state: PowChain, T, ComChain, TxChain, O, B.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedState {
    pub pow_chain: Vec<PowBlock>,
    /// Per committed transaction block, the identities that signed it.
    pub tx_signers: Vec<Vec<Identity>>,
    pub com_chain: Vec<ComBlock>,
    pub tx_chain: Vec<TxBlock>,
    /// Append-only operation log.
    pub op_log: Vec<Operation>,
    pub balances: BTreeMap<Identity, u64>,
    bootstrap_pow_len: usize,
}

impl SharedState {
    /// Bootstrap: a configured genesis committee plus a seed PowChain
    /// carrying exactly those identities, so the committee provenance
    /// invariant holds from epoch 0.
    pub fn genesis(committee: &[Identity], funded: &[(Identity, u64)]) -> SharedState {
        assert!(!committee.is_empty(), "genesis committee must be nonempty");
        let mut pow_chain = vec![PowBlock::genesis(committee[0])];
        for &member in &committee[1..] {
            let parent = *pow_chain.last().unwrap();
            pow_chain.push(PowBlock {
                parent: parent.digest(),
                difficulty: 0,
                nonce: 0,
                validator: member,
                height: parent.height + 1,
            });
        }
        let mut balances = BTreeMap::new();
        for &(id, amount) in funded {
            *balances.entry(id).or_insert(0) += amount;
        }
        let bootstrap_pow_len = pow_chain.len();
        SharedState {
            pow_chain,
            tx_signers: Vec::new(),
            com_chain: vec![ComBlock { members: committee.to_vec(), epoch: 0 }],
            tx_chain: Vec::new(),
            op_log: Vec::new(),
            balances,
            bootstrap_pow_len,
        }
    }

    pub fn committee(&self) -> &[Identity] {
        &self.com_chain.last().expect("genesis committee").members
    }

    pub fn epoch(&self) -> u64 {
        self.com_chain.len() as u64 - 1
    }

    /// Rounds completed since bootstrap; a round completes at each
    /// committed powBlock operation.
    pub fn rounds_committed(&self) -> u64 {
        (self.pow_chain.len() - self.bootstrap_pow_len) as u64
    }

    /// A comBlock is due once a full epoch of rounds has committed beyond
    /// the committees already on the ComChain.
    pub fn com_block_due(&self) -> bool {
        let n = self.committee().len() as u64;
        self.rounds_committed() / n > self.epoch()
    }

    /// The identities carried by the latest `n` PowChain blocks, in chain
    /// order (oldest of the window first).
    pub fn latest_pow_identities(&self, n: usize) -> Vec<Identity> {
        let len = self.pow_chain.len();
        self.pow_chain[len.saturating_sub(n)..].iter().map(|b| b.validator).collect()
    }

    pub fn total_supply(&self) -> u64 {
        self.balances.values().sum()
    }

    /// Digest of the whole state, for cross-replica comparison.
    pub fn state_digest(&self) -> Digest {
        let mut buf = Vec::new();
        for b in &self.pow_chain {
            put_field(&mut buf, &b.digest().0);
        }
        for c in &self.com_chain {
            put_field(&mut buf, &c.digest().0);
        }
        for t in &self.tx_chain {
            put_field(&mut buf, &t.digest().0);
        }
        for signers in &self.tx_signers {
            put_u64(&mut buf, signers.len() as u64);
            for s in signers {
                put_field(&mut buf, &s.0);
            }
        }
        put_u64(&mut buf, self.op_log.len() as u64);
        for (id, amount) in &self.balances {
            put_field(&mut buf, &id.0);
            put_u64(&mut buf, *amount);
        }
        digest(&buf)
    }

    /// Line-oriented snapshot for cross-run diffing: one digest line per
    /// chain, then one balance per line in identity order.
    pub fn snapshot_text(&self) -> String {
        let mut out = String::new();
        let chain_digest = |blocks: &[Digest]| {
            let mut buf = Vec::new();
            for d in blocks {
                put_field(&mut buf, &d.0);
            }
            digest(&buf)
        };
        let pow: Vec<Digest> = self.pow_chain.iter().map(|b| b.digest()).collect();
        let com: Vec<Digest> = self.com_chain.iter().map(|c| c.digest()).collect();
        let tx: Vec<Digest> = self.tx_chain.iter().map(|t| t.digest()).collect();
        out.push_str(&format!("pow-chain {}\n", chain_digest(&pow)));
        out.push_str(&format!("com-chain {}\n", chain_digest(&com)));
        out.push_str(&format!("tx-chain {}\n", chain_digest(&tx)));
        out.push_str(&format!("op-log {}\n", self.op_log.len()));
        for (id, amount) in &self.balances {
            out.push_str(&format!("balance {id} {amount}\n"));
        }
        out
    }
}

/// True iff `b` is a valid child of the current PowChain tip.
pub fn validate_pow_block(state: &SharedState, b: &PowBlock) -> bool {
    let tip = state.pow_chain.last().expect("pow chain nonempty");
    b.parent == tip.digest() && verify_pow(b, tip)
}

/// True iff `c` lists exactly the identities of the latest `n_CSL`
/// PowChain blocks, in chain order. Order matters: primary selection is
/// positional.
pub fn validate_com_block(state: &SharedState, cfg: &CslConfig, c: &ComBlock) -> bool {
    c.members.len() == cfg.n_csl && c.members == state.latest_pow_identities(cfg.n_csl)
}

/// True iff every transaction is statically valid and, applied in order,
/// no balance goes negative.
pub fn validate_tx_block(state: &SharedState, cfg: &CslConfig, t: &TxBlock) -> bool {
    if t.txs.is_empty() || t.byte_size() > cfg.max_block_bytes {
        return false;
    }
    let mut working: BTreeMap<Identity, u64> = BTreeMap::new();
    let balance = |working: &BTreeMap<Identity, u64>, state: &SharedState, id: &Identity| {
        working.get(id).copied().unwrap_or_else(|| state.balances.get(id).copied().unwrap_or(0))
    };
    for tx in &t.txs {
        if !verify_transaction_static(tx) {
            return false;
        }
        let debit = match tx.coins.checked_add(tx.fee) {
            Some(d) => d,
            None => return false,
        };
        let from_balance = balance(&working, state, &tx.from);
        if from_balance < debit {
            return false;
        }
        working.insert(tx.from, from_balance - debit);
        let to_balance = balance(&working, state, &tx.to);
        working.insert(tx.to, to_balance + tx.coins);
    }
    true
}

pub fn validate_operation(state: &SharedState, cfg: &CslConfig, op: &Operation) -> bool {
    match &op.payload {
        OpPayload::Pow(b) => validate_pow_block(state, b),
        OpPayload::Tx(t) => validate_tx_block(state, cfg, t),
        OpPayload::Com(c) => validate_com_block(state, cfg, c),
    }
}

/// Check the operation's vote certificate: votes must come from current
/// committee seats, verify against the operation digest, and appear at
/// most once per seat. Returns the number of valid votes.
pub fn verify_certificate(state: &SharedState, cfg: &CslConfig, op: &Operation) -> Result<usize, CslError> {
    let committee = state.committee();
    let message = op.content_digest();
    let mut seen = vec![false; committee.len()];
    let mut valid = 0usize;
    for vote in &op.signatures {
        if vote.seat >= committee.len() || seen[vote.seat] {
            continue;
        }
        if committee[vote.seat] != vote.signer {
            continue;
        }
        if !crate::chain::verify(&vote.signer, &message.0, &vote.signature) {
            continue;
        }
        seen[vote.seat] = true;
        valid += 1;
    }
    let need = supermajority_threshold(cfg.n_csl);
    if valid < need {
        return Err(CslError::ThresholdUnmet { got: valid, need });
    }
    Ok(valid)
}

/// Commit a powBlock operation: append to the PowChain and the log. The
/// round counter advances implicitly; the caller emits the commitBlock
/// event back to the access layer.
pub fn commit_pow_block(state: &mut SharedState, cfg: &CslConfig, op: &Operation) -> Result<(), CslError> {
    verify_certificate(state, cfg, op)?;
    let OpPayload::Pow(block) = &op.payload else {
        return Err(CslError::InvalidAtCommit { kind: "pow" });
    };
    if !validate_pow_block(state, block) {
        return Err(CslError::InvalidAtCommit { kind: "pow" });
    }
    state.op_log.push(op.clone());
    state.pow_chain.push(*block);
    Ok(())
}

/// Where each reward unit went when a txBlock committed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TxCommitSummary {
    pub payouts: Vec<(Identity, u64)>,
    pub total_fees: u64,
}

/// Commit a txBlock operation: apply every transaction (debiting coins
/// plus fee from the sender), record the signer list, and split the fees
/// plus block reward equally among the signing seats, remainder to the
/// proposer.
pub fn commit_tx_block(
    state: &mut SharedState,
    cfg: &CslConfig,
    op: &Operation,
) -> Result<TxCommitSummary, CslError> {
    verify_certificate(state, cfg, op)?;
    let OpPayload::Tx(block) = &op.payload else {
        return Err(CslError::InvalidAtCommit { kind: "tx" });
    };
    if !validate_tx_block(state, cfg, block) {
        return Err(CslError::InvalidAtCommit { kind: "tx" });
    }

    state.op_log.push(op.clone());
    for tx in &block.txs {
        let debit = tx.coins + tx.fee;
        let from = state.balances.entry(tx.from).or_insert(0);
        *from = from.checked_sub(debit).ok_or(CslError::BalanceUnderflow)?;
        *state.balances.entry(tx.to).or_insert(0) += tx.coins;
    }

    let mut votes = op.signatures.clone();
    votes.sort_by_key(|v| v.seat);
    let signers: Vec<Identity> = votes.iter().map(|v| v.signer).collect();
    state.tx_signers.push(signers.clone());

    let total_fees: u64 = block.txs.iter().map(|tx| tx.fee).sum();
    let pool = total_fees + cfg.block_reward;
    let n_sig = signers.len() as u64;
    let share = pool / n_sig;
    let remainder = pool % n_sig;
    let mut payouts = Vec::new();
    for signer in &signers {
        *state.balances.entry(*signer).or_insert(0) += share;
        payouts.push((*signer, share));
    }
    if remainder > 0 {
        *state.balances.entry(block.proposer).or_insert(0) += remainder;
        payouts.push((block.proposer, remainder));
    }

    state.tx_chain.push(block.clone());
    Ok(TxCommitSummary { payouts, total_fees })
}

/// Commit a comBlock operation at an epoch boundary: the committee for
/// the next epoch becomes the block's member list.
pub fn commit_com_block(state: &mut SharedState, cfg: &CslConfig, op: &Operation) -> Result<(), CslError> {
    verify_certificate(state, cfg, op)?;
    let OpPayload::Com(block) = &op.payload else {
        return Err(CslError::InvalidAtCommit { kind: "com" });
    };
    if !state.com_block_due() {
        return Err(CslError::BeforeEpochBoundary);
    }
    if block.epoch != state.epoch() + 1 {
        return Err(CslError::WrongEpoch { got: block.epoch, current: state.epoch() });
    }
    if !validate_com_block(state, cfg, block) {
        return Err(CslError::InvalidAtCommit { kind: "com" });
    }
    state.op_log.push(op.clone());
    state.com_chain.push(block.clone());
    Ok(())
}

/// Positional primary selection: the committee seat at
/// `(round + view) mod n_CSL`. The round pointer advances by one per
/// completed round; the view offset counts view changes within the round.
pub fn select_primary(committee: &[Identity], round: u64, view: u32) -> Identity {
    assert!(!committee.is_empty(), "committee must be nonempty");
    let n = committee.len() as u64;
    committee[((round + view as u64) % n) as usize]
}
