//! Shared domain types for both layers: identities, digests, simulated
//! signatures, blocks, and transactions, plus the canonical byte encoding
//! that makes every digest reproducible across runs and platforms.

use std::fmt;

use rand::RngCore;
use sha2::{Digest as _, Sha256};

/// Width of every digest (and identity) in bytes.
pub const DIGEST_BYTES: usize = 32;

/// Fixed-width digest over a canonical byte string.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Digest(pub [u8; DIGEST_BYTES]);

impl Digest {
    pub const ZERO: Digest = Digest([0u8; DIGEST_BYTES]);

    /// Number of leading zero bits, scanning from the first byte down.
    pub fn leading_zero_bits(&self) -> u32 {
        let mut bits = 0;
        for byte in self.0 {
            if byte == 0 {
                bits += 8;
            } else {
                bits += byte.leading_zeros();
                break;
            }
        }
        bits
    }

    pub fn short_hex(&self) -> String {
        self.0[..4].iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.short_hex())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.short_hex())
    }
}

/// Deterministic digest of an arbitrary byte string.
pub fn digest(bytes: &[u8]) -> Digest {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    Digest(hasher.finalize().into())
}

/// A node identity: an opaque simulated public key.
///
/// Equality is byte equality; the display form is a short hex tag.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Identity(pub [u8; DIGEST_BYTES]);

impl Identity {
    pub fn random(rng: &mut impl RngCore) -> Identity {
        let mut bytes = [0u8; DIGEST_BYTES];
        rng.fill_bytes(&mut bytes);
        Identity(bytes)
    }

    /// Deterministic identity derived from a label, for tests and genesis.
    pub fn from_label(label: &str) -> Identity {
        Identity(digest(label.as_bytes()).0)
    }

    pub fn short_hex(&self) -> String {
        self.0[..4].iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl fmt::Debug for Identity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Identity({})", self.short_hex())
    }
}

impl fmt::Display for Identity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.short_hex())
    }
}

/// Simulated signature: a digest keyed by the signer identity.
///
/// This is not real cryptography. It round-trips, and any mutation of the
/// signed payload or the claimed signer fails verification, which is all
/// the simulation relies on.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Signature(pub [u8; DIGEST_BYTES]);

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({})", self.0[..4].iter().map(|b| format!("{b:02x}")).collect::<String>())
    }
}

const SIG_DOMAIN: &[u8] = b"tierchain/sig/v1";

pub fn sign(signer: &Identity, message: &[u8]) -> Signature {
    let mut buf = Vec::with_capacity(SIG_DOMAIN.len() + DIGEST_BYTES + message.len());
    buf.extend_from_slice(SIG_DOMAIN);
    buf.extend_from_slice(&signer.0);
    buf.extend_from_slice(message);
    Signature(digest(&buf).0)
}

pub fn verify(signer: &Identity, message: &[u8], sig: &Signature) -> bool {
    sign(signer, message) == *sig
}

/// Canonical encoding: every field is length-prefixed (u32 LE) and fields
/// appear in declaration order, so encodings are unambiguous and digests
/// are stable across platforms.
pub trait CanonicalBytes {
    fn encode_into(&self, buf: &mut Vec<u8>);

    fn canonical_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.encode_into(&mut buf);
        buf
    }

    fn digest(&self) -> Digest {
        digest(&self.canonical_bytes())
    }
}

pub(crate) fn put_field(buf: &mut Vec<u8>, bytes: &[u8]) {
    buf.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(bytes);
}

pub(crate) fn put_u64(buf: &mut Vec<u8>, v: u64) {
    put_field(buf, &v.to_le_bytes());
}

/// Access-layer block `⟨h, d, x, p⟩` plus its height.
///
/// `h` links to the parent digest, `d` is the difficulty as a leading-zero
/// bit count, `x` is the nonce, and `p` is the candidate validator identity
/// the miner promotes into the committee layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PowBlock {
    pub parent: Digest,
    pub difficulty: u32,
    pub nonce: u64,
    pub validator: Identity,
    pub height: u64,
}

impl CanonicalBytes for PowBlock {
    fn encode_into(&self, buf: &mut Vec<u8>) {
        put_field(buf, &self.parent.0);
        put_u64(buf, self.difficulty as u64);
        put_u64(buf, self.nonce);
        put_field(buf, &self.validator.0);
        put_u64(buf, self.height);
    }
}

impl PowBlock {
    /// The unique genesis block: height 0, all-zero parent digest.
    pub fn genesis(validator: Identity) -> PowBlock {
        PowBlock { parent: Digest::ZERO, difficulty: 0, nonce: 0, validator, height: 0 }
    }
}

/// `true` iff `block` is a well-formed child of `parent`: the parent link
/// matches, the block digest meets the block's claimed difficulty, and the
/// height increments.
pub fn verify_pow(block: &PowBlock, parent: &PowBlock) -> bool {
    block.parent == parent.digest()
        && block.digest().leading_zero_bits() >= block.difficulty
        && block.height == parent.height + 1
}

/// A payment `⟨from, to, sign, coins, txFee⟩` in integer currency units.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Transaction {
    pub from: Identity,
    pub to: Identity,
    pub signature: Signature,
    pub coins: u64,
    pub fee: u64,
}

impl Transaction {
    /// The bytes the sender signs: everything except the signature itself.
    fn signed_payload(from: &Identity, to: &Identity, coins: u64, fee: u64) -> Vec<u8> {
        let mut buf = Vec::new();
        put_field(&mut buf, &from.0);
        put_field(&mut buf, &to.0);
        put_u64(&mut buf, coins);
        put_u64(&mut buf, fee);
        buf
    }

    pub fn signed(from: Identity, to: Identity, coins: u64, fee: u64) -> Transaction {
        let payload = Self::signed_payload(&from, &to, coins, fee);
        Transaction { from, to, signature: sign(&from, &payload), coins, fee }
    }
}

impl CanonicalBytes for Transaction {
    fn encode_into(&self, buf: &mut Vec<u8>) {
        put_field(buf, &self.from.0);
        put_field(buf, &self.to.0);
        put_field(buf, &self.signature.0);
        put_u64(buf, self.coins);
        put_u64(buf, self.fee);
    }
}

/// Stateless transaction validity: the signature verifies against the
/// sender. Balance sufficiency is a separate, stateful check at commit.
pub fn verify_transaction_static(tx: &Transaction) -> bool {
    let payload = Transaction::signed_payload(&tx.from, &tx.to, tx.coins, tx.fee);
    verify(&tx.from, &payload, &tx.signature)
}

/// An ordered batch of transactions proposed by one committee primary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TxBlock {
    pub txs: Vec<Transaction>,
    pub proposer: Identity,
}

impl TxBlock {
    /// Total canonical serialized bytes of the contained transactions.
    pub fn byte_size(&self) -> u64 {
        self.txs.iter().map(|tx| tx.canonical_bytes().len() as u64).sum()
    }
}

impl CanonicalBytes for TxBlock {
    fn encode_into(&self, buf: &mut Vec<u8>) {
        put_u64(buf, self.txs.len() as u64);
        for tx in &self.txs {
            put_field(buf, &tx.canonical_bytes());
        }
        put_field(buf, &self.proposer.0);
    }
}

/// Committee block: the ordered validator list for one epoch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComBlock {
    pub members: Vec<Identity>,
    pub epoch: u64,
}

impl CanonicalBytes for ComBlock {
    fn encode_into(&self, buf: &mut Vec<u8>) {
        put_u64(buf, self.members.len() as u64);
        for m in &self.members {
            put_field(buf, &m.0);
        }
        put_u64(buf, self.epoch);
    }
}
