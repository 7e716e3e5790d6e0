//! Access control layer: a simulated proof-of-work race among miners.
//!
//! Mining is a lottery per block (win probability proportional to hash
//! power) plus an exponential inter-arrival clock; a bounded nonce search
//! still runs so every produced block genuinely satisfies [`verify_pow`].
//! Finalized blocks are handed to the consensus layer through a
//! single-delivery proposal queue.

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_distr::Exp;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{verify_pow, CanonicalBytes, Identity, PowBlock};

/// One mining participant. `alpha` is its fraction of total network hash
/// power; `pending` is the identity it promotes into the committee layer.
#[derive(Clone, Debug)]
pub struct Miner {
    pub id: Identity,
    pub alpha: f64,
    pub pending: Identity,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AclConfig {
    /// Difficulty in leading-zero bits for newly mined blocks.
    pub difficulty: u32,
    /// Confirmations required before a block may be proposed to the
    /// consensus layer.
    pub finality_depth: u64,
    /// Mean of the exponential block inter-arrival, in simulated seconds.
    pub expected_block_interval: f64,
    /// Abort the nonce search past this bound; it signals a difficulty
    /// that is too high for desk-scale simulation.
    pub nonce_search_limit: u64,
}

impl Default for AclConfig {
    fn default() -> Self {
        AclConfig {
            difficulty: 8,
            finality_depth: 6,
            expected_block_interval: 600.0,
            nonce_search_limit: 1 << 24,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum AclError {
    #[error("mining lottery requires at least one miner")]
    NoMiners,
    #[error("miner alphas must sum to 1 (got {0})")]
    BadAlphaSum(f64),
    #[error("nonce search exceeded {limit} attempts at difficulty {difficulty}")]
    NonceSearchExhausted { difficulty: u32, limit: u64 },
    #[error("unknown height {height}; tip is {tip}")]
    UnknownHeight { height: u64, tip: u64 },
    #[error("block at height {height} is not final (tip {tip}, need {depth} confirmations)")]
    NotFinal { height: u64, tip: u64, depth: u64 },
}

/// Draw the winner of one block race. Index `i` wins with probability
/// `miners[i].alpha`.
pub fn mining_lottery(miners: &[Miner], rng: &mut impl Rng) -> Result<usize, AclError> {
    if miners.is_empty() {
        return Err(AclError::NoMiners);
    }
    let sum: f64 = miners.iter().map(|m| m.alpha).sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(AclError::BadAlphaSum(sum));
    }
    let dist = WeightedIndex::new(miners.iter().map(|m| m.alpha)).map_err(|_| AclError::NoMiners)?;
    Ok(dist.sample(rng))
}

/// Mine the next block on `tip` for `winner`: brute-force the nonce until
/// the digest clears the configured difficulty.
pub fn mine_next_block(
    tip: &PowBlock,
    winner: &Miner,
    config: &AclConfig,
    rng: &mut impl Rng,
) -> Result<(PowBlock, f64), AclError> {
    let mut block = PowBlock {
        parent: tip.digest(),
        difficulty: config.difficulty,
        nonce: 0,
        validator: winner.pending,
        height: tip.height + 1,
    };
    while block.digest().leading_zero_bits() < config.difficulty {
        block.nonce += 1;
        if block.nonce >= config.nonce_search_limit {
            return Err(AclError::NonceSearchExhausted {
                difficulty: config.difficulty,
                limit: config.nonce_search_limit,
            });
        }
    }
    debug_assert!(verify_pow(&block, tip));
    let exp = Exp::new(1.0 / config.expected_block_interval).expect("positive interval");
    let inter_arrival = exp.sample(rng);
    Ok((block, inter_arrival))
}

/// The miners' view of the access-layer chain, from genesis, plus the
/// proposal interface toward the consensus layer.
#[derive(Clone, Debug)]
pub struct AclChain {
    blocks: Vec<PowBlock>,
    /// Heights already handed to the consensus layer, exactly once each.
    next_proposal_height: u64,
}

impl AclChain {
    /// Start from an existing prefix (at least a genesis block). The
    /// proposal cursor starts after the prefix: bootstrap blocks are
    /// considered already known to the consensus layer.
    pub fn from_prefix(blocks: Vec<PowBlock>) -> AclChain {
        assert!(!blocks.is_empty(), "chain needs a genesis block");
        let next = blocks.last().unwrap().height + 1;
        AclChain { blocks, next_proposal_height: next }
    }

    pub fn tip(&self) -> &PowBlock {
        self.blocks.last().unwrap()
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn block_at(&self, height: u64) -> Option<&PowBlock> {
        let base = self.blocks.first()?.height;
        self.blocks.get(height.checked_sub(base)? as usize)
    }

    pub fn push(&mut self, block: PowBlock) {
        debug_assert!(verify_pow(&block, self.tip()));
        self.blocks.push(block);
    }

    /// Finality by confirmation depth: a block is final once the tip is at
    /// least `finality_depth` heights above it.
    pub fn is_final(&self, height: u64, config: &AclConfig) -> Result<bool, AclError> {
        let tip = self.tip().height;
        if height > tip || self.block_at(height).is_none() {
            return Err(AclError::UnknownHeight { height, tip });
        }
        Ok(tip - height >= config.finality_depth)
    }

    /// The next block due for proposal, without consuming it. Proposing a
    /// non-final block is rejected at the interface.
    pub fn next_candidate(&self, config: &AclConfig) -> Result<PowBlock, AclError> {
        let height = self.next_proposal_height;
        if !self.is_final(height, config)? {
            return Err(AclError::NotFinal {
                height,
                tip: self.tip().height,
                depth: config.finality_depth,
            });
        }
        Ok(*self.block_at(height).expect("final block present"))
    }

    /// Acknowledge that the candidate at `height` committed in the
    /// consensus layer; it will not be proposed again.
    pub fn confirm_delivery(&mut self, height: u64) {
        assert_eq!(height, self.next_proposal_height, "deliveries are in order");
        self.next_proposal_height += 1;
    }

    /// Propose the next not-yet-proposed block if it has reached finality.
    /// Returns the block exactly once.
    pub fn take_final_proposal(&mut self, config: &AclConfig) -> Result<PowBlock, AclError> {
        let block = self.next_candidate(config)?;
        self.confirm_delivery(block.height);
        Ok(block)
    }

    /// Whether a finalized, not-yet-proposed block is available.
    pub fn has_final_proposal(&self, config: &AclConfig) -> bool {
        matches!(self.is_final(self.next_proposal_height, config), Ok(true))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn miner(label: &str, alpha: f64) -> Miner {
        let id = Identity::from_label(label);
        Miner { id, alpha, pending: id }
    }

    #[test]
    fn lottery_single_miner_always_wins() {
        let miners = vec![miner("solo", 1.0)];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(mining_lottery(&miners, &mut rng).unwrap(), 0);
        }
    }

    #[test]
    fn lottery_rejects_empty_and_bad_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(mining_lottery(&[], &mut rng), Err(AclError::NoMiners));
        let miners = vec![miner("a", 0.5), miner("b", 0.3)];
        assert!(matches!(mining_lottery(&miners, &mut rng), Err(AclError::BadAlphaSum(_))));
    }

    #[test]
    fn lottery_two_way_symmetry() {
        let miners = vec![miner("a", 0.5), miner("b", 0.5)];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let mut wins = [0u64; 2];
        for _ in 0..n {
            wins[mining_lottery(&miners, &mut rng).unwrap()] += 1;
        }
        // 3 sigma of Binomial(1e5, 0.5)
        let tolerance = 3.0 * (n as f64 * 0.25).sqrt();
        assert!((wins[0] as f64 - 50_000.0).abs() <= tolerance, "wins = {wins:?}");
    }

    #[test]
    fn lottery_three_way_frequencies_match_alphas() {
        let alphas = [0.5, 0.3, 0.2];
        let miners: Vec<Miner> =
            alphas.iter().enumerate().map(|(i, &a)| miner(&format!("m{i}"), a)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let mut wins = [0u64; 3];
        for _ in 0..n {
            wins[mining_lottery(&miners, &mut rng).unwrap()] += 1;
        }
        for (i, &a) in alphas.iter().enumerate() {
            let sigma = (n as f64 * a * (1.0 - a)).sqrt();
            assert!(
                (wins[i] as f64 - a * n as f64).abs() <= 3.0 * sigma,
                "miner {i}: wins {} expected {}",
                wins[i],
                a * n as f64
            );
        }
    }

    #[test]
    fn mine_at_zero_difficulty_takes_first_nonce() {
        let genesis = PowBlock::genesis(Identity::from_label("g"));
        let m = miner("a", 1.0);
        let cfg = AclConfig { difficulty: 0, ..AclConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (block, _) = mine_next_block(&genesis, &m, &cfg, &mut rng).unwrap();
        assert_eq!(block.nonce, 0);
        assert!(verify_pow(&block, &genesis));
    }

    #[test]
    fn mined_block_meets_difficulty_twelve() {
        let genesis = PowBlock::genesis(Identity::from_label("g"));
        let m = miner("a", 1.0);
        let cfg = AclConfig { difficulty: 12, ..AclConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (block, _) = mine_next_block(&genesis, &m, &cfg, &mut rng).unwrap();
        assert!(block.digest().leading_zero_bits() >= 12);
        assert!(verify_pow(&block, &genesis));
    }

    #[test]
    fn nonce_search_bound_is_reported() {
        let genesis = PowBlock::genesis(Identity::from_label("g"));
        let m = miner("a", 1.0);
        let cfg = AclConfig { difficulty: 200, nonce_search_limit: 100, ..AclConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        assert!(matches!(
            mine_next_block(&genesis, &m, &cfg, &mut rng),
            Err(AclError::NonceSearchExhausted { .. })
        ));
    }

    #[test]
    fn mean_inter_arrival_tracks_expected_interval() {
        let m = miner("a", 1.0);
        let cfg =
            AclConfig { difficulty: 0, expected_block_interval: 600.0, ..AclConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut chain = AclChain::from_prefix(vec![PowBlock::genesis(m.id)]);
        let mut total = 0.0;
        let n = 10_000;
        for _ in 0..n {
            let (block, dt) = mine_next_block(chain.tip(), &m, &cfg, &mut rng).unwrap();
            chain.push(block);
            total += dt;
        }
        let mean = total / n as f64;
        assert!((mean - 600.0).abs() / 600.0 < 0.05, "mean = {mean}");
    }

    #[test]
    fn finality_boundaries() {
        let m = miner("a", 1.0);
        let cfg = AclConfig { difficulty: 0, finality_depth: 6, ..AclConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut chain = AclChain::from_prefix(vec![PowBlock::genesis(m.id)]);
        while chain.tip().height < 10 {
            let (block, _) = mine_next_block(chain.tip(), &m, &cfg, &mut rng).unwrap();
            chain.push(block);
        }
        assert_eq!(chain.is_final(4, &cfg), Ok(true));
        assert_eq!(chain.is_final(5, &cfg), Ok(false));
        assert!(matches!(chain.is_final(11, &cfg), Err(AclError::UnknownHeight { .. })));

        let one = AclConfig { finality_depth: 1, ..cfg };
        let mut short = AclChain::from_prefix(vec![PowBlock::genesis(m.id)]);
        let (b1, _) = mine_next_block(short.tip(), &m, &one, &mut rng).unwrap();
        short.push(b1);
        assert_eq!(short.is_final(0, &one), Ok(true));
    }

    #[test]
    fn proposal_queue_delivers_each_final_block_once() {
        let m = miner("a", 1.0);
        let cfg = AclConfig { difficulty: 0, finality_depth: 2, ..AclConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut chain = AclChain::from_prefix(vec![PowBlock::genesis(m.id)]);
        assert!(matches!(chain.take_final_proposal(&cfg), Err(AclError::UnknownHeight { .. })));
        for _ in 0..3 {
            let (block, _) = mine_next_block(chain.tip(), &m, &cfg, &mut rng).unwrap();
            chain.push(block);
        }
        // Tip is 3; height 1 is final, height 2 is not.
        let first = chain.take_final_proposal(&cfg).unwrap();
        assert_eq!(first.height, 1);
        assert!(matches!(chain.take_final_proposal(&cfg), Err(AclError::NotFinal { .. })));
        let (block, _) = mine_next_block(chain.tip(), &m, &cfg, &mut rng).unwrap();
        chain.push(block);
        assert_eq!(chain.take_final_proposal(&cfg).unwrap().height, 2);
    }

    #[test]
    fn fairness_over_long_run() {
        let alphas = [0.7, 0.3];
        let miners: Vec<Miner> =
            alphas.iter().enumerate().map(|(i, &a)| miner(&format!("m{i}"), a)).collect();
        let cfg = AclConfig { difficulty: 0, ..AclConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut chain = AclChain::from_prefix(vec![PowBlock::genesis(miners[0].id)]);
        let mut counts = [0u64; 2];
        let n = 10_000;
        for _ in 0..n {
            let w = mining_lottery(&miners, &mut rng).unwrap();
            counts[w] += 1;
            let (block, _) = mine_next_block(chain.tip(), &miners[w], &cfg, &mut rng).unwrap();
            chain.push(block);
        }
        for (i, &a) in alphas.iter().enumerate() {
            let sigma = (n as f64 * a * (1.0 - a)).sqrt();
            assert!((counts[i] as f64 - a * n as f64).abs() <= 3.0 * sigma);
        }
        // Chain is hash-linked from genesis.
        for w in 1..chain.len() {
            let parent = chain.block_at(w as u64 - 1).unwrap();
            assert_eq!(chain.block_at(w as u64).unwrap().parent, parent.digest());
        }
    }
}
