//! Discrete-event session driver: wires access-layer mining, consensus
//! epochs, the agreement engine, and BAR agents into full protocol runs,
//! and measures block time, throughput, message counts, and safety and
//! liveness outcomes.
//!
//! A session is deterministic given its seed: repeated runs produce
//! byte-identical traces and metrics. Independent sessions (batteries,
//! sweeps) are parallelizable.

use std::collections::{BTreeMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acl::{mine_next_block, mining_lottery, AclChain, AclConfig, AclError, Miner};
use crate::agents::{
    act_on_proposal, best_response, AgentProfile, AgentType, BeliefModel, GameParams, Strategy,
};
use crate::bft::{self, BftConfig, Outcome, PrimaryAction};
use crate::chain::{ComBlock, Digest, Identity, Signature, Transaction, TxBlock};
use crate::csl::{
    commit_com_block, commit_pow_block, commit_tx_block, select_primary, CslConfig, CslError,
    OpKind, OpPayload, Operation, SharedState, TxCommitSummary,
};
use crate::exec;

/// Reference consensus round times (seconds) by committee size, used by
/// calibration mode.
pub const REFERENCE_BLOCK_TIMES: [(u64, f64); 8] = [
    (21, 9.0),
    (31, 23.0),
    (41, 54.0),
    (51, 114.0),
    (61, 174.0),
    (71, 278.0),
    (81, 420.0),
    (91, 879.0),
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationPoint {
    pub n: u64,
    pub seconds: f64,
}

pub fn reference_table() -> Vec<CalibrationPoint> {
    REFERENCE_BLOCK_TIMES.iter().map(|&(n, seconds)| CalibrationPoint { n, seconds }).collect()
}

/// How long one consensus round takes at committee size `n`: either a
/// polynomial model of the quadratic message exchange, or interpolation
/// of a measured table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case", tag = "mode")]
pub enum LatencyMode {
    Model { base: f64, per_message: f64, quadratic_factor: f64 },
    Calibration {
        #[serde(default = "reference_table")]
        table: Vec<CalibrationPoint>,
    },
}

impl Default for LatencyMode {
    fn default() -> Self {
        LatencyMode::Model { base: 0.5, per_message: 0.01, quadratic_factor: 0.002 }
    }
}

/// Simulated seconds per consensus round at committee size `n`.
pub fn consensus_round_time(n: u64, mode: &LatencyMode) -> f64 {
    match mode {
        LatencyMode::Model { base, per_message, quadratic_factor } => {
            base + per_message * n as f64 + quadratic_factor * (n * n) as f64
        }
        LatencyMode::Calibration { table } => {
            assert!(!table.is_empty(), "calibration table must be nonempty");
            assert!(
                table.windows(2).all(|w| w[0].n < w[1].n),
                "calibration table must be sorted by committee size"
            );
            let first = table.first().unwrap();
            let last = table.last().unwrap();
            assert!(
                n >= first.n && n <= last.n,
                "committee size {n} outside calibration table [{}, {}]",
                first.n,
                last.n
            );
            for w in table.windows(2) {
                let (lo, hi) = (w[0], w[1]);
                if n <= hi.n {
                    let t = (n - lo.n) as f64 / (hi.n - lo.n) as f64;
                    return lo.seconds + t * (hi.seconds - lo.seconds);
                }
            }
            last.seconds
        }
    }
}

/// Transactions per simulated second at the given block time.
pub fn throughput(block_time: f64, block_bytes: u64, tx_bytes: u64) -> f64 {
    assert!(block_time > 0.0, "block time must be positive");
    assert!(tx_bytes > 0, "transaction size must be positive");
    (block_bytes as f64 / tx_bytes as f64) / block_time
}

#[derive(Clone, Debug, PartialEq)]
pub struct TpsRow {
    pub committee_size: u64,
    pub block_time: f64,
    pub tps: f64,
}

/// Block time and throughput per committee size; rows sorted by size.
pub fn tps_sweep(sizes: &[u64], mode: &LatencyMode, block_bytes: u64, tx_bytes: u64) -> Vec<TpsRow> {
    let mut sizes = sizes.to_vec();
    sizes.sort_unstable();
    exec::map_collect(&sizes, |&n| {
        let block_time = consensus_round_time(n, mode);
        TpsRow { committee_size: n, block_time, tps: throughput(block_time, block_bytes, tx_bytes) }
    })
}

pub const TPS_CSV_SCHEMA: &str = "# schema=tps-sweep.v1";

pub fn tps_sweep_csv(rows: &[TpsRow], mode_label: &str) -> String {
    let mut out = String::new();
    out.push_str(TPS_CSV_SCHEMA);
    out.push('\n');
    out.push_str("committee_size,block_time_s,tps,mode\n");
    for row in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{}\n",
            row.committee_size, row.block_time, row.tps, mode_label
        ));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentMix {
    pub n_honest: usize,
    pub n_rational: usize,
    pub n_byzantine: usize,
    /// Per-agent mining shares, in agent order (honest, rational,
    /// byzantine); defaults to uniform.
    #[serde(default)]
    pub alphas: Option<Vec<f64>>,
    /// Per-agent stakes; defaults to `game.kappa_r` for everyone.
    #[serde(default)]
    pub kappas: Option<Vec<u64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeliefConfig {
    /// Believed adversary resource share; defaults to the configured
    /// Byzantine agents' total alpha.
    pub alpha_a: Option<f64>,
    /// Believed probability that a rational peer signs blind.
    pub rho_s1: f64,
}

impl Default for BeliefConfig {
    fn default() -> Self {
        BeliefConfig { alpha_a: None, rho_s1: 0.0 }
    }
}

fn default_block_bytes() -> u64 {
    16 * (1 << 20)
}

fn default_tx_bytes() -> u64 {
    200
}

fn default_tx_blocks_per_round() -> u32 {
    4
}

fn default_block_reward() -> u64 {
    1000
}

fn default_initial_balance() -> u64 {
    1_000_000
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionConfig {
    pub seed: u64,
    pub n_csl: usize,
    pub duration_rounds: u64,
    #[serde(default = "default_block_bytes")]
    pub block_bytes: u64,
    #[serde(default = "default_tx_bytes")]
    pub tx_bytes: u64,
    /// Mean transaction arrivals per simulated second; 0 disables the
    /// workload.
    #[serde(default)]
    pub tx_rate: f64,
    #[serde(default = "default_tx_blocks_per_round")]
    pub max_tx_blocks_per_round: u32,
    #[serde(default = "default_block_reward")]
    pub block_reward: u64,
    #[serde(default = "default_initial_balance")]
    pub initial_balance: u64,
    pub agents: AgentMix,
    pub game: GameParams,
    #[serde(default)]
    pub belief: BeliefConfig,
    #[serde(default)]
    pub acl: AclConfig,
    #[serde(default)]
    pub bft: BftConfig,
    #[serde(default)]
    pub latency: LatencyMode,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Acl(#[from] AclError),
    #[error("internal: {0}")]
    Internal(String),
}

impl SessionConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let mix = &self.agents;
        let total = mix.n_honest + mix.n_rational + mix.n_byzantine;
        if total != self.n_csl {
            return Err(SimError::Config(format!(
                "agents: n_honest + n_rational + n_byzantine ({} + {} + {} = {total}) must equal n_csl ({})",
                mix.n_honest, mix.n_rational, mix.n_byzantine, self.n_csl
            )));
        }
        if self.n_csl == 0 {
            return Err(SimError::Config("n_csl must be at least 1".into()));
        }
        if mix.n_honest + mix.n_rational == 0 {
            return Err(SimError::Config(
                "agents: at least one non-byzantine agent is required".into(),
            ));
        }
        if self.duration_rounds == 0 {
            return Err(SimError::Config("duration_rounds must be at least 1".into()));
        }
        if let Some(alphas) = &mix.alphas {
            if alphas.len() != self.n_csl {
                return Err(SimError::Config(format!(
                    "agents: alphas must list one share per agent ({} given, {} agents)",
                    alphas.len(),
                    self.n_csl
                )));
            }
            let sum: f64 = alphas.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(SimError::Config(format!("agents: alphas must sum to 1 (got {sum})")));
            }
            if alphas.iter().any(|a| *a < 0.0) {
                return Err(SimError::Config("agents: alphas must be nonnegative".into()));
            }
        }
        if let Some(kappas) = &mix.kappas {
            if kappas.len() != self.n_csl {
                return Err(SimError::Config(format!(
                    "agents: kappas must list one stake per agent ({} given, {} agents)",
                    kappas.len(),
                    self.n_csl
                )));
            }
        }
        self.game.validate().map_err(SimError::Config)?;
        if let Some(alpha_a) = self.belief.alpha_a {
            if !(0.0..=1.0).contains(&alpha_a) {
                return Err(SimError::Config("belief: alpha_a must be in [0, 1]".into()));
            }
        }
        if !(0.0..=1.0).contains(&self.belief.rho_s1) {
            return Err(SimError::Config("belief: rho_s1 must be in [0, 1]".into()));
        }
        if self.tx_rate > 0.0 && self.block_bytes < 200 {
            return Err(SimError::Config(
                "block_bytes too small to hold a single transaction".into(),
            ));
        }
        if self.tx_bytes == 0 {
            return Err(SimError::Config("tx_bytes must be positive".into()));
        }
        if let LatencyMode::Calibration { table } = &self.latency {
            let n = self.n_csl as u64;
            let covered = table.first().is_some_and(|f| f.n <= n)
                && table.last().is_some_and(|l| l.n >= n);
            if !covered {
                return Err(SimError::Config(format!(
                    "latency: calibration table must cover n_csl = {n}"
                )));
            }
        }
        Ok(())
    }

    /// A small, fully specified session useful as a starting point.
    pub fn example() -> SessionConfig {
        SessionConfig {
            seed: 7,
            n_csl: 4,
            duration_rounds: 20,
            block_bytes: 4096,
            tx_bytes: 200,
            tx_rate: 0.004,
            max_tx_blocks_per_round: 4,
            block_reward: 10_000,
            initial_balance: 1_000_000,
            agents: AgentMix {
                n_honest: 2,
                n_rational: 1,
                n_byzantine: 1,
                alphas: Some(vec![0.4, 0.3, 0.3, 0.0]),
                kappas: None,
            },
            game: GameParams { tr: 2500, c_mine: 5000, c_val: 1, phi: 2048, n_tx: 50, kappa_r: 60_000 },
            belief: BeliefConfig { alpha_a: Some(0.2), rho_s1: 0.05 },
            acl: AclConfig {
                difficulty: 4,
                finality_depth: 3,
                expected_block_interval: 30.0,
                nonce_search_limit: 1 << 24,
            },
            bft: BftConfig::default(),
            latency: LatencyMode::default(),
        }
    }
}

/// Everything a session measures.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionMetrics {
    /// Agent identities in configuration order (honest, rational,
    /// byzantine), matching the order of `alphas` and `kappas`.
    pub agent_ids: Vec<Identity>,
    pub committed_pow_blocks: u64,
    pub committed_tx_blocks: u64,
    pub committed_com_blocks: u64,
    pub committed_txs: u64,
    pub invalid_blocks_committed: u64,
    pub view_changes: u64,
    pub rounds_failed: u64,
    pub dropped_votes: u64,
    pub messages_per_round: Vec<u64>,
    pub avg_tx_block_time: f64,
    pub tps: f64,
    pub sim_time: f64,
    pub per_agent_utility: BTreeMap<Identity, i64>,
    /// State digest of every correct (non-Byzantine) replica at the end.
    pub replica_digests: Vec<(Identity, Digest)>,
    pub safety_ok: bool,
    pub liveness_ok: bool,
    pub max_commit_delay_rounds: Option<u64>,
    pub uncommitted_txs: u64,
    /// Committee after each rotation, and the PowChain identity window it
    /// was derived from, for cross-checking.
    pub epoch_committees: Vec<Vec<Identity>>,
    pub epoch_pow_windows: Vec<Vec<Identity>>,
    pub byzantine_seats_per_epoch: Vec<usize>,
    pub miner_blocks: BTreeMap<Identity, u64>,
    pub final_com_chain_len: u64,
    pub final_snapshot: String,
}

#[derive(Clone, Debug)]
pub struct SessionOutcome {
    pub metrics: SessionMetrics,
    pub trace: String,
}

enum AttemptResult {
    Committed(Option<TxCommitSummary>),
    InvalidCommitted,
    Failed,
}

struct PendingTx {
    tx: Transaction,
    submit_round: u64,
}

struct Workload {
    projected: BTreeMap<Identity, u64>,
    next_at: f64,
    rate: f64,
}

impl Workload {
    fn new(funded: &[(Identity, u64)], rate: f64, rng: &mut ChaCha8Rng) -> Workload {
        let projected = funded.iter().cloned().collect();
        let next_at = if rate > 0.0 { Exp::new(rate).unwrap().sample(rng) } else { f64::INFINITY };
        Workload { projected, next_at, rate }
    }

    /// Emit Poisson arrivals up to `now`. Projected balances track every
    /// submitted debit, so a submitted transaction can never overdraw no
    /// matter when it commits.
    fn generate(
        &mut self,
        now: f64,
        round: u64,
        rng: &mut ChaCha8Rng,
        mempool: &mut VecDeque<PendingTx>,
        trace: &mut String,
    ) {
        if self.rate <= 0.0 {
            return;
        }
        while self.next_at <= now {
            let at = self.next_at;
            self.next_at += Exp::new(self.rate).unwrap().sample(rng);
            let accounts: Vec<Identity> = self
                .projected
                .iter()
                .filter(|(_, &bal)| bal >= 8)
                .map(|(id, _)| *id)
                .collect();
            if accounts.len() < 2 {
                continue;
            }
            let from = accounts[rng.gen_range(0..accounts.len())];
            let mut to = from;
            while to == from {
                to = accounts[rng.gen_range(0..accounts.len())];
            }
            let balance = self.projected[&from];
            let coins = rng.gen_range(1..=(balance / 8).max(1));
            let fee = rng.gen_range(0..=2u64).min(balance - coins);
            *self.projected.get_mut(&from).unwrap() -= coins + fee;
            *self.projected.entry(to).or_insert(0) += coins;
            let tx = Transaction::signed(from, to, coins, fee);
            trace.push_str(&format!(
                "t={at:.6} kind=tx-submit actor={from} payload=coins:{coins},fee:{fee}\n"
            ));
            mempool.push_back(PendingTx { tx, submit_round: round });
        }
    }
}

struct Session {
    cfg: SessionConfig,
    csl_cfg: CslConfig,
    acl_cfg: AclConfig,
    agents: Vec<AgentProfile>,
    agent_index: BTreeMap<Identity, usize>,
    miners: Vec<Miner>,
    acl: AclChain,
    replicas: Vec<SharedState>,
    first_correct: usize,
    mempool: VecDeque<PendingTx>,
    workload: Workload,
    rng_mining: ChaCha8Rng,
    rng_workload: ChaCha8Rng,
    rng_latency: ChaCha8Rng,
    clock: f64,
    round: u64,
    trace: String,
    // metric accumulators
    committed_pow: u64,
    committed_tx_blocks: u64,
    committed_com: u64,
    committed_txs: u64,
    invalid_commits: u64,
    view_changes: u64,
    rounds_failed: u64,
    dropped_votes: u64,
    messages_per_round: Vec<u64>,
    utilities: Vec<i128>,
    max_commit_delay: Option<u64>,
    last_tx_commit_time: f64,
    epoch_committees: Vec<Vec<Identity>>,
    epoch_pow_windows: Vec<Vec<Identity>>,
    byzantine_seats_per_epoch: Vec<usize>,
    miner_blocks: BTreeMap<Identity, u64>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl Session {
    fn new(cfg: SessionConfig) -> Result<Session, SimError> {
        cfg.validate()?;
        let n = cfg.n_csl;
        let mut rng_setup = stream_rng(cfg.seed, 0);
        let rng_mining = stream_rng(cfg.seed, 1);
        let mut rng_workload = stream_rng(cfg.seed, 2);
        let rng_latency = stream_rng(cfg.seed, 3);

        let alphas = cfg
            .agents
            .alphas
            .clone()
            .unwrap_or_else(|| vec![1.0 / n as f64; n]);
        let kappas = cfg.agents.kappas.clone().unwrap_or_else(|| vec![cfg.game.kappa_r; n]);

        let mut identities = Vec::with_capacity(n);
        for _ in 0..n {
            identities.push(Identity::random(&mut rng_setup));
        }

        let byz_alpha: f64 = identities
            .iter()
            .enumerate()
            .filter(|(i, _)| *i >= cfg.agents.n_honest + cfg.agents.n_rational)
            .map(|(i, _)| alphas[i])
            .sum();
        let belief = BeliefModel::from_f64(
            cfg.belief.alpha_a.unwrap_or(byz_alpha),
            cfg.belief.rho_s1,
            n,
        );

        let mut agents = Vec::with_capacity(n);
        for (i, &id) in identities.iter().enumerate() {
            let agent = if i < cfg.agents.n_honest {
                AgentProfile::honest(id, alphas[i])
            } else if i < cfg.agents.n_honest + cfg.agents.n_rational {
                // Rational strategy is fixed at session start by best
                // response to the configured beliefs (static game).
                let mut profile =
                    AgentProfile::rational(id, Strategy::ValidateThenSign, kappas[i], alphas[i])
                        .expect("rational profile");
                profile.strategy = best_response(&profile, &cfg.game, &belief);
                profile
            } else {
                AgentProfile::byzantine(id, alphas[i])
            };
            agents.push(agent);
        }
        let agent_index: BTreeMap<Identity, usize> =
            agents.iter().enumerate().map(|(i, a)| (a.id, i)).collect();
        let first_correct = agents
            .iter()
            .position(|a| !matches!(a.agent_type, AgentType::Byzantine))
            .expect("validated: at least one correct agent");

        let miners: Vec<Miner> = agents
            .iter()
            .filter(|a| a.alpha > 0.0)
            .map(|a| Miner { id: a.id, alpha: a.alpha, pending: a.id })
            .collect();

        let funded: Vec<(Identity, u64)> =
            identities.iter().map(|&id| (id, cfg.initial_balance)).collect();
        let genesis = SharedState::genesis(&identities, &funded);
        let acl = AclChain::from_prefix(genesis.pow_chain.clone());
        let replicas = vec![genesis; n];

        let workload = Workload::new(&funded, cfg.tx_rate, &mut rng_workload);
        let csl_cfg =
            CslConfig { n_csl: n, block_reward: cfg.block_reward, max_block_bytes: cfg.block_bytes };
        let acl_cfg = cfg.acl;

        Ok(Session {
            cfg,
            csl_cfg,
            acl_cfg,
            agents,
            agent_index,
            miners,
            acl,
            replicas,
            first_correct,
            mempool: VecDeque::new(),
            workload,
            rng_mining,
            rng_workload,
            rng_latency,
            clock: 0.0,
            round: 0,
            trace: String::new(),
            committed_pow: 0,
            committed_tx_blocks: 0,
            committed_com: 0,
            committed_txs: 0,
            invalid_commits: 0,
            view_changes: 0,
            rounds_failed: 0,
            dropped_votes: 0,
            messages_per_round: Vec::new(),
            utilities: vec![0; n],
            max_commit_delay: None,
            last_tx_commit_time: 0.0,
            epoch_committees: Vec::new(),
            epoch_pow_windows: Vec::new(),
            byzantine_seats_per_epoch: Vec::new(),
            miner_blocks: BTreeMap::new(),
        })
    }

    fn correct_state(&self) -> &SharedState {
        &self.replicas[self.first_correct]
    }

    fn trace_line(&mut self, kind: &str, actor: &str, payload: &str) {
        self.trace.push_str(&format!(
            "t={:.6} kind={kind} actor={actor} payload={payload}\n",
            self.clock
        ));
    }

    fn mine_one(&mut self) -> Result<(), SimError> {
        let winner = mining_lottery(&self.miners, &mut self.rng_mining)?;
        let miner = self.miners[winner].clone();
        let (block, dt) =
            mine_next_block(self.acl.tip(), &miner, &self.acl_cfg, &mut self.rng_mining)?;
        self.clock += dt;
        self.workload.generate(
            self.clock,
            self.round,
            &mut self.rng_workload,
            &mut self.mempool,
            &mut self.trace,
        );
        let height = block.height;
        self.acl.push(block);
        *self.miner_blocks.entry(miner.id).or_insert(0) += 1;
        let idx = self.agent_index[&miner.id];
        self.utilities[idx] -= self.cfg.game.c_mine as i128;
        self.trace_line("mine", &miner.id.to_string(), &format!("height:{height}"));
        Ok(())
    }

    /// Byzantine primaries propose a deterministically corrupted variant
    /// of whatever operation the round needs.
    fn tampered(&self, op: &Operation) -> Operation {
        match &op.payload {
            OpPayload::Pow(block) => {
                let mut bad = *block;
                bad.parent.0[0] ^= 0xff;
                Operation::pow(bad)
            }
            OpPayload::Tx(block) => {
                let victim = self.correct_state().committee()[0];
                let mut bad_tx = Transaction::signed(victim, block.proposer, 1, 0);
                bad_tx.signature = Signature([0u8; 32]);
                Operation::tx(TxBlock { txs: vec![bad_tx], proposer: block.proposer })
            }
            OpPayload::Com(block) => {
                let mut bad = block.clone();
                if bad.members.len() >= 2 {
                    bad.members.swap(0, 1);
                } else {
                    bad.members = vec![Identity::from_label("forged-member")];
                }
                Operation::com(bad)
            }
        }
    }

    fn attempt(&mut self, view: u32, op: Operation, round_msgs: &mut u64) -> AttemptResult {
        let committee = self.correct_state().committee().to_vec();
        let n = committee.len() as u64;
        let primary = select_primary(&committee, self.round, view);
        let primary_profile = &self.agents[self.agent_index[&primary]];
        let byzantine_primary = matches!(primary_profile.agent_type, AgentType::Byzantine);
        let action = if byzantine_primary {
            PrimaryAction::Propose(self.tampered(&op))
        } else {
            PrimaryAction::Propose(op)
        };

        self.clock += consensus_round_time(n, &self.cfg.latency);
        self.workload.generate(
            self.clock,
            self.round,
            &mut self.rng_workload,
            &mut self.mempool,
            &mut self.trace,
        );

        let (kind, digest) = match &action {
            PrimaryAction::Propose(op) => (op.kind().name(), op.content_digest()),
            _ => unreachable!(),
        };
        self.trace_line(
            "propose",
            &primary.to_string(),
            &format!("kind:{kind},digest:{digest},round:{},view:{view}", self.round),
        );

        let round = self.round;
        let (report, validated_bytes) = {
            let Session { agents, agent_index, replicas, csl_cfg, rng_latency, cfg, .. } = self;
            let mut validated_bytes: Vec<i128> = vec![0; agents.len()];
            let decide = |seat: usize, proposed: &Operation| -> bool {
                let idx = agent_index[&committee[seat]];
                let profile = &agents[idx];
                if matches!(profile.strategy, Strategy::ValidateThenSign) {
                    validated_bytes[idx] += proposed.payload_bytes() as i128;
                }
                act_on_proposal(profile, proposed, &replicas[idx], csl_cfg).signs()
            };
            let report =
                bft::run_agreement(action, &committee, round, view, decide, &cfg.bft, rng_latency);
            (report, validated_bytes)
        };
        let c_val = self.cfg.game.c_val as i128;
        for (idx, bytes) in validated_bytes.into_iter().enumerate() {
            self.utilities[idx] -= bytes * c_val;
        }
        *round_msgs += report.messages;
        self.dropped_votes += report.dropped_votes;
        for vote in &report.votes {
            self.trace_line(
                "vote",
                &vote.signer.to_string(),
                &format!("seat:{},op:{digest}", vote.seat),
            );
        }
        if report.dropped_votes > 0 {
            self.trace_line("drop-vote", "engine", &format!("count:{}", report.dropped_votes));
        }

        match report.outcome {
            Outcome::Committed { operation } => match self.apply_committed(&operation) {
                Ok(summary) => {
                    self.trace_line(
                        "commit",
                        &primary.to_string(),
                        &format!(
                            "kind:{kind},digest:{},nsig:{},round:{}",
                            operation.content_digest(),
                            operation.signatures.len(),
                            self.round
                        ),
                    );
                    AttemptResult::Committed(summary)
                }
                Err(err) => {
                    self.invalid_commits += 1;
                    self.view_changes += 1;
                    let rational_loss: Vec<(usize, u64)> = self
                        .agents
                        .iter()
                        .enumerate()
                        .filter(|(_, a)| matches!(a.agent_type, AgentType::Rational))
                        .map(|(i, a)| (i, a.kappa))
                        .collect();
                    for (idx, kappa) in rational_loss {
                        self.utilities[idx] -= kappa as i128;
                    }
                    self.trace_line(
                        "invalid-commit",
                        &primary.to_string(),
                        &format!(
                            "kind:{kind},digest:{},round:{},error:{err}",
                            operation.content_digest(),
                            self.round
                        ),
                    );
                    AttemptResult::InvalidCommitted
                }
            },
            Outcome::Reset { timely_votes } => {
                self.view_changes += 1;
                self.trace_line(
                    "reset",
                    &primary.to_string(),
                    &format!("round:{},view:{view},votes:{timely_votes}", self.round),
                );
                AttemptResult::Failed
            }
            Outcome::ViewChanged { reason } => {
                self.clock += self.cfg.bft.view_change_timeout;
                self.view_changes += 1;
                self.trace_line(
                    "view-change",
                    &primary.to_string(),
                    &format!("round:{},view:{view},reason:{reason:?}", self.round),
                );
                AttemptResult::Failed
            }
        }
    }

    /// Apply a certified operation to every replica. Commit rules
    /// re-validate and refuse to mutate on failure, so an invalid
    /// operation that slipped past the quorum is detected here.
    fn apply_committed(&mut self, op: &Operation) -> Result<Option<TxCommitSummary>, CslError> {
        let mut summary = None;
        for (idx, replica) in self.replicas.iter_mut().enumerate() {
            let result = match op.kind() {
                OpKind::Pow => commit_pow_block(replica, &self.csl_cfg, op).map(|()| None),
                OpKind::Tx => commit_tx_block(replica, &self.csl_cfg, op).map(Some),
                OpKind::Com => commit_com_block(replica, &self.csl_cfg, op).map(|()| None),
            };
            match result {
                Ok(s) => {
                    if idx == 0 {
                        summary = s;
                    }
                }
                Err(err) => {
                    debug_assert_eq!(idx, 0, "replicas must agree on commit outcomes");
                    return Err(err);
                }
            }
        }
        Ok(summary)
    }

    fn run_views(&mut self, op_builder: impl Fn(&Session, Identity) -> Operation, round_msgs: &mut u64) -> AttemptResult {
        let n_views = self.csl_cfg.n_csl as u32;
        let mut last = AttemptResult::Failed;
        for view in 0..n_views {
            let committee = self.correct_state().committee().to_vec();
            let primary = select_primary(&committee, self.round, view);
            let op = op_builder(self, primary);
            last = self.attempt(view, op, round_msgs);
            if matches!(last, AttemptResult::Committed(_)) {
                return last;
            }
        }
        last
    }

    fn pow_phase(&mut self, round_msgs: &mut u64) -> Result<bool, SimError> {
        while !self.acl.has_final_proposal(&self.acl_cfg) {
            self.mine_one()?;
        }
        let candidate = self.acl.next_candidate(&self.acl_cfg)?;
        let result = self.run_views(|_, _| Operation::pow(candidate), round_msgs);
        if let AttemptResult::Committed(_) = result {
            self.acl.confirm_delivery(candidate.height);
            self.committed_pow += 1;
            Ok(true)
        } else {
            self.rounds_failed += 1;
            self.trace_line("liveness-stall", "session", &format!("round:{}", self.round));
            Ok(false)
        }
    }

    fn build_tx_batch(&self) -> Vec<(Transaction, u64)> {
        let mut batch = Vec::new();
        let mut bytes = 0u64;
        for pending in &self.mempool {
            let tx_bytes = {
                use crate::chain::CanonicalBytes;
                pending.tx.canonical_bytes().len() as u64
            };
            if bytes + tx_bytes > self.cfg.block_bytes {
                break;
            }
            bytes += tx_bytes;
            batch.push((pending.tx, pending.submit_round));
        }
        batch
    }

    fn tx_phase(&mut self, round_msgs: &mut u64) {
        for _ in 0..self.cfg.max_tx_blocks_per_round {
            self.workload.generate(
                self.clock,
                self.round,
                &mut self.rng_workload,
                &mut self.mempool,
                &mut self.trace,
            );
            let batch = self.build_tx_batch();
            if batch.is_empty() {
                break;
            }
            let txs: Vec<Transaction> = batch.iter().map(|(tx, _)| *tx).collect();
            let result = self.run_views(
                move |_, primary| {
                    Operation::tx(TxBlock { txs: txs.clone(), proposer: primary })
                },
                round_msgs,
            );
            match result {
                AttemptResult::Committed(summary) => {
                    self.committed_tx_blocks += 1;
                    self.committed_txs += batch.len() as u64;
                    self.last_tx_commit_time = self.clock;
                    for (_, submit_round) in &batch {
                        let delay = self.round - submit_round;
                        self.max_commit_delay =
                            Some(self.max_commit_delay.map_or(delay, |d| d.max(delay)));
                    }
                    for _ in 0..batch.len() {
                        self.mempool.pop_front();
                    }
                    if let Some(summary) = summary {
                        for (identity, amount) in summary.payouts {
                            if let Some(&idx) = self.agent_index.get(&identity) {
                                self.utilities[idx] += amount as i128;
                            }
                        }
                    }
                }
                _ => break,
            }
        }
    }

    fn com_phase(&mut self, round_msgs: &mut u64) {
        if !self.correct_state().com_block_due() {
            return;
        }
        let n = self.csl_cfg.n_csl;
        let members = self.correct_state().latest_pow_identities(n);
        let epoch = self.correct_state().epoch() + 1;
        let com = ComBlock { members: members.clone(), epoch };
        let result = self.run_views(move |_, _| Operation::com(com.clone()), round_msgs);
        if let AttemptResult::Committed(_) = result {
            self.committed_com += 1;
            let committee = self.correct_state().committee().to_vec();
            let window = self.correct_state().latest_pow_identities(n);
            let byz_seats = committee
                .iter()
                .filter(|id| {
                    matches!(self.agents[self.agent_index[id]].agent_type, AgentType::Byzantine)
                })
                .count();
            let member_list =
                committee.iter().map(|m| m.to_string()).collect::<Vec<_>>().join(",");
            self.trace_line("rotate", "session", &format!("epoch:{epoch},members:{member_list}"));
            self.epoch_committees.push(committee);
            self.epoch_pow_windows.push(window);
            self.byzantine_seats_per_epoch.push(byz_seats);
        }
    }

    fn run(&mut self) -> Result<(), SimError> {
        for round in 0..self.cfg.duration_rounds {
            self.round = round;
            let mut round_msgs = 0u64;
            self.pow_phase(&mut round_msgs)?;
            if self.cfg.tx_rate > 0.0 {
                self.tx_phase(&mut round_msgs);
            }
            self.com_phase(&mut round_msgs);
            self.messages_per_round.push(round_msgs);
        }
        Ok(())
    }

    fn finish(self) -> SessionOutcome {
        let correct: Vec<(Identity, Digest)> = self
            .agents
            .iter()
            .zip(&self.replicas)
            .filter(|(a, _)| !matches!(a.agent_type, AgentType::Byzantine))
            .map(|(a, r)| (a.id, r.state_digest()))
            .collect();
        let digests_agree = correct.windows(2).all(|w| w[0].1 == w[1].1);
        let safety_ok = self.invalid_commits == 0 && digests_agree;

        let n = self.cfg.n_csl as u64;
        let liveness_window = n + 10;
        let cutoff = self.cfg.duration_rounds.saturating_sub(liveness_window);
        let stale_pending = self.mempool.iter().filter(|p| p.submit_round <= cutoff).count();
        let delay_ok = self.max_commit_delay.is_none_or(|d| d <= liveness_window);
        let liveness_ok = self.rounds_failed == 0 && stale_pending == 0 && delay_ok;

        let avg_tx_block_time = if self.committed_tx_blocks > 0 {
            self.last_tx_commit_time / self.committed_tx_blocks as f64
        } else {
            0.0
        };
        let tps = if self.clock > 0.0 { self.committed_txs as f64 / self.clock } else { 0.0 };

        let per_agent_utility: BTreeMap<Identity, i64> = self
            .agents
            .iter()
            .zip(&self.utilities)
            .map(|(a, &u)| (a.id, u.clamp(i64::MIN as i128, i64::MAX as i128) as i64))
            .collect();

        let metrics = SessionMetrics {
            agent_ids: self.agents.iter().map(|a| a.id).collect(),
            committed_pow_blocks: self.committed_pow,
            committed_tx_blocks: self.committed_tx_blocks,
            committed_com_blocks: self.committed_com,
            committed_txs: self.committed_txs,
            invalid_blocks_committed: self.invalid_commits,
            view_changes: self.view_changes,
            rounds_failed: self.rounds_failed,
            dropped_votes: self.dropped_votes,
            messages_per_round: self.messages_per_round,
            avg_tx_block_time,
            tps,
            sim_time: self.clock,
            per_agent_utility,
            replica_digests: correct,
            safety_ok,
            liveness_ok,
            max_commit_delay_rounds: self.max_commit_delay,
            uncommitted_txs: self.mempool.len() as u64,
            epoch_committees: self.epoch_committees,
            epoch_pow_windows: self.epoch_pow_windows,
            byzantine_seats_per_epoch: self.byzantine_seats_per_epoch,
            miner_blocks: self.miner_blocks,
            final_com_chain_len: self.replicas[self.first_correct].com_chain.len() as u64,
            final_snapshot: self.replicas[self.first_correct].snapshot_text(),
        };
        SessionOutcome { metrics, trace: self.trace }
    }
}

/// Run one full protocol session. Deterministic in `config.seed`.
pub fn run_session(config: &SessionConfig) -> Result<SessionOutcome, SimError> {
    let mut session = Session::new(config.clone())?;
    session.run()?;
    Ok(session.finish())
}

/// Run many independent sessions; parallel when the `parallel` feature is
/// enabled, with order-preserving results either way.
pub fn run_battery(configs: &[SessionConfig]) -> Result<Vec<SessionOutcome>, SimError> {
    let results = exec::map_collect(configs, run_session);
    results.into_iter().collect()
}

/// Per-miner block share with a 3-sigma binomial acceptance band.
#[derive(Clone, Debug)]
pub struct FairnessEntry {
    pub miner: Identity,
    pub alpha: f64,
    pub blocks: u64,
    pub share: f64,
    pub sigma: f64,
    pub within_3_sigma: bool,
}

#[derive(Clone, Debug)]
pub struct FairnessReport {
    pub total_blocks: u64,
    /// Below 100 blocks the report is flagged insufficient, not failed.
    pub sufficient_sample: bool,
    pub entries: Vec<FairnessEntry>,
}

impl FairnessReport {
    pub fn all_within_bounds(&self) -> bool {
        self.entries.iter().all(|e| e.within_3_sigma)
    }
}

pub fn fairness_report(
    blocks_by_miner: &BTreeMap<Identity, u64>,
    alphas: &BTreeMap<Identity, f64>,
) -> FairnessReport {
    let total: u64 = blocks_by_miner.values().sum();
    let sufficient = total >= 100;
    let entries = alphas
        .iter()
        .map(|(&miner, &alpha)| {
            let blocks = blocks_by_miner.get(&miner).copied().unwrap_or(0);
            let share = if total > 0 { blocks as f64 / total as f64 } else { 0.0 };
            let sigma = (total as f64 * alpha * (1.0 - alpha)).sqrt();
            let within = !sufficient
                || (blocks as f64 - alpha * total as f64).abs() <= 3.0 * sigma.max(f64::EPSILON);
            FairnessEntry { miner, alpha, blocks, share, sigma, within_3_sigma: within }
        })
        .collect();
    FairnessReport { total_blocks: total, sufficient_sample: sufficient, entries }
}

pub const METRICS_CSV_SCHEMA: &str = "# schema=session-metrics.v1";

pub fn metrics_csv(config: &SessionConfig, m: &SessionMetrics) -> String {
    let mut out = String::new();
    out.push_str(METRICS_CSV_SCHEMA);
    out.push('\n');
    out.push_str(
        "seed,n_csl,duration_rounds,committed_pow_blocks,committed_tx_blocks,committed_com_blocks,\
         committed_txs,invalid_blocks_committed,view_changes,rounds_failed,avg_messages_per_round,\
         avg_tx_block_time_s,tps,sim_time_s,max_commit_delay_rounds,uncommitted_txs,safety_ok,liveness_ok\n",
    );
    let avg_msgs = if m.messages_per_round.is_empty() {
        0.0
    } else {
        m.messages_per_round.iter().sum::<u64>() as f64 / m.messages_per_round.len() as f64
    };
    out.push_str(&format!(
        "{},{},{},{},{},{},{},{},{},{},{:.3},{:.6},{:.6},{:.6},{},{},{},{}\n",
        config.seed,
        config.n_csl,
        config.duration_rounds,
        m.committed_pow_blocks,
        m.committed_tx_blocks,
        m.committed_com_blocks,
        m.committed_txs,
        m.invalid_blocks_committed,
        m.view_changes,
        m.rounds_failed,
        avg_msgs,
        m.avg_tx_block_time,
        m.tps,
        m.sim_time,
        m.max_commit_delay_rounds.map_or(-1i64, |d| d as i64),
        m.uncommitted_txs,
        m.safety_ok,
        m.liveness_ok,
    ));
    out
}

pub const AGENTS_CSV_SCHEMA: &str = "# schema=agent-utilities.v1";

pub fn agent_utilities_csv(m: &SessionMetrics) -> String {
    let mut out = String::new();
    out.push_str(AGENTS_CSV_SCHEMA);
    out.push('\n');
    out.push_str("agent,realized_utility\n");
    for (id, utility) in &m.per_agent_utility {
        out.push_str(&format!("{id},{utility}\n"));
    }
    out
}
