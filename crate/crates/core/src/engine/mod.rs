//! Full-system simulation: shards running block consensus, the cross-shard
//! commit pipeline (or the two-phase-commit baseline), adaptive shard
//! management, state gossip and dispute resolution, all on one
//! deterministic event loop.

mod dispute;
mod mgmt;
pub mod trace;
mod twopc;

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::consensus::NodeId;
use crate::ledger::{
    AccountId, Amount, Digest, Directory, DomainTag, Encoder, Entry, InputLeg, LedgerError, ObjectKind, OutputLeg,
    ShardId, ShardMap, ShardState, SimTime, Transaction, MILLIS, SECONDS,
};
use crate::shardmgr::{MgmtHistory, Shard, ShardMgrConfig, ShardStatus};
use crate::simnet::adversary::{Action, Adversary, AdversaryKeys, AdversarySpec, Behavior, Hook};
use crate::simnet::cluster::{run_cluster, ClusterConfig};
use crate::simnet::net::NetModel;
use crate::simnet::sched::Scheduler;
use crate::simnet::workload::{WorkloadGen, WorkloadSpec};
use crate::syncdispute::{
    DecisionRecord, DisputeBoard, DisputeConfig, Effect, EffectLog, GossipNode, PenaltyLedger, StateAccess,
};
use crate::thresh::{PartialSignature, ShareRegistry, SignerId};
use crate::xshard::{
    build_batch, check_deadline, collect_and_combine, commit_outputs, outputs_done, process_intra, validate_input,
    AbortReason, Committee, CommitteeFaults, CrossPhase, CrossTxRecord, EscrowBook, GlobalDecision, Refusal,
};

pub use trace::{AbortKind, MgmtTag, Trace, TraceRecord, TxHandle};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Adaptive shards + threshold-signature commit via a global committee.
    DynaShard,
    /// Static shards + coordinator-led two-phase commit with blocking locks.
    Baseline,
}

/// Initial account placement.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Assignment {
    /// Contiguous id ranges (account creation order).
    Range,
    /// Round-robin by id.
    Hash,
}

/// When shard management evaluates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MgmtTrigger {
    Disabled,
    /// At every epoch boundary.
    Epoch,
    /// After every `n_c` committed transactions.
    EveryTxs(u64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FaultSpec {
    /// The view-0 leader of every committee instance is crashed.
    pub committee_leader_crash: bool,
    /// Probability that a block holding output commits crashes part-way.
    pub commit_crash_prob: f64,
    pub crash_recovery: SimTime,
}

impl Default for FaultSpec {
    fn default() -> Self {
        FaultSpec {
            committee_leader_crash: false,
            commit_crash_prob: 0.0,
            crash_recovery: 200 * MILLIS,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EngineConfig {
    pub mode: Mode,
    pub shards: u32,
    pub validators_per_shard: usize,
    pub assignment: Assignment,
    pub workload: WorkloadSpec,
    pub net: NetModel,
    /// Operations per shard block.
    pub block_size: usize,
    /// Execution time of one operation.
    pub exec_per_op: SimTime,
    pub view_timeout: Option<SimTime>,
    pub mgmt: ShardMgrConfig,
    pub trigger: MgmtTrigger,
    /// Cross-shard transactions per committee instance.
    pub batch_size: usize,
    pub lock_timeout: SimTime,
    pub committee_fraction: f64,
    /// Pause while state moves to new shards.
    pub reconfig_delay: SimTime,
    pub gossip_interval: SimTime,
    pub dispute: DisputeConfig,
    pub adversary: AdversarySpec,
    /// Stop injecting conflicting twins after this many (0 = unlimited).
    pub max_twins: u64,
    pub faults: FaultSpec,
    /// Baseline: first retry delay after a timed-out attempt (doubles).
    pub retry_backoff: SimTime,
    /// Hard stop.
    pub horizon: SimTime,
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            mode: Mode::DynaShard,
            shards: 4,
            validators_per_shard: 8,
            assignment: Assignment::Range,
            workload: WorkloadSpec::default(),
            net: NetModel::default(),
            block_size: 100,
            exec_per_op: MILLIS,
            view_timeout: None,
            mgmt: ShardMgrConfig::default(),
            trigger: MgmtTrigger::Epoch,
            batch_size: 64,
            lock_timeout: 2 * SECONDS,
            committee_fraction: 0.1,
            reconfig_delay: 50 * MILLIS,
            gossip_interval: 100 * MILLIS,
            dispute: DisputeConfig::default(),
            adversary: AdversarySpec::none(),
            max_twins: 0,
            faults: FaultSpec::default(),
            retry_backoff: 50 * MILLIS,
            horizon: 600 * SECONDS,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("invalid configuration: {0}")]
    Invalid(&'static str),
    #[error(transparent)]
    Mgmt(#[from] crate::shardmgr::MgmtError),
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m| Err(ConfigError::Invalid(m));
        if self.shards == 0 {
            return bad("at least one shard is required");
        }
        if self.validators_per_shard < self.mgmt.min_validators.max(1) {
            return bad("validators_per_shard is below min_validators");
        }
        if self.workload.account_count < self.shards as u64 {
            return bad("every shard needs at least one account");
        }
        if self.block_size == 0 || self.batch_size == 0 {
            return bad("block_size and batch_size must be positive");
        }
        if !(0.0..=1.0).contains(&self.workload.cross_ratio) {
            return bad("cross_ratio must be in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.net.drop_rate) {
            return bad("drop_rate must be in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.faults.commit_crash_prob) {
            return bad("commit_crash_prob must be in [0, 1]");
        }
        if self.lock_timeout == 0 || self.gossip_interval == 0 {
            return bad("timeouts and intervals must be positive");
        }
        self.mgmt.validate()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TxStatus {
    Pending,
    Committed(SimTime),
    Aborted(SimTime, AbortKind),
    /// Committed, then invalidated by dispute resolution.
    RolledBack(SimTime),
}

/// Engine-side view of one submitted transaction.
#[derive(Clone, Debug)]
pub struct TxEntry {
    pub tx: Transaction,
    pub submitted: SimTime,
    pub status: TxStatus,
    /// For an injected conflicting twin: the transaction it copies.
    pub twin_of: Option<TxHandle>,
    /// An input shard signed it against the rules.
    pub colluded: bool,
    /// Global commit position (cross-shard, DynaShard).
    pub position: Option<u64>,
    gen: u32,
    routed: bool,
    in_flight: bool,
    /// Routed past a reconfiguration hold to unblock a drain.
    rescued: bool,
    /// Shards that still owe work for this transaction.
    pending_at: BTreeSet<ShardId>,
    record: Option<CrossTxRecord>,
    out_left: BTreeSet<ShardId>,
    // Baseline two-phase commit.
    attempt: u32,
    votes: BTreeMap<ShardId, bool>,
    decided: Option<bool>,
    finish_left: BTreeSet<ShardId>,
    retries: u32,
}

impl TxEntry {
    pub fn is_cross(&self) -> bool {
        self.tx.input_shards().union(&self.tx.output_shards()).count() > 1
    }

    pub fn is_final(&self) -> bool {
        !matches!(self.status, TxStatus::Pending)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Op {
    Intra(TxHandle, u32),
    Validate(TxHandle, u32),
    Release(TxHandle),
    Commit(TxHandle),
    Prepare(TxHandle, u32),
    Decide(TxHandle, u32, bool),
    Finish(TxHandle, u32, bool),
}

impl Op {
    fn handle(&self) -> TxHandle {
        match *self {
            Op::Intra(h, _)
            | Op::Validate(h, _)
            | Op::Release(h)
            | Op::Commit(h)
            | Op::Prepare(h, _)
            | Op::Decide(h, _, _)
            | Op::Finish(h, _, _) => h,
        }
    }
}

/// Runtime state of one shard.
#[derive(Clone, Debug)]
struct ShardRt {
    s: Shard,
    queue: VecDeque<Op>,
    /// Ops waiting for an earlier nonce of the account, by account.
    parked: BTreeMap<AccountId, Vec<Op>>,
    running: Option<Vec<Op>>,
    /// Block interrupted by a crash: ops and the index to resume from.
    resume: Option<(Vec<Op>, usize)>,
    down: bool,
    escrows: EscrowBook,
    applied: BTreeSet<(Digest, u32)>,
    /// Routed, unresolved transactions touching this shard.
    routed: BTreeSet<TxHandle>,
    /// In-flight transactions this shard still owes work to.
    inflight: BTreeSet<TxHandle>,
    dirty: BTreeSet<AccountId>,
    ep_processed: u64,
    ep_busy: SimTime,
    client_fifo: SimTime,
    blocks: u64,
    // Baseline locks.
    locks: BTreeMap<AccountId, (TxHandle, u32)>,
    lock_wait: BTreeMap<AccountId, VecDeque<Op>>,
}

impl ShardRt {
    fn new(s: Shard) -> Self {
        ShardRt {
            s,
            queue: VecDeque::new(),
            parked: BTreeMap::new(),
            running: None,
            resume: None,
            down: false,
            escrows: EscrowBook::new(),
            applied: BTreeSet::new(),
            routed: BTreeSet::new(),
            inflight: BTreeSet::new(),
            dirty: BTreeSet::new(),
            ep_processed: 0,
            ep_busy: 0,
            client_fifo: 0,
            blocks: 0,
            locks: BTreeMap::new(),
            lock_wait: BTreeMap::new(),
        }
    }

    fn is_active(&self) -> bool {
        self.s.status == ShardStatus::Active
    }

    fn flush_tree(&mut self) {
        let dirty = core::mem::take(&mut self.dirty);
        for a in dirty {
            self.s.sync_leaf(a);
        }
    }
}

#[derive(Clone, Debug)]
enum Ev {
    Arrival,
    Deliver {
        shard: ShardId,
        op: Op,
    },
    BlockDone {
        shard: ShardId,
    },
    Partial {
        h: TxHandle,
        gen: u32,
        from: ShardId,
        msg: Result<PartialSignature, Refusal>,
    },
    Deadline {
        h: TxHandle,
        gen: u32,
    },
    AtCommittee {
        h: TxHandle,
    },
    GlobalDone,
    CommitteeRetry,
    Epoch,
    ReconfigDone {
        shards: Vec<ShardId>,
    },
    Recover {
        shard: ShardId,
    },
    Gossip,
    Vote2pc {
        h: TxHandle,
        attempt: u32,
        from: ShardId,
        yes: bool,
    },
    Timeout2pc {
        h: TxHandle,
        attempt: u32,
    },
    Retry {
        h: TxHandle,
    },
}

/// Counters summarising a run.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EngineStats {
    pub submitted: u64,
    pub committed: u64,
    pub aborted: u64,
    pub rolled_back: u64,
    pub cross_submitted: u64,
    pub twins_injected: u64,
    /// Twins an input shard signed against the rules.
    pub twins_approved: u64,
    pub blocks: u64,
    pub batches: u64,
    pub max_committee_view: u64,
    pub splits: u64,
    pub merges: u64,
    pub crashes: u64,
    pub challenges: u64,
    pub retries: u64,
    pub gossip_rounds: u64,
    pub max_shards: usize,
}

/// Transactions held back while a shard they touch is reconfigured,
/// indexed by the spends they carry.
#[derive(Default)]
struct Held {
    txs: BTreeMap<TxHandle, Vec<(AccountId, u64)>>,
    spends: BTreeSet<(AccountId, u64, TxHandle)>,
}

impl Held {
    fn insert(&mut self, h: TxHandle, tx: &Transaction) {
        self.remove(h);
        let spends: Vec<(AccountId, u64)> = tx.inputs.iter().map(|l| (l.account, l.nonce)).collect();
        for &(a, n) in &spends {
            self.spends.insert((a, n, h));
        }
        self.txs.insert(h, spends);
    }

    fn remove(&mut self, h: TxHandle) {
        for (a, n) in self.txs.remove(&h).unwrap_or_default() {
            self.spends.remove(&(a, n, h));
        }
    }

    fn contains(&self, h: TxHandle) -> bool {
        self.txs.contains_key(&h)
    }

    fn is_empty(&self) -> bool {
        self.txs.is_empty()
    }

    fn handles(&self) -> impl Iterator<Item = TxHandle> + '_ {
        self.txs.keys().copied()
    }

    fn take(&mut self) -> Vec<TxHandle> {
        self.spends.clear();
        core::mem::take(&mut self.txs).into_keys().collect()
    }

    /// Held transactions spending from `a` below nonce `n`.
    fn earlier(&self, a: AccountId, n: u64) -> Vec<TxHandle> {
        let mut out: Vec<TxHandle> = self
            .spends
            .range((a, 0, TxHandle(0))..(a, n, TxHandle(0)))
            .map(|&(_, _, h)| h)
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// Lookup of the shard state currently homing an account.
struct Homes<'a> {
    dir: &'a Directory,
    shards: &'a mut BTreeMap<ShardId, ShardRt>,
}

impl StateAccess for Homes<'_> {
    fn state_for(&mut self, a: AccountId) -> Option<&mut ShardState> {
        let s = self.dir.home(a)?;
        let rt = self.shards.get_mut(&s)?;
        rt.dirty.insert(a);
        Some(&mut rt.s.state)
    }
}

pub struct Engine {
    cfg: EngineConfig,
    sched: Scheduler<Ev>,
    rng: ChaCha8Rng,
    /// Separate stream so gossip never perturbs the timing of consensus.
    gossip_rng: ChaCha8Rng,
    trace: Trace,
    dir: Directory,
    shards: BTreeMap<ShardId, ShardRt>,
    next_shard: u32,
    registry: ShareRegistry,
    adversary: Adversary,
    workload: WorkloadGen,
    txs: BTreeMap<TxHandle, TxEntry>,
    next_handle: u64,
    unresolved: u64,
    /// Shard operations sent but not yet delivered.
    in_transit: u64,
    held: Held,
    // Committee.
    committee: Committee,
    pool: VecDeque<TxHandle>,
    committee_busy: Option<(Vec<TxHandle>, GlobalDecision)>,
    batch_seq: u64,
    position: u64,
    // Management.
    epoch: u64,
    mgmt_epoch: u64,
    history: MgmtHistory,
    reconfigs: Vec<mgmt::Reconfig>,
    commits_since_eval: u64,
    last_eval: SimTime,
    // Sync and disputes.
    gossip: BTreeMap<ShardId, GossipNode>,
    versions: BTreeMap<ShardId, u64>,
    round: u64,
    board: DisputeBoard,
    penalties: PenaltyLedger,
    effects: EffectLog,
    decisions: BTreeMap<Digest, DecisionRecord>,
    first_spend: BTreeMap<(AccountId, u64), (u64, Digest)>,
    by_id: BTreeMap<Digest, TxHandle>,
    challenge_tx: BTreeMap<u64, TxHandle>,
    initial_total: u128,
    stats: EngineStats,
    violations: Vec<String>,
    finished: bool,
}

impl Engine {
    pub fn new(cfg: EngineConfig) -> Result<Self, ConfigError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut dir = Directory::new();
        let n = cfg.shards;
        let accounts = cfg.workload.account_count;
        let home = |a: u64| match cfg.assignment {
            Assignment::Range => ShardId(((a * n as u64) / accounts) as u32),
            Assignment::Hash => ShardId((a % n as u64) as u32),
        };
        let mut states: BTreeMap<ShardId, ShardState> = BTreeMap::new();
        for a in 0..accounts {
            let s = home(a);
            dir.assign(AccountId(a), s);
            states
                .entry(s)
                .or_default()
                .insert_account(AccountId(a), cfg.workload.initial_balance, 0);
        }
        let mut shards = BTreeMap::new();
        let mut by_shard: BTreeMap<ShardId, Vec<NodeId>> = BTreeMap::new();
        for i in 0..n {
            let id = ShardId(i);
            let validators: Vec<NodeId> = (0..cfg.validators_per_shard as u32)
                .map(|v| NodeId(i * cfg.validators_per_shard as u32 + v))
                .collect();
            by_shard.insert(id, validators.clone());
            let st = states.remove(&id).unwrap_or_default();
            shards.insert(id, ShardRt::new(Shard::new(id, validators, st)));
        }
        let registry = ShareRegistry::keygen(0x5348_4152_4453, n as usize, 1, cfg.seed)
            .map_err(|_| ConfigError::Invalid("shard key generation failed"))?;
        let corrupt_signers = cfg.adversary.corrupt_shards.iter().map(|s| SignerId(s.0));
        let keys = AdversaryKeys::issue(&registry, corrupt_signers);
        let adversary = Adversary::new(cfg.adversary.clone(), keys, cfg.net.delta);
        let committee = Committee::sample_safe(
            &by_shard,
            cfg.committee_fraction,
            0,
            &cfg.adversary.corrupt_nodes,
            &mut rng,
        );
        let mut penalties = PenaltyLedger::new(cfg.dispute.slash_fraction, cfg.dispute.reputation_decay);
        let mut gossip = BTreeMap::new();
        for i in 0..n {
            penalties.enroll(ShardId(i), stake_for(cfg.validators_per_shard));
            gossip.insert(ShardId(i), GossipNode::new());
        }
        let mut workload_spec = cfg.workload.clone();
        workload_spec.seed ^= cfg.seed.rotate_left(32);
        let initial_total = shards.values().map(|r: &ShardRt| r.s.state.total()).sum();
        let mut e = Engine {
            sched: Scheduler::new(),
            gossip_rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x474f_5353_4950),
            rng,
            trace: Trace::new(),
            dir,
            shards,
            next_shard: n,
            registry,
            adversary,
            workload: WorkloadGen::new(workload_spec),
            txs: BTreeMap::new(),
            next_handle: 0,
            unresolved: 0,
            in_transit: 0,
            held: Held::default(),
            committee,
            pool: VecDeque::new(),
            committee_busy: None,
            batch_seq: 0,
            position: 0,
            epoch: 0,
            mgmt_epoch: 0,
            history: MgmtHistory::default(),
            reconfigs: Vec::new(),
            commits_since_eval: 0,
            last_eval: 0,
            gossip,
            versions: BTreeMap::new(),
            round: 0,
            board: DisputeBoard::new(cfg.dispute.clone()),
            penalties,
            effects: EffectLog::new(),
            decisions: BTreeMap::new(),
            first_spend: BTreeMap::new(),
            by_id: BTreeMap::new(),
            challenge_tx: BTreeMap::new(),
            initial_total,
            stats: EngineStats {
                max_shards: n as usize,
                ..EngineStats::default()
            },
            violations: Vec::new(),
            finished: false,
            cfg,
        };
        if let Some(t) = e.workload.peek_time() {
            e.sched.schedule(t, Ev::Arrival);
        }
        e.sched.schedule(e.cfg.mgmt.epoch_length, Ev::Epoch);
        if e.cfg.mode == Mode::DynaShard {
            e.sched.schedule(e.cfg.gossip_interval, Ev::Gossip);
        }
        Ok(e)
    }

    /// Run until every submitted transaction is resolved and the workload
    /// is exhausted, or until `horizon`.
    pub fn run(&mut self) -> &Trace {
        let until = self.cfg.horizon;
        self.run_until(until)
    }

    pub fn run_until(&mut self, until: SimTime) -> &Trace {
        while !self.finished {
            let Some(ev) = self.sched.pop_until(until) else {
                break;
            };
            self.handle(ev.payload);
            if !self.reconfigs.is_empty() {
                self.progress_reconfigs();
            }
            if self.quiescent() {
                self.finished = true;
            }
        }
        for rt in self.shards.values_mut() {
            rt.flush_tree();
        }
        &self.trace
    }

    fn quiescent(&self) -> bool {
        self.workload.exhausted()
            && self.unresolved == 0
            && self.held.is_empty()
            && self.reconfigs.is_empty()
            && self.board.open_ids().is_empty()
            && self.committee_busy.is_none()
            && self.in_transit == 0
            && self
                .shards
                .values()
                .all(|rt| rt.running.is_none() && rt.resume.is_none() && rt.queue.iter().all(|op| self.is_stale(op)))
    }

    pub fn now(&self) -> SimTime {
        self.sched.now()
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn stats(&self) -> &EngineStats {
        &self.stats
    }

    /// Internal invariant violations observed during the run.
    pub fn violations(&self) -> &[String] {
        &self.violations
    }

    pub fn txs(&self) -> impl Iterator<Item = (TxHandle, &TxEntry)> {
        self.txs.iter().map(|(&h, e)| (h, e))
    }

    pub fn tx(&self, h: TxHandle) -> Option<&TxEntry> {
        self.txs.get(&h)
    }

    pub fn directory(&self) -> &Directory {
        &self.dir
    }

    pub fn initial_total(&self) -> u128 {
        self.initial_total
    }

    /// States of live shards.
    pub fn states(&self) -> BTreeMap<ShardId, &ShardState> {
        self.shards.iter().map(|(&id, rt)| (id, &rt.s.state)).collect()
    }

    pub fn shard_ids(&self) -> Vec<ShardId> {
        self.shards.keys().copied().collect()
    }

    pub fn validators(&self, s: ShardId) -> Option<&[NodeId]> {
        self.shards.get(&s).map(|rt| rt.s.validators.as_slice())
    }

    /// Current Merkle root of a shard.
    pub fn root(&self, s: ShardId) -> Option<Digest> {
        self.shards.get(&s).map(|rt| rt.s.tree.root())
    }

    /// Balance held in escrow across all shards.
    pub fn escrowed(&self) -> u128 {
        self.shards.values().map(|rt| rt.escrows.total()).sum()
    }

    /// Σ balances + escrow.
    pub fn total_value(&self) -> u128 {
        self.shards
            .values()
            .map(|rt| rt.s.state.total() + rt.escrows.total())
            .sum()
    }

    pub fn balance(&self, a: AccountId) -> Amount {
        self.dir
            .home(a)
            .and_then(|s| self.shards.get(&s))
            .map_or(0, |rt| rt.s.state.balance(a))
    }

    /// Number of output legs of the cross-shard transaction `h` applied so
    /// far. Intra-shard transactions apply within one block and are not
    /// tracked here.
    pub fn applied_outputs(&self, h: TxHandle) -> usize {
        let Some(e) = self.txs.get(&h) else { return 0 };
        let id = e.tx.id();
        (0..e.tx.outputs.len() as u32)
            .filter(|&i| self.shards.values().any(|rt| rt.applied.contains(&(id, i))))
            .count()
    }

    /// Distinct (account, nonce) pairs spent by more than one transaction
    /// that is currently committed.
    pub fn committed_double_spends(&self) -> u64 {
        let mut seen: BTreeMap<(AccountId, u64), u32> = BTreeMap::new();
        for e in self.txs.values() {
            if matches!(e.status, TxStatus::Committed(_)) {
                for l in &e.tx.inputs {
                    *seen.entry((l.account, l.nonce)).or_insert(0) += 1;
                }
            }
        }
        seen.values().filter(|&&c| c > 1).count() as u64
    }

    pub fn penalties(&self) -> &PenaltyLedger {
        &self.penalties
    }

    pub fn committee(&self) -> &Committee {
        &self.committee
    }

    pub fn gossip_view(&self, s: ShardId) -> Option<&crate::syncdispute::GlobalStateView> {
        self.gossip.get(&s).map(|g| &g.view)
    }

    fn violation(&mut self, msg: impl Into<String>) {
        self.violations.push(msg.into());
    }

    // ----- event dispatch -------------------------------------------------

    fn handle(&mut self, ev: Ev) {
        match ev {
            Ev::Arrival => self.on_arrival(),
            Ev::Deliver { shard, op } => self.on_deliver(shard, op),
            Ev::BlockDone { shard } => self.on_block_done(shard),
            Ev::Partial { h, gen, from, msg } => self.on_partial(h, gen, from, msg),
            Ev::Deadline { h, gen } => self.on_deadline(h, gen),
            Ev::AtCommittee { h } => {
                self.pool.push_back(h);
                self.try_start_committee();
            }
            Ev::GlobalDone => self.on_global_done(),
            Ev::CommitteeRetry => self.try_start_committee(),
            Ev::Epoch => self.on_epoch(),
            Ev::ReconfigDone { shards } => self.on_reconfig_done(shards),
            Ev::Recover { shard } => self.on_recover(shard),
            Ev::Gossip => self.on_gossip(),
            Ev::Vote2pc { h, attempt, from, yes } => self.on_vote_2pc(h, attempt, from, yes),
            Ev::Timeout2pc { h, attempt } => self.on_timeout_2pc(h, attempt),
            Ev::Retry { h } => self.route(h),
        }
    }

    /// One-way inter-shard hop.
    fn hop(&mut self) -> SimTime {
        self.cfg.net.stable_delay(&mut self.rng)
    }

    // ----- submission and routing ----------------------------------------

    fn on_arrival(&mut self) {
        let now = self.now();
        if let Some(tx) = self.workload.next_tx(&self.dir) {
            let h = self.submit(tx, None);
            self.maybe_inject_twin(h);
        }
        if let Some(t) = self.workload.peek_time() {
            self.sched.schedule(t.max(now), Ev::Arrival);
        }
    }

    fn submit(&mut self, tx: Transaction, twin_of: Option<TxHandle>) -> TxHandle {
        let h = TxHandle(self.next_handle);
        self.next_handle += 1;
        self.unresolved += 1;
        self.stats.submitted += 1;
        let cross = tx.input_shards().union(&tx.output_shards()).count() > 1;
        if cross {
            self.stats.cross_submitted += 1;
        }
        self.trace.push(TraceRecord::Submit {
            t: self.now(),
            h,
            tx: tx.id(),
            cross,
        });
        self.txs.insert(
            h,
            TxEntry {
                tx,
                submitted: self.now(),
                status: TxStatus::Pending,
                twin_of,
                colluded: false,
                position: None,
                gen: 0,
                routed: false,
                in_flight: false,
                rescued: false,
                pending_at: BTreeSet::new(),
                record: None,
                out_left: BTreeSet::new(),
                attempt: 0,
                votes: BTreeMap::new(),
                decided: None,
                finish_left: BTreeSet::new(),
                retries: 0,
            },
        );
        self.route(h);
        h
    }

    fn maybe_inject_twin(&mut self, h: TxHandle) {
        if !self.adversary.spec().has(Behavior::DoubleSpendInject) {
            return;
        }
        if self.cfg.max_twins > 0 && self.stats.twins_injected >= self.cfg.max_twins {
            return;
        }
        let tx = self.txs[&h].tx.clone();
        let input_shard = tx.inputs[0].shard;
        let collusion = self.adversary.spec().has(Behavior::CollusionApprove);
        if collusion && !self.adversary.controls_shard(input_shard) {
            return;
        }
        // Pay a different account in another shard when possible.
        let shards: Vec<ShardId> = self.dir.shards().collect();
        let others: Vec<ShardId> = shards.iter().copied().filter(|&s| s != input_shard).collect();
        let out_shard = if others.is_empty() {
            input_shard
        } else {
            others[self.rng.random_range(0..others.len())]
        };
        let n = self.dir.count_in(out_shard);
        let Some(receiver) = self.dir.nth_in(out_shard, self.rng.random_range(0..n.max(1))) else {
            return;
        };
        let alt_input = if collusion { None } else { others.first().copied() };
        let action = self.adversary.inject(Hook::TxSubmit {
            tx: &tx,
            alt_receiver: (out_shard, receiver),
            alt_input_shard: alt_input,
        });
        if let Action::DoubleSpend(twin) = action {
            self.stats.twins_injected += 1;
            self.submit(twin, Some(h));
        }
    }

    /// Re-derive leg shards from the directory.
    fn rebuild(&self, tx: &Transaction) -> Transaction {
        let home = |a: AccountId, s: ShardId| self.dir.home(a).unwrap_or(s);
        let inputs: Vec<InputLeg> = tx
            .inputs
            .iter()
            .map(|l| InputLeg {
                shard: home(l.account, l.shard),
                ..*l
            })
            .collect();
        let outputs: Vec<OutputLeg> = tx
            .outputs
            .iter()
            .map(|l| OutputLeg {
                shard: home(l.account, l.shard),
                ..*l
            })
            .collect();
        if inputs == tx.inputs && outputs == tx.outputs {
            return tx.clone();
        }
        Transaction::new(inputs, outputs, tx.created_at).expect("same amounts stay balanced")
    }

    fn tx_shards(tx: &Transaction) -> BTreeSet<ShardId> {
        tx.input_shards().union(&tx.output_shards()).copied().collect()
    }

    /// Send a submitted (or held) transaction to its shards.
    fn route(&mut self, h: TxHandle) {
        self.route_to(h, false);
    }

    /// Route `h` along the directory. Transactions touching a shard that
    /// is being reconfigured are held unless `urgent`, in which case any
    /// live shard is acceptable.
    fn route_to(&mut self, h: TxHandle, urgent: bool) {
        let now = self.now();
        let Some(e) = self.txs.get(&h) else { return };
        if e.is_final() {
            return;
        }
        // Twins that claim a foreign input shard keep their (false) claim;
        // everything else follows the directory.
        let tx = if e.twin_of.is_some() && !e.routed {
            e.tx.clone()
        } else {
            self.rebuild(&e.tx)
        };
        let shards = Self::tx_shards(&tx);
        if shards
            .iter()
            .any(|s| self.shards.get(s).is_none_or(|rt| !rt.is_active() && !urgent))
        {
            if shards.iter().any(|s| !self.shards.contains_key(s)) && e.twin_of.is_some() && !e.routed {
                // A forged claim on a shard that no longer exists.
                self.finish_tx(h, TxStatus::Aborted(now, AbortKind::Refused));
                return;
            }
            self.held.insert(h, &tx);
            if !urgent {
                self.rescue_waiters_of(h);
            }
            return;
        }
        self.held.remove(h);
        let id = tx.id();
        let e = self.txs.get_mut(&h).expect("present");
        e.rescued |= urgent;
        if e.tx.id() != id {
            self.by_id.remove(&e.tx.id());
        }
        e.tx = tx.clone();
        e.gen += 1;
        e.routed = true;
        let gen = e.gen;
        self.by_id.insert(id, h);
        for s in &shards {
            self.shards.get_mut(s).expect("active").routed.insert(h);
        }
        if shards.len() == 1 {
            let s = *shards.iter().next().expect("one shard");
            self.client_send(s, Op::Intra(h, gen));
            return;
        }
        match self.cfg.mode {
            Mode::DynaShard => {
                let deadline = now + self.cfg.lock_timeout;
                let e = self.txs.get_mut(&h).expect("present");
                e.record = Some(CrossTxRecord::new(tx.clone(), deadline));
                e.out_left = tx.output_shards();
                self.sched.schedule(deadline, Ev::Deadline { h, gen });
                for s in tx.input_shards() {
                    self.client_send(s, Op::Validate(h, gen));
                }
            }
            Mode::Baseline => self.start_2pc(h),
        }
    }

    /// Client-to-shard message over a FIFO channel.
    fn client_send(&mut self, s: ShardId, op: Op) {
        let d = self.hop();
        let rt = self.shards.get_mut(&s).expect("routed to a live shard");
        let at = (self.sched.now() + d).max(rt.client_fifo + 1);
        rt.client_fifo = at;
        self.in_transit += 1;
        self.sched.schedule(at, Ev::Deliver { shard: s, op });
    }

    fn shard_send(&mut self, s: ShardId, op: Op) {
        let d = self.hop();
        self.in_transit += 1;
        self.sched.schedule_in(d, Ev::Deliver { shard: s, op });
    }

    fn is_stale(&self, op: &Op) -> bool {
        match *op {
            Op::Intra(h, g) | Op::Validate(h, g) => self.txs.get(&h).is_none_or(|e| e.gen != g || e.is_final()),
            Op::Prepare(h, a) => self
                .txs
                .get(&h)
                .is_none_or(|e| e.attempt != a || e.decided.is_some() || e.is_final()),
            Op::Decide(h, a, _) => self.txs.get(&h).is_none_or(|e| e.attempt != a),
            _ => false,
        }
    }

    fn on_deliver(&mut self, s: ShardId, op: Op) {
        self.in_transit -= 1;
        if self.is_stale(&op) {
            return;
        }
        if !self.shards.contains_key(&s) {
            // The shard was reconfigured while the op was on the wire.
            if let Op::Release(h) = op {
                let homes: BTreeSet<ShardId> = self.txs[&h]
                    .tx
                    .inputs
                    .iter()
                    .filter_map(|l| self.dir.home(l.account))
                    .collect();
                for t in homes {
                    self.shards.get_mut(&t).expect("homes are live").queue.push_back(op);
                    self.try_start(t);
                }
            } else {
                self.violation(alloc::format!("op for retired shard {s:?}"));
            }
            return;
        }
        let rt = self.shards.get_mut(&s).expect("live");
        rt.queue.push_back(op);
        self.try_start(s);
    }

    // ----- shard blocks ---------------------------------------------------

    fn try_start(&mut self, s: ShardId) {
        let bs = self.cfg.block_size;
        let mut ops = Vec::new();
        {
            let Some(rt) = self.shards.get(&s) else { return };
            if rt.running.is_some() || rt.down || rt.queue.is_empty() {
                return;
            }
        }
        self.prioritise_draining(s);
        while ops.len() < bs {
            let Some(op) = self.shards.get_mut(&s).expect("live").queue.pop_front() else {
                break;
            };
            if !self.is_stale(&op) {
                ops.push(op);
            }
        }
        if ops.is_empty() {
            return;
        }
        for op in &ops {
            if let Op::Validate(h, _) = *op {
                self.mark_in_flight(h);
            }
        }
        let mut enc = Encoder::new(ObjectKind::Block);
        enc.u32(s.0).u64(self.shards[&s].blocks);
        for op in &ops {
            enc.u64(op.handle().0);
        }
        let digest = enc.hash(DomainTag::Msg);
        let n = self.shards[&s].s.validators.len();
        let latency = self.block_consensus(s, n, digest);
        let duration = latency + self.cfg.exec_per_op * ops.len() as SimTime;
        let now = self.now();
        let rt = self.shards.get_mut(&s).expect("live");
        rt.blocks += 1;
        rt.ep_busy += duration * n as SimTime;
        rt.s.busy += duration * n as SimTime;
        let count = ops.len() as u32;
        rt.running = Some(ops);
        self.stats.blocks += 1;
        self.trace.push(TraceRecord::Block {
            t: now,
            shard: s,
            ops: count,
            latency,
        });
        self.sched.schedule(now + duration, Ev::BlockDone { shard: s });
    }

    /// Move operations of transactions that keep a reconfiguration from
    /// draining to the front of the queue (keeping their relative order).
    fn prioritise_draining(&mut self, s: ShardId) {
        let draining: BTreeSet<ShardId> = self.draining_shards();
        if draining.is_empty() {
            return;
        }
        let rt = self.shards.get_mut(&s).expect("live");
        let queue = core::mem::take(&mut rt.queue);
        let (mut first, rest): (VecDeque<Op>, VecDeque<Op>) = queue.into_iter().partition(|op| {
            self.txs
                .get(&op.handle())
                .is_some_and(|e| Self::tx_shards(&e.tx).iter().any(|x| draining.contains(x)))
        });
        first.extend(rest);
        self.shards.get_mut(&s).expect("live").queue = first;
    }

    /// Intra-shard consensus on one block among the shard's validators.
    fn block_consensus(&mut self, s: ShardId, n: usize, digest: Digest) -> SimTime {
        let cfg = ClusterConfig {
            n,
            group_id: 0x0B10_0000_0000 | s.0 as u64,
            net: self.cfg.net.clone(),
            view_timeout: self.cfg.view_timeout,
            adversary: AdversarySpec::none(),
            instances: 1,
            horizon: 60 * SECONDS,
            seed: self.rng.random(),
            proposal: Some(digest),
        };
        let r = run_cluster(&cfg);
        if !r.all_honest_decided || r.decisions.values().any(|(d, _)| *d != digest) {
            self.violation(alloc::format!("shard {s:?} block consensus failed"));
        }
        r.finished_at
    }

    fn mark_in_flight(&mut self, h: TxHandle) {
        let Some(e) = self.txs.get_mut(&h) else { return };
        if e.in_flight {
            return;
        }
        e.in_flight = true;
        let shards = Self::tx_shards(&e.tx);
        e.pending_at = shards.clone();
        for s in shards {
            if let Some(rt) = self.shards.get_mut(&s) {
                rt.inflight.insert(h);
            }
        }
    }

    /// `s` owes no more work for `h`.
    fn release_shard(&mut self, h: TxHandle, s: ShardId) {
        if let Some(e) = self.txs.get_mut(&h) {
            e.pending_at.remove(&s);
        }
        if let Some(rt) = self.shards.get_mut(&s) {
            rt.inflight.remove(&h);
        }
    }

    fn on_block_done(&mut self, s: ShardId) {
        let Some(ops) = self.shards.get_mut(&s).and_then(|rt| rt.running.take()) else {
            return;
        };
        self.execute(s, ops, 0, true);
        self.try_start(s);
    }

    fn execute(&mut self, s: ShardId, ops: Vec<Op>, from: usize, may_crash: bool) {
        let crash_at =
            if may_crash && self.cfg.faults.commit_crash_prob > 0.0 && ops.iter().any(|o| matches!(o, Op::Commit(_))) {
                if self.rng.random::<f64>() < self.cfg.faults.commit_crash_prob {
                    ops.iter().position(|o| matches!(o, Op::Commit(_)))
                } else {
                    None
                }
            } else {
                None
            };
        for i in from..ops.len() {
            if crash_at == Some(i) {
                if let Op::Commit(h) = ops[i] {
                    // Apply a prefix of this commit's legs, then go down.
                    let legs = self.txs[&h].tx.outputs.iter().filter(|l| l.shard == s).count();
                    let limit = self.rng.random_range(0..legs.max(1));
                    self.exec_commit(s, h, Some(limit));
                }
                let now = self.now();
                let rt = self.shards.get_mut(&s).expect("live");
                rt.down = true;
                rt.resume = Some((ops, i));
                self.stats.crashes += 1;
                self.trace.push(TraceRecord::Crash { t: now, shard: s });
                self.sched
                    .schedule(now + self.cfg.faults.crash_recovery, Ev::Recover { shard: s });
                return;
            }
            self.exec_op(s, ops[i]);
        }
    }

    fn on_recover(&mut self, s: ShardId) {
        let now = self.now();
        let Some(rt) = self.shards.get_mut(&s) else { return };
        rt.down = false;
        let resume = rt.resume.take();
        self.trace.push(TraceRecord::Recover { t: now, shard: s });
        // Replay the decided block from the interrupted operation; commits
        // are idempotent per leg.
        if let Some((ops, i)) = resume {
            self.execute(s, ops, i, false);
        }
        self.try_start(s);
    }

    fn count_op(&mut self, s: ShardId, tx: &Transaction) {
        let rt = self.shards.get_mut(&s).expect("live");
        rt.ep_processed += 1;
        rt.s.processed += 1;
        let shards = Self::tx_shards(tx);
        for &x in &shards {
            if x != s || shards.len() == 1 {
                *rt.s.access.entry(x).or_insert(0) += 1;
            }
        }
        for a in tx.accounts() {
            if rt.s.state.contains(a) {
                *rt.s.account_weight.entry(a).or_insert(0) += 1;
            }
        }
    }

    fn exec_op(&mut self, s: ShardId, op: Op) {
        if self.is_stale(&op) {
            return;
        }
        match op {
            Op::Intra(h, _) => self.exec_intra(s, h, op),
            Op::Validate(h, _) => self.exec_validate(s, h, op),
            Op::Release(h) => self.exec_release(s, h),
            Op::Commit(h) => {
                self.exec_commit(s, h, None);
            }
            Op::Prepare(h, a) => self.exec_prepare(s, h, a, op),
            Op::Decide(h, a, commit) => self.exec_decide(s, h, a, commit),
            Op::Finish(h, a, commit) => self.exec_finish(s, h, a, commit),
        }
    }

    fn park(&mut self, s: ShardId, a: AccountId, op: Op) {
        self.shards
            .get_mut(&s)
            .expect("live")
            .parked
            .entry(a)
            .or_default()
            .push(op);
        self.rescue(a, op);
    }

    /// `op` waits for an earlier spend from `a`. If that spend is held
    /// back by a reconfiguration that is itself waiting for `op`'s
    /// transaction to finish, the earlier held spends from `a` are routed
    /// right away.
    fn rescue(&mut self, a: AccountId, op: Op) {
        if self.held.is_empty() {
            return;
        }
        let Some(e) = self.txs.get(&op.handle()) else { return };
        if !e.in_flight && !matches!(op, Op::Release(_)) {
            return;
        }
        let draining = self.draining_shards();
        if !e.rescued && !Self::tx_shards(&e.tx).iter().any(|s| draining.contains(s)) {
            return;
        }
        let Some(wanted) = e.tx.inputs.iter().find(|l| l.account == a).map(|l| l.nonce) else {
            return;
        };
        for h in self.held.earlier(a, wanted) {
            self.route_to(h, true);
        }
    }

    /// `h` was just held back; operations already parked behind one of
    /// its spends may need it routed anyway.
    fn rescue_waiters_of(&mut self, h: TxHandle) {
        let inputs: Vec<AccountId> = self.txs[&h].tx.inputs.iter().map(|l| l.account).collect();
        for a in inputs {
            let Some(home) = self.dir.home(a) else { continue };
            let waiting: Vec<Op> = self
                .shards
                .get(&home)
                .and_then(|rt| rt.parked.get(&a))
                .cloned()
                .unwrap_or_default();
            for op in waiting {
                if !self.held.contains(h) {
                    return;
                }
                self.rescue(a, op);
            }
        }
    }

    /// The nonce of `a` advanced: parked ops for it get another chance.
    fn unpark(&mut self, s: ShardId, a: AccountId) {
        let rt = self.shards.get_mut(&s).expect("live");
        if let Some(ops) = rt.parked.remove(&a) {
            for op in ops.into_iter().rev() {
                rt.queue.push_front(op);
            }
        }
    }

    fn exec_intra(&mut self, s: ShardId, h: TxHandle, op: Op) {
        let now = self.now();
        let tx = self.txs[&h].tx.clone();
        if self.cfg.mode == Mode::Baseline {
            let rt = &self.shards[&s];
            if let Some(a) = tx.accounts().into_iter().find(|a| rt.locks.contains_key(a)) {
                self.shards
                    .get_mut(&s)
                    .expect("live")
                    .lock_wait
                    .entry(a)
                    .or_default()
                    .push_back(op);
                return;
            }
        }
        self.count_op(s, &tx);
        let rt = self.shards.get_mut(&s).expect("live");
        match process_intra(&tx, &mut rt.s.state) {
            Ok(effects) => {
                for (entry, _) in &effects {
                    rt.dirty.insert(entry.account());
                }
                if self.cfg.mode == Mode::DynaShard {
                    for &(entry, _) in &effects {
                        self.effects.record(tx.id(), Effect { entry });
                    }
                    self.log_intra(s, h, &tx);
                }
                let inputs: Vec<AccountId> = tx.inputs.iter().map(|l| l.account).collect();
                for a in inputs {
                    self.unpark(s, a);
                }
                self.shards.get_mut(&s).expect("live").routed.remove(&h);
                self.finish_tx(h, TxStatus::Committed(now));
            }
            Err(LedgerError::NonceGap { account, .. }) => self.park(s, account, op),
            Err(_) => {
                self.shards.get_mut(&s).expect("live").routed.remove(&h);
                self.burn_nonces(s, &tx, op);
                self.finish_tx(h, TxStatus::Aborted(now, AbortKind::Rejected));
            }
        }
    }

    fn exec_validate(&mut self, s: ShardId, h: TxHandle, op: Op) {
        let tx = self.txs[&h].tx.clone();
        let validating = self.txs[&h]
            .record
            .as_ref()
            .is_some_and(|r| r.phase == CrossPhase::Validating);
        if !validating {
            // Aborted while this op was queued; nothing was escrowed here.
            self.release_shard(h, s);
            return;
        }
        self.count_op(s, &tx);
        let signer = self.registry.signer(SignerId(s.0)).expect("enrolled shard");
        let corrupt = self.adversary.controls_shard(s);
        let rt = self.shards.get_mut(&s).expect("live");
        let mut result = validate_input(s, &tx, &mut rt.s.state, &mut rt.escrows, false, true, &signer);
        if corrupt
            && self.adversary.spec().has(Behavior::CollusionApprove)
            && matches!(result, Err(Refusal::Ledger(LedgerError::NonceReplay { .. })))
        {
            // A colluding shard signs the replay anyway.
            result = validate_input(s, &tx, &mut rt.s.state, &mut rt.escrows, false, false, &signer);
            if result.is_ok() {
                self.stats.twins_approved += 1;
                self.txs.get_mut(&h).expect("present").colluded = true;
            }
        }
        let gen = self.txs[&h].gen;
        let collector = *tx.output_shards().iter().next().expect("outputs");
        match result {
            Ok(partial) => {
                let rt = self.shards.get_mut(&s).expect("live");
                let mut touched = Vec::new();
                for l in tx.inputs.iter().filter(|l| l.shard == s) {
                    rt.dirty.insert(l.account);
                    touched.push(l.account);
                    self.effects.record(
                        tx.id(),
                        Effect {
                            entry: Entry::Debit {
                                account: l.account,
                                amount: l.amount,
                                nonce: l.nonce,
                            },
                        },
                    );
                }
                if let Some(r) = self.txs.get_mut(&h).and_then(|e| e.record.as_mut()) {
                    r.note_locked(s);
                }
                for a in touched {
                    self.unpark(s, a);
                }
                let msg = match self.adversary.inject(Hook::PartialSign {
                    signer: SignerId(s.0),
                    message: tx.id(),
                }) {
                    Action::Silent => None,
                    Action::Partial(p) => Some(p),
                    _ => Some(partial),
                };
                if let Some(p) = msg {
                    let d = self.hop();
                    self.sched.schedule_in(
                        d,
                        Ev::Partial {
                            h,
                            gen,
                            from: s,
                            msg: Ok(p),
                        },
                    );
                }
            }
            Err(r) if r.is_nonce_gap() => {
                let a = tx
                    .inputs
                    .iter()
                    .find(|l| l.shard == s)
                    .map(|l| l.account)
                    .expect("input here");
                self.park(s, a, op);
            }
            Err(r) => {
                let d = self.hop();
                self.sched.schedule_in(
                    d,
                    Ev::Partial {
                        h,
                        gen,
                        from: s,
                        msg: Err(r),
                    },
                );
            }
        }
        let _ = collector;
    }

    fn on_partial(&mut self, h: TxHandle, gen: u32, from: ShardId, msg: Result<PartialSignature, Refusal>) {
        let now = self.now();
        let Some(e) = self.txs.get_mut(&h) else { return };
        if e.gen != gen {
            return;
        }
        let Some(rec) = e.record.as_mut() else { return };
        match msg {
            Ok(p) => {
                if collect_and_combine(rec, from, p, &self.registry) && rec.phase == CrossPhase::Collected {
                    let d = self.hop();
                    self.sched.schedule_in(d, Ev::AtCommittee { h });
                }
            }
            Err(refusal) => {
                let release = rec.abort(AbortReason::Refused(refusal));
                if rec.phase == CrossPhase::Aborted {
                    self.abort_cross(h, release, AbortKind::Refused, now);
                }
            }
        }
    }

    fn on_deadline(&mut self, h: TxHandle, gen: u32) {
        let now = self.now();
        let Some(e) = self.txs.get_mut(&h) else { return };
        if e.gen != gen {
            return;
        }
        let Some(rec) = e.record.as_mut() else { return };
        if let Some(release) = check_deadline(rec, now) {
            self.abort_cross(h, release, AbortKind::Timeout, now);
        }
    }

    /// Abort an uncollected cross-shard transaction and release escrow.
    fn abort_cross(&mut self, h: TxHandle, release: BTreeSet<ShardId>, kind: AbortKind, now: SimTime) {
        let shards = Self::tx_shards(&self.txs[&h].tx);
        for s in shards {
            if !release.contains(&s) {
                self.release_shard(h, s);
            }
            if let Some(rt) = self.shards.get_mut(&s) {
                rt.routed.remove(&h);
            }
        }
        // Every input shard burns the nonces; locked ones also refund.
        let inputs = self.txs[&h].tx.input_shards();
        for s in release.union(&inputs) {
            self.shard_send(*s, Op::Release(h));
        }
        self.finish_tx(h, TxStatus::Aborted(now, kind));
    }

    fn exec_release(&mut self, s: ShardId, h: TxHandle) {
        let id = self.txs[&h].tx.id();
        let tx = self.txs[&h].tx.clone();
        self.count_op(s, &tx);
        let rt = self.shards.get_mut(&s).expect("live");
        if let Some(esc) = rt.escrows.release(&id, &mut rt.s.state) {
            for l in esc.legs {
                rt.dirty.insert(l.account);
            }
        }
        if self.burn_nonces(s, &tx, Op::Release(h)) {
            self.release_shard(h, s);
        }
    }

    /// An aborted transaction still uses up its nonces, so later
    /// transactions of the same sender are not stuck behind a gap. Each
    /// leg is burned as soon as its predecessor nonce is used; while some
    /// leg still waits, `op` is parked on that account and false returned.
    fn burn_nonces(&mut self, s: ShardId, tx: &Transaction, op: Op) -> bool {
        let rt = self.shards.get_mut(&s).expect("live");
        let mut advanced = Vec::new();
        let mut waiting = None;
        for l in &tx.inputs {
            if !rt.s.state.contains(l.account) {
                continue;
            }
            let cur = rt.s.state.nonce(l.account);
            if cur >= l.nonce {
                continue;
            }
            if cur + 1 < l.nonce {
                waiting.get_or_insert(l.account);
                continue;
            }
            rt.s.state.set_nonce(l.account, l.nonce);
            rt.dirty.insert(l.account);
            advanced.push(l.account);
        }
        if let Some(a) = waiting {
            rt.parked.entry(a).or_default().push(op);
        }
        for a in advanced {
            self.unpark(s, a);
        }
        waiting.is_none()
    }

    // ----- committee ------------------------------------------------------

    fn try_start_committee(&mut self) {
        if self.committee_busy.is_some() || self.pool.is_empty() {
            return;
        }
        let take = self.pool.len().min(self.cfg.batch_size);
        let handles: Vec<TxHandle> = self.pool.drain(..take).collect();
        let candidates = handles
            .iter()
            .filter_map(|h| {
                let e = &self.txs[h];
                let r = e.record.as_ref()?;
                Some((r.tx.clone(), r.sigma.clone()?))
            })
            .collect();
        let batch = build_batch(candidates, &self.registry);
        let faults = CommitteeFaults {
            leader_crash: self.cfg.faults.committee_leader_crash,
            corrupt_positions: self
                .committee
                .members
                .iter()
                .enumerate()
                .filter(|(_, m)| self.cfg.adversary.corrupt_nodes.contains(m))
                .map(|(i, _)| i as u32)
                .collect(),
            behaviors: self.cfg.adversary.behaviors.clone(),
        };
        let seq = self.batch_seq;
        self.batch_seq += 1;
        let seed = self.rng.random();
        match crate::xshard::global_order(
            &self.committee,
            batch,
            &self.cfg.net,
            self.cfg.view_timeout,
            &faults,
            60 * SECONDS,
            seq,
            seed,
        ) {
            Some(d) => {
                let at = self.now() + d.latency;
                self.committee_busy = Some((handles, d));
                self.sched.schedule(at, Ev::GlobalDone);
            }
            None => {
                for h in handles.into_iter().rev() {
                    self.pool.push_front(h);
                }
                self.sched.schedule_in(SECONDS, Ev::CommitteeRetry);
            }
        }
    }

    fn on_global_done(&mut self) {
        let now = self.now();
        let Some((handles, d)) = self.committee_busy.take() else {
            return;
        };
        self.stats.batches += 1;
        self.stats.max_committee_view = self.stats.max_committee_view.max(d.max_view);
        self.trace.push(TraceRecord::Batch {
            t: now,
            seq: self.batch_seq - 1,
            txs: d.batch.entries.len() as u32,
            excluded: d.batch.excluded.len() as u32,
            view: d.max_view,
            latency: d.latency,
        });
        let included: BTreeSet<Digest> = d.batch.entries.iter().map(|(t, _)| t.id()).collect();
        for h in &handles {
            let id = self.txs[h].tx.id();
            if !included.contains(&id) {
                let rec = self.txs.get_mut(h).and_then(|e| e.record.as_mut()).expect("record");
                // Excluded by the validity filter: abort and refund.
                rec.phase = CrossPhase::Validating;
                let release = rec.abort(AbortReason::Timeout { valid: 0, needed: 0 });
                self.abort_cross(*h, release, AbortKind::Excluded, now);
            }
        }
        for (tx, sigma) in d.batch.entries {
            let h = self.by_id[&tx.id()];
            let pos = self.position;
            self.position += 1;
            let e = self.txs.get_mut(&h).expect("present");
            e.position = Some(pos);
            if let Some(r) = e.record.as_mut() {
                r.phase = CrossPhase::GloballyOrdered;
            }
            let rec = DecisionRecord {
                tx: tx.clone(),
                sigma,
                position: pos,
            };
            self.check_conflicts(h, &rec);
            self.decisions.insert(tx.id(), rec);
            for s in tx.input_shards() {
                if let Some(rt) = self.shards.get_mut(&s) {
                    rt.escrows.consume(&tx.id());
                    rt.routed.remove(&h);
                }
                self.release_shard(h, s);
            }
            for s in tx.output_shards() {
                self.shard_send(s, Op::Commit(h));
            }
        }
        self.try_start_committee();
    }

    fn exec_commit(&mut self, s: ShardId, h: TxHandle, limit: Option<usize>) {
        let now = self.now();
        let tx = self.txs[&h].tx.clone();
        if self.effects.is_rolled_back(&tx.id()) {
            self.release_shard(h, s);
            return;
        }
        if limit.is_none() {
            self.count_op(s, &tx);
        }
        let rt = self.shards.get_mut(&s).expect("live");
        let before: BTreeSet<(Digest, u32)> = rt.applied.clone().into_iter().filter(|x| x.0 == tx.id()).collect();
        commit_outputs(s, &tx, &mut rt.s.state, &mut rt.applied, limit);
        for (i, l) in tx.outputs.iter().enumerate() {
            if l.shard == s && !before.contains(&(tx.id(), i as u32)) && rt.applied.contains(&(tx.id(), i as u32)) {
                rt.dirty.insert(l.account);
                self.effects.record(
                    tx.id(),
                    Effect {
                        entry: Entry::Credit {
                            account: l.account,
                            amount: l.amount,
                        },
                    },
                );
            }
        }
        let rt = self.shards.get_mut(&s).expect("live");
        if !outputs_done(s, &tx, &rt.applied) {
            return;
        }
        rt.routed.remove(&h);
        self.release_shard(h, s);
        let e = self.txs.get_mut(&h).expect("present");
        e.out_left.remove(&s);
        if e.out_left.is_empty() && e.status == TxStatus::Pending {
            if let Some(r) = e.record.as_mut() {
                r.phase = CrossPhase::Committed;
            }
            self.finish_tx(h, TxStatus::Committed(now));
        }
    }

    /// Log a committed intra-shard transaction in the global order, signed
    /// by its shard, so that conflicting spends are detectable across
    /// both commit paths.
    fn log_intra(&mut self, s: ShardId, h: TxHandle, tx: &Transaction) {
        let signer = self.registry.signer(SignerId(s.0)).expect("enrolled shard");
        let eligible: BTreeSet<SignerId> = [SignerId(s.0)].into_iter().collect();
        let Ok(sigma) = self.registry.combine_with(&[signer.sign(tx.id())], 1, Some(&eligible)) else {
            self.violation("own shard signature rejected");
            return;
        };
        let position = self.position;
        self.position += 1;
        self.txs.get_mut(&h).expect("present").position = Some(position);
        let rec = DecisionRecord {
            tx: tx.clone(),
            sigma,
            position,
        };
        self.check_conflicts(h, &rec);
        self.decisions.insert(tx.id(), rec);
    }

    /// Record a final status.
    fn finish_tx(&mut self, h: TxHandle, status: TxStatus) {
        let Some(e) = self.txs.get_mut(&h) else { return };
        if e.is_final() {
            return;
        }
        e.status = status;
        let id = e.tx.id();
        self.unresolved -= 1;
        self.held.remove(h);
        match status {
            TxStatus::Committed(t) => {
                self.stats.committed += 1;
                self.trace.push(TraceRecord::Commit { t, h, tx: id });
                self.on_commit_counted();
            }
            TxStatus::Aborted(t, kind) => {
                self.stats.aborted += 1;
                self.trace.push(TraceRecord::Abort { t, h, tx: id, kind });
            }
            TxStatus::RolledBack(_) | TxStatus::Pending => {}
        }
    }
}

/// Stake of a shard with `validators` members.
fn stake_for(validators: usize) -> u64 {
    100 * validators as u64
}

#[cfg(test)]
mod tests;
