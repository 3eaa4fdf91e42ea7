//! Cross-shard transaction processing: input validation with escrow and
//! partial signatures, threshold combination, committee ordering, and
//! idempotent output execution.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use thiserror::Error;

use crate::consensus::NodeId;
use crate::ledger::{
    Digest, DomainTag, Encoder, Entry, InputLeg, LedgerError, ObjectKind, ShardId, ShardState, SimTime, Transaction,
};
use crate::simnet::adversary::{AdversarySpec, Behavior};
use crate::simnet::cluster::{run_cluster, ClusterConfig};
use crate::simnet::net::NetModel;
use crate::thresh::{PartialSignature, ShareRegistry, Signer, SignerId, ThresholdSignatureValue};

pub use crate::syncdispute::GlobalStateView;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum CrossPhase {
    Validating,
    Collected,
    GloballyOrdered,
    Committed,
    Aborted,
}

/// Why an input shard refused to sign.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Refusal {
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error("shard {0:?} is reconfiguring")]
    ShardBusy(ShardId),
    #[error("shard {0:?} holds no input of this transaction")]
    NotInput(ShardId),
    #[error("input account is not homed in shard {0:?}")]
    WrongShard(ShardId),
}

impl Refusal {
    /// A nonce that is not yet due may become valid once earlier spends of
    /// the same account land.
    pub fn is_nonce_gap(&self) -> bool {
        matches!(self, Refusal::Ledger(LedgerError::NonceGap { .. }))
    }
}

/// Why a cross-shard transaction was aborted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AbortReason {
    Refused(Refusal),
    /// Lock timeout with partial signatures missing or invalid.
    Timeout {
        valid: usize,
        needed: usize,
    },
}

/// Funds removed from input accounts, waiting for the decision.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Escrow {
    pub shard: ShardId,
    pub legs: Vec<InputLeg>,
}

/// Per-shard escrow book.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EscrowBook {
    held: BTreeMap<Digest, Escrow>,
}

impl EscrowBook {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, tx: &Digest) -> Option<&Escrow> {
        self.held.get(tx)
    }

    pub fn len(&self) -> usize {
        self.held.len()
    }

    pub fn is_empty(&self) -> bool {
        self.held.is_empty()
    }

    /// Total escrowed amount.
    pub fn total(&self) -> u128 {
        self.held.values().flat_map(|e| &e.legs).map(|l| l.amount as u128).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Digest, &Escrow)> {
        self.held.iter()
    }

    /// The decision consumed the escrow: the funds are gone for good.
    pub fn consume(&mut self, tx: &Digest) -> Option<Escrow> {
        self.held.remove(tx)
    }

    /// Abort: refund escrowed amounts. Nonces stay consumed, so the same
    /// (account, nonce) can never be validated again.
    pub fn release(&mut self, tx: &Digest, state: &mut ShardState) -> Option<Escrow> {
        let e = self.held.remove(tx)?;
        for l in &e.legs {
            state
                .apply_in_place(
                    &Entry::Credit {
                        account: l.account,
                        amount: l.amount,
                    },
                    false,
                )
                .expect("refund of escrowed funds cannot overflow");
        }
        Some(e)
    }

    fn insert(&mut self, tx: Digest, e: Escrow) {
        self.held.insert(tx, e);
    }
}

/// Validate this shard's inputs of `tx`: check balance, nonce freshness and
/// ownership; on success escrow the funds and return the shard's partial
/// signature over the transaction id. With `nonce_check` off the shard
/// signs whatever it is given (a colluding shard).
pub fn validate_input(
    shard: ShardId,
    tx: &Transaction,
    state: &mut ShardState,
    escrows: &mut EscrowBook,
    busy: bool,
    nonce_check: bool,
    signer: &Signer,
) -> Result<PartialSignature, Refusal> {
    if busy {
        return Err(Refusal::ShardBusy(shard));
    }
    let legs: Vec<InputLeg> = tx.inputs.iter().copied().filter(|l| l.shard == shard).collect();
    if legs.is_empty() {
        return Err(Refusal::NotInput(shard));
    }
    if legs.iter().any(|l| !state.contains(l.account)) {
        return Err(Refusal::WrongShard(shard));
    }
    let entries: Vec<Entry> = legs
        .iter()
        .map(|l| Entry::Debit {
            account: l.account,
            amount: l.amount,
            nonce: l.nonce,
        })
        .collect();
    state.apply_logged(&entries, nonce_check)?;
    escrows.insert(tx.id(), Escrow { shard, legs });
    Ok(signer.sign(tx.id()))
}

/// Coordinator-side record of one cross-shard transaction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CrossTxRecord {
    pub tx: Transaction,
    pub phase: CrossPhase,
    pub partials: BTreeMap<ShardId, PartialSignature>,
    pub sigma: Option<ThresholdSignatureValue>,
    /// (shard, account) pairs whose funds are escrowed for this record.
    pub locks: BTreeSet<(ShardId, crate::ledger::AccountId)>,
    pub deadline: SimTime,
    pub abort: Option<AbortReason>,
}

impl CrossTxRecord {
    pub fn new(tx: Transaction, deadline: SimTime) -> Self {
        CrossTxRecord {
            tx,
            phase: CrossPhase::Validating,
            partials: BTreeMap::new(),
            sigma: None,
            locks: BTreeSet::new(),
            deadline,
            abort: None,
        }
    }

    pub fn input_signers(&self) -> BTreeSet<SignerId> {
        self.tx.input_shards().iter().map(|s| SignerId(s.0)).collect()
    }

    /// Note that `shard` escrowed its inputs.
    pub fn note_locked(&mut self, shard: ShardId) {
        for l in self.tx.inputs.iter().filter(|l| l.shard == shard) {
            self.locks.insert((shard, l.account));
        }
    }

    /// Shards holding escrow for this record.
    pub fn locked_shards(&self) -> BTreeSet<ShardId> {
        self.locks.iter().map(|x| x.0).collect()
    }

    pub fn is_final(&self) -> bool {
        matches!(self.phase, CrossPhase::Committed | CrossPhase::Aborted)
    }

    /// Abort a record that has not been collected yet. Returns the shards
    /// that must release escrow.
    pub fn abort(&mut self, reason: AbortReason) -> BTreeSet<ShardId> {
        if self.phase != CrossPhase::Validating {
            return BTreeSet::new();
        }
        self.phase = CrossPhase::Aborted;
        self.abort = Some(reason);
        let shards = self.locked_shards();
        self.locks.clear();
        shards
    }
}

/// Add one partial; once every input shard has contributed a valid
/// partial over `tx_id`, combine them and move to `Collected`. Partials
/// that fail verification, sign a different message, or come from a
/// non-input shard are dropped. Returns whether the record is collected.
pub fn collect_and_combine(
    record: &mut CrossTxRecord,
    from: ShardId,
    partial: PartialSignature,
    registry: &ShareRegistry,
) -> bool {
    if record.phase != CrossPhase::Validating {
        return record.phase >= CrossPhase::Collected && record.phase != CrossPhase::Aborted;
    }
    let eligible = record.input_signers();
    if partial.signer != SignerId(from.0)
        || !eligible.contains(&partial.signer)
        || partial.message_digest != record.tx.id()
        || !registry.verify_partial(&partial)
    {
        return false;
    }
    record.partials.insert(from, partial);
    if record.partials.len() < eligible.len() {
        return false;
    }
    let parts: Vec<PartialSignature> = record.partials.values().cloned().collect();
    match registry.combine_with(&parts, eligible.len(), Some(&eligible)) {
        Ok(sigma) => {
            record.sigma = Some(sigma);
            record.phase = CrossPhase::Collected;
            true
        }
        Err(_) => false,
    }
}

/// Deadline check: a record still validating at its deadline aborts.
/// Returns the shards that must release escrow.
pub fn check_deadline(record: &mut CrossTxRecord, now: SimTime) -> Option<BTreeSet<ShardId>> {
    if record.phase != CrossPhase::Validating || now < record.deadline {
        return None;
    }
    let needed = record.tx.input_shards().len();
    let valid = record.partials.len();
    Some(record.abort(AbortReason::Timeout { valid, needed }))
}

/// Whether `sigma` is a valid threshold signature on `tx` by all of its
/// input shards.
pub fn sigma_valid(tx: &Transaction, sigma: &ThresholdSignatureValue, registry: &ShareRegistry) -> bool {
    let eligible: BTreeSet<SignerId> = tx.input_shards().iter().map(|s| SignerId(s.0)).collect();
    sigma.message_digest == tx.id() && registry.verify_threshold_with(sigma, eligible.len(), Some(&eligible))
}

/// The validity-filtered, ordered content of one committee batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub entries: Vec<(Transaction, ThresholdSignatureValue)>,
    pub excluded: Vec<Digest>,
    pub digest: Digest,
}

/// Keep the transactions whose Σ verifies (in submission order) and hash
/// the ordered list of (tx_id, Σ).
pub fn build_batch(candidates: Vec<(Transaction, ThresholdSignatureValue)>, registry: &ShareRegistry) -> Batch {
    let mut entries = Vec::new();
    let mut excluded = Vec::new();
    for (tx, sigma) in candidates {
        if sigma_valid(&tx, &sigma, registry) {
            entries.push((tx, sigma));
        } else {
            excluded.push(tx.id());
        }
    }
    let mut e = Encoder::new(ObjectKind::Batch);
    e.len_prefix(entries.len());
    for (tx, sigma) in &entries {
        e.digest(&tx.id()).digest(&sigma.agg).len_prefix(sigma.signer_set.len());
        for s in &sigma.signer_set {
            e.u32(s.0);
        }
    }
    let digest = e.hash(DomainTag::Msg);
    Batch {
        entries,
        excluded,
        digest,
    }
}

/// Global committee: a seeded sample of validators, at least one from
/// every shard.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Committee {
    /// In leader-rotation order.
    pub members: Vec<NodeId>,
    pub epoch: u64,
}

impl Committee {
    pub fn size_for(total_validators: usize, shard_count: usize, fraction: f64) -> usize {
        let frac = libm::ceil(fraction * total_validators as f64) as usize;
        frac.max(4).max(shard_count).min(total_validators)
    }

    pub fn f(&self) -> usize {
        self.members.len().saturating_sub(1) / 3
    }

    /// Stratified sample: one random validator per shard, then uniform
    /// fill from the rest, then a random leader order.
    pub fn sample(shards: &BTreeMap<ShardId, Vec<NodeId>>, fraction: f64, epoch: u64, rng: &mut impl Rng) -> Self {
        let total: usize = shards.values().map(Vec::len).sum();
        let c = Self::size_for(total, shards.len(), fraction);
        let mut members: Vec<NodeId> = Vec::with_capacity(c);
        for vs in shards.values() {
            if let Some(&v) = vs.as_slice().choose(rng) {
                if members.len() < c {
                    members.push(v);
                }
            }
        }
        let mut rest: Vec<NodeId> = shards
            .values()
            .flatten()
            .copied()
            .filter(|v| !members.contains(v))
            .collect();
        rest.shuffle(rng);
        members.extend(rest.into_iter().take(c - members.len()));
        members.shuffle(rng);
        Committee { members, epoch }
    }

    /// Sample until at most `f` members are corrupt (bounded attempts).
    pub fn sample_safe(
        shards: &BTreeMap<ShardId, Vec<NodeId>>,
        fraction: f64,
        epoch: u64,
        corrupt: &BTreeSet<NodeId>,
        rng: &mut impl Rng,
    ) -> Self {
        let mut c = Self::sample(shards, fraction, epoch, rng);
        for _ in 0..64 {
            if c.corrupt_count(corrupt) <= c.f() {
                break;
            }
            c = Self::sample(shards, fraction, epoch, rng);
        }
        c
    }

    pub fn corrupt_count(&self, corrupt: &BTreeSet<NodeId>) -> usize {
        self.members.iter().filter(|m| corrupt.contains(m)).count()
    }
}

/// Fault knobs for one committee instance.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CommitteeFaults {
    /// The view-0 leader is crashed for this instance.
    pub leader_crash: bool,
    /// Committee positions controlled by the adversary.
    pub corrupt_positions: BTreeSet<u32>,
    pub behaviors: BTreeSet<Behavior>,
}

/// The committee's decision for one batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GlobalDecision {
    pub batch: Batch,
    pub latency: SimTime,
    pub max_view: u64,
    pub messages: u64,
}

/// Run one committee consensus instance over `batch`. Every honest member
/// proposes the batch digest; the decision must be that digest at every
/// honest member. `None` means no decision within `horizon` (the batch
/// stays pending).
#[allow(clippy::too_many_arguments)]
pub fn global_order(
    committee: &Committee,
    batch: Batch,
    net: &NetModel,
    view_timeout: Option<SimTime>,
    faults: &CommitteeFaults,
    horizon: SimTime,
    seq: u64,
    seed: u64,
) -> Option<GlobalDecision> {
    let mut corrupt: BTreeSet<NodeId> = faults.corrupt_positions.iter().map(|&p| NodeId(p)).collect();
    let mut behaviors = faults.behaviors.clone();
    if faults.leader_crash {
        corrupt.insert(NodeId(0));
        behaviors.insert(Behavior::Withhold);
    }
    let cfg = ClusterConfig {
        n: committee.members.len(),
        group_id: 0x00C0_0000 ^ committee.epoch,
        net: net.clone(),
        view_timeout,
        adversary: AdversarySpec {
            corrupt_nodes: corrupt,
            behaviors,
            seed,
            ..AdversarySpec::none()
        },
        instances: 1,
        horizon,
        seed: seed ^ seq.rotate_left(17),
        proposal: Some(batch.digest),
    };
    let report = run_cluster(&cfg);
    if !report.all_honest_decided || !report.agreement {
        return None;
    }
    if report.decisions.values().any(|(d, _)| *d != batch.digest) {
        return None;
    }
    Some(GlobalDecision {
        batch,
        latency: report.finished_at,
        max_view: report.max_view,
        messages: report.messages_delivered,
    })
}

/// Apply this shard's output legs of a decided transaction. Legs already
/// applied (tracked in `applied` by (tx, leg index)) are skipped, so
/// duplicate delivery and replay after a crash are harmless. `limit`
/// stops after that many new legs (used to inject a crash mid-commit).
/// Returns the number of legs newly applied.
pub fn commit_outputs(
    shard: ShardId,
    tx: &Transaction,
    state: &mut ShardState,
    applied: &mut BTreeSet<(Digest, u32)>,
    limit: Option<usize>,
) -> usize {
    let mut n = 0;
    for (i, leg) in tx.outputs.iter().enumerate() {
        if leg.shard != shard || applied.contains(&(tx.id(), i as u32)) {
            continue;
        }
        if limit.is_some_and(|l| n >= l) {
            break;
        }
        state
            .apply_in_place(
                &Entry::Credit {
                    account: leg.account,
                    amount: leg.amount,
                },
                false,
            )
            .expect("credit of a validated transfer cannot overflow");
        applied.insert((tx.id(), i as u32));
        n += 1;
    }
    n
}

/// Whether every output leg in `shard` has been applied.
pub fn outputs_done(shard: ShardId, tx: &Transaction, applied: &BTreeSet<(Digest, u32)>) -> bool {
    tx.outputs
        .iter()
        .enumerate()
        .all(|(i, l)| l.shard != shard || applied.contains(&(tx.id(), i as u32)))
}

/// Execute an intra-shard transaction after shard consensus: all entries
/// or none. Returns the prior nonce of every entry for the effect log.
pub fn process_intra(tx: &Transaction, state: &mut ShardState) -> Result<Vec<(Entry, u64)>, LedgerError> {
    let mut entries: Vec<Entry> = Vec::with_capacity(tx.inputs.len() + tx.outputs.len());
    for l in &tx.inputs {
        if !state.contains(l.account) {
            return Err(LedgerError::UnknownAccount(l.account));
        }
        entries.push(Entry::Debit {
            account: l.account,
            amount: l.amount,
            nonce: l.nonce,
        });
    }
    for l in &tx.outputs {
        if !state.contains(l.account) {
            return Err(LedgerError::UnknownAccount(l.account));
        }
        entries.push(Entry::Credit {
            account: l.account,
            amount: l.amount,
        });
    }
    let priors = state.apply_logged(&entries, true)?;
    Ok(entries.into_iter().zip(priors).collect())
}
