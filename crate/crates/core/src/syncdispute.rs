//! State synchronisation by gossip of Merkle roots, and stake-weighted
//! dispute resolution with rollback and slashing.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::Rng;
use thiserror::Error;

use crate::ledger::{
    AccountId, Amount, Digest, DomainTag, Encoder, Entry, ObjectKind, ShardId, ShardState, Transaction,
};
use crate::merkle::{verify, MerkleProof};
use crate::thresh::{PartialSignature, ShareRegistry, Signer, SignerId, ThresholdSignatureValue};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Verdict {
    Valid,
    Invalid,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SyncError {
    #[error("version {got} from {origin} is not newer than {have}")]
    StaleVersion { origin: ShardId, have: u64, got: u64 },
    #[error("proof in update from {0} does not verify")]
    BadProof(ShardId),
    #[error("update from {0} is not signed by its origin")]
    BadSignature(ShardId),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DisputeError {
    #[error("a challenge needs evidence")]
    EmptyEvidence,
    #[error("evidence does not check out")]
    InconsistentEvidence,
    #[error("unknown challenge {0}")]
    UnknownChallenge(u64),
    #[error("voting window of challenge {0} is closed")]
    WindowClosed(u64),
    #[error("voting window of challenge {0} is still open")]
    WindowOpen(u64),
    #[error("{0} may not vote on this challenge")]
    NotEligible(ShardId),
    #[error("transaction is not committed (or already rolled back)")]
    UnknownTx,
    #[error("rollback blocked: {0:?} no longer holds the credited funds")]
    RollbackBlocked(AccountId),
}

/// Latest root per shard as seen by one participant.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GlobalStateView {
    pub roots: BTreeMap<ShardId, (Digest, u64)>,
    /// Bumped on every adopted change.
    pub version: u64,
}

impl GlobalStateView {
    pub fn root(&self, s: ShardId) -> Option<Digest> {
        self.roots.get(&s).map(|x| x.0)
    }

    /// Drop shards that no longer exist.
    pub fn retain_shards(&mut self, live: &BTreeSet<ShardId>) {
        let before = self.roots.len();
        self.roots.retain(|s, _| live.contains(s));
        if self.roots.len() != before {
            self.version += 1;
        }
    }
}

/// A signed root announcement with the proofs of the accounts it changed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GossipMsg {
    pub origin: ShardId,
    pub root: Digest,
    pub version: u64,
    pub proofs: Vec<MerkleProof>,
    pub signature: PartialSignature,
}

impl GossipMsg {
    fn body_digest(origin: ShardId, root: &Digest, version: u64, proofs: &[MerkleProof]) -> Digest {
        let mut e = Encoder::new(ObjectKind::Gossip);
        e.u32(origin.0).digest(root).u64(version).len_prefix(proofs.len());
        for p in proofs {
            e.digest(&p.key).digest(&p.value).len_prefix(p.path.len());
        }
        e.hash(DomainTag::Msg)
    }

    /// Sign an announcement with the origin shard's key.
    pub fn signed(origin: ShardId, root: Digest, version: u64, proofs: Vec<MerkleProof>, signer: &Signer) -> Self {
        let d = Self::body_digest(origin, &root, version, &proofs);
        GossipMsg {
            origin,
            root,
            version,
            proofs,
            signature: signer.sign(d),
        }
    }

    pub fn check(&self, registry: &ShareRegistry) -> Result<(), SyncError> {
        let d = Self::body_digest(self.origin, &self.root, self.version, &self.proofs);
        if self.signature.signer != SignerId(self.origin.0)
            || self.signature.message_digest != d
            || !registry.verify_partial(&self.signature)
        {
            return Err(SyncError::BadSignature(self.origin));
        }
        if self.proofs.iter().any(|p| !verify(&self.root, p)) {
            return Err(SyncError::BadProof(self.origin));
        }
        Ok(())
    }
}

/// One shard's gossip endpoint.
#[derive(Clone, Debug, Default)]
pub struct GossipNode {
    pub view: GlobalStateView,
    latest: BTreeMap<ShardId, GossipMsg>,
    /// Rejected announcements, kept as evidence.
    pub rejected: Vec<GossipMsg>,
}

impl GossipNode {
    pub fn new() -> Self {
        Self::default()
    }

    /// Validate and adopt an announcement. `Ok(true)` if it changed the view.
    pub fn receive(&mut self, msg: &GossipMsg, registry: &ShareRegistry) -> Result<bool, SyncError> {
        if let Some(&(_, have)) = self.view.roots.get(&msg.origin) {
            if msg.version <= have {
                return Err(SyncError::StaleVersion {
                    origin: msg.origin,
                    have,
                    got: msg.version,
                });
            }
        }
        if let Err(e) = msg.check(registry) {
            self.rejected.push(msg.clone());
            return Err(e);
        }
        self.view.roots.insert(msg.origin, (msg.root, msg.version));
        self.view.version += 1;
        self.latest.insert(msg.origin, msg.clone());
        Ok(true)
    }

    /// Everything this node would push to a peer.
    pub fn outgoing(&self) -> impl Iterator<Item = &GossipMsg> {
        self.latest.values()
    }

    pub fn forget(&mut self, s: ShardId) {
        self.latest.remove(&s);
        if self.view.roots.remove(&s).is_some() {
            self.view.version += 1;
        }
    }
}

/// Number of peers each shard pushes to per round: `⌈log2 n⌉ + 1`.
pub fn gossip_fanout(n: usize) -> usize {
    if n <= 1 {
        return 1;
    }
    (usize::BITS - (n - 1).leading_zeros()) as usize + 1
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RoundStats {
    pub messages: u64,
    pub adopted: u64,
    pub rejected: u64,
}

/// One synchronous push round: every node sends its full set of latest
/// announcements to `fanout` random peers; receivers adopt newer versions
/// that verify.
pub fn gossip_round(
    nodes: &mut BTreeMap<ShardId, GossipNode>,
    fanout: usize,
    registry: &ShareRegistry,
    rng: &mut impl Rng,
) -> RoundStats {
    let ids: Vec<ShardId> = nodes.keys().copied().collect();
    let mut deliveries: Vec<(ShardId, GossipMsg)> = Vec::new();
    for (i, &from) in ids.iter().enumerate() {
        let peers = ids.len() - 1;
        if peers == 0 {
            break;
        }
        let k = fanout.min(peers);
        let msgs: Vec<GossipMsg> = nodes[&from].outgoing().cloned().collect();
        for j in sample(rng, peers, k).into_iter() {
            let to = ids[if j >= i { j + 1 } else { j }];
            for m in &msgs {
                deliveries.push((to, m.clone()));
            }
        }
    }
    let mut stats = RoundStats::default();
    for (to, m) in deliveries {
        stats.messages += 1;
        match nodes.get_mut(&to).map(|n| n.receive(&m, registry)) {
            Some(Ok(true)) => stats.adopted += 1,
            Some(Err(SyncError::BadProof(_) | SyncError::BadSignature(_))) => stats.rejected += 1,
            _ => {}
        }
    }
    stats
}

/// A committed cross-shard decision as logged by a shard.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecisionRecord {
    pub tx: Transaction,
    pub sigma: ThresholdSignatureValue,
    /// Position in the global commit order.
    pub position: u64,
}

// Evidence is built once per challenge, so the size gap costs little.
#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DisputeEvidence {
    /// Two committed transactions spending the same (account, nonce).
    ConflictingDecisions {
        first: DecisionRecord,
        second: DecisionRecord,
    },
    /// An account record proven against a root.
    StateProof { root: Digest, proof: MerkleProof },
}

impl DisputeEvidence {
    fn self_consistent(&self) -> bool {
        match self {
            DisputeEvidence::ConflictingDecisions { first, second } => {
                first.tx.id() != second.tx.id() && shared_spend(&first.tx, &second.tx).is_some()
            }
            DisputeEvidence::StateProof { root, proof } => verify(root, proof),
        }
    }
}

/// The (account, nonce) two transactions both spend, if any.
pub fn shared_spend(a: &Transaction, b: &Transaction) -> Option<(AccountId, u64)> {
    a.inputs.iter().find_map(|x| {
        b.inputs
            .iter()
            .find(|y| y.account == x.account && y.nonce == x.nonce)
            .map(|_| (x.account, x.nonce))
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vote {
    pub shard: ShardId,
    pub verdict: Verdict,
    pub stake: u64,
    pub reputation: f64,
    pub evidence_attached: Vec<DisputeEvidence>,
    pub signature: PartialSignature,
}

impl Vote {
    pub fn effective_weight(&self) -> f64 {
        self.stake as f64 * self.reputation.clamp(0.0, 1.0)
    }

    pub fn signing_digest(challenge_id: u64, shard: ShardId, verdict: Verdict) -> Digest {
        let mut e = Encoder::new(ObjectKind::Vote);
        e.u64(challenge_id).u32(shard.0).u8(verdict as u8);
        e.hash(DomainTag::Msg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Challenge {
    pub challenge_id: u64,
    pub disputed_tx: Digest,
    pub challenger_shard: ShardId,
    pub evidence: Vec<DisputeEvidence>,
    pub opened_at: u64,
    pub closes_at: u64,
    /// Shards that must vote.
    pub involved: BTreeSet<ShardId>,
    pub votes: BTreeMap<ShardId, Vote>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Upheld,
    RolledBack,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DisputeConfig {
    /// Voting window, in gossip rounds.
    pub window_rounds: u64,
    pub slash_fraction: f64,
    pub reputation_decay: f64,
    /// Whether uninvolved shards may vote.
    pub observers_vote: bool,
}

impl Default for DisputeConfig {
    fn default() -> Self {
        DisputeConfig {
            window_rounds: 10,
            slash_fraction: 0.95,
            reputation_decay: 0.5,
            observers_vote: true,
        }
    }
}

/// Stakes, reputations and the record of every slash.
#[derive(Clone, Debug, PartialEq)]
pub struct PenaltyLedger {
    pub stakes: BTreeMap<ShardId, u64>,
    pub reputation: BTreeMap<ShardId, f64>,
    pub slash_fraction: f64,
    pub reputation_decay: f64,
    pub history: Vec<(u64, ShardId, u64)>,
}

impl PenaltyLedger {
    pub fn new(slash_fraction: f64, reputation_decay: f64) -> Self {
        PenaltyLedger {
            stakes: BTreeMap::new(),
            reputation: BTreeMap::new(),
            slash_fraction: slash_fraction.clamp(0.0, 1.0),
            reputation_decay: reputation_decay.clamp(0.0, 1.0),
            history: Vec::new(),
        }
    }

    pub fn enroll(&mut self, s: ShardId, stake: u64) {
        self.stakes.insert(s, stake);
        self.reputation.insert(s, 1.0);
    }

    pub fn stake(&self, s: ShardId) -> u64 {
        self.stakes.get(&s).copied().unwrap_or(0)
    }

    pub fn reputation(&self, s: ShardId) -> f64 {
        self.reputation.get(&s).copied().unwrap_or(1.0)
    }

    /// Slash `s` by `slash_fraction` of its stake and decay its reputation.
    pub fn slash(&mut self, challenge_id: u64, s: ShardId) -> u64 {
        let stake = self.stake(s);
        let amount = ((stake as f64) * self.slash_fraction) as u64;
        let amount = amount.min(stake);
        self.stakes.insert(s, stake - amount);
        let r = self.reputation(s) * self.reputation_decay;
        self.reputation.insert(s, r);
        self.history.push((challenge_id, s, amount));
        amount
    }

    pub fn total_slashed(&self) -> u64 {
        self.history.iter().map(|h| h.2).sum()
    }
}

/// Open challenges and their outcomes.
#[derive(Clone, Debug, Default)]
pub struct DisputeBoard {
    pub config: DisputeConfig,
    challenges: BTreeMap<u64, Challenge>,
    open_by_tx: BTreeMap<Digest, u64>,
    outcomes: BTreeMap<u64, Outcome>,
    next_id: u64,
}

impl DisputeBoard {
    pub fn new(config: DisputeConfig) -> Self {
        DisputeBoard {
            config,
            ..Default::default()
        }
    }

    /// Open a challenge against `tx_id`; an already open challenge for the
    /// same transaction is returned instead of a new one.
    pub fn open_challenge(
        &mut self,
        challenger: ShardId,
        tx_id: Digest,
        evidence: Vec<DisputeEvidence>,
        involved: BTreeSet<ShardId>,
        round: u64,
    ) -> Result<u64, DisputeError> {
        if evidence.is_empty() {
            return Err(DisputeError::EmptyEvidence);
        }
        if !evidence.iter().all(DisputeEvidence::self_consistent) {
            return Err(DisputeError::InconsistentEvidence);
        }
        if let Some(&id) = self.open_by_tx.get(&tx_id) {
            return Ok(id);
        }
        let id = self.next_id;
        self.next_id += 1;
        self.challenges.insert(
            id,
            Challenge {
                challenge_id: id,
                disputed_tx: tx_id,
                challenger_shard: challenger,
                evidence,
                opened_at: round,
                closes_at: round + self.config.window_rounds,
                involved,
                votes: BTreeMap::new(),
            },
        );
        self.open_by_tx.insert(tx_id, id);
        Ok(id)
    }

    pub fn challenge(&self, id: u64) -> Option<&Challenge> {
        self.challenges.get(&id)
    }

    pub fn open_ids(&self) -> Vec<u64> {
        self.open_by_tx.values().copied().collect()
    }

    pub fn outcome(&self, id: u64) -> Option<Outcome> {
        self.outcomes.get(&id).copied()
    }

    pub fn outcomes(&self) -> &BTreeMap<u64, Outcome> {
        &self.outcomes
    }

    pub fn cast_vote(&mut self, id: u64, vote: Vote, round: u64, registry: &ShareRegistry) -> Result<(), DisputeError> {
        let observers = self.config.observers_vote;
        let c = self.challenges.get_mut(&id).ok_or(DisputeError::UnknownChallenge(id))?;
        if round >= c.closes_at || self.outcomes.contains_key(&id) {
            return Err(DisputeError::WindowClosed(id));
        }
        if !observers && !c.involved.contains(&vote.shard) {
            return Err(DisputeError::NotEligible(vote.shard));
        }
        let d = Vote::signing_digest(id, vote.shard, vote.verdict);
        if vote.signature.signer != SignerId(vote.shard.0)
            || vote.signature.message_digest != d
            || !registry.verify_partial(&vote.signature)
        {
            return Err(DisputeError::NotEligible(vote.shard));
        }
        c.votes.entry(vote.shard).or_insert(vote);
        Ok(())
    }

    /// Tally a closed challenge. `enablers` are the shards whose partial
    /// signatures made the disputed transaction committable; they are
    /// slashed along with every `Valid` voter if it is rolled back.
    pub fn resolve(
        &mut self,
        id: u64,
        round: u64,
        enablers: &BTreeSet<ShardId>,
        penalties: &mut PenaltyLedger,
    ) -> Result<Outcome, DisputeError> {
        if let Some(&o) = self.outcomes.get(&id) {
            return Ok(o);
        }
        let c = self.challenges.get(&id).ok_or(DisputeError::UnknownChallenge(id))?;
        if round < c.closes_at {
            return Err(DisputeError::WindowOpen(id));
        }
        let outcome = tally(c.votes.values());
        if outcome == Outcome::RolledBack {
            let mut culprits: BTreeSet<ShardId> = c
                .votes
                .values()
                .filter(|v| v.verdict == Verdict::Valid)
                .map(|v| v.shard)
                .collect();
            culprits.extend(enablers.iter().copied());
            for s in culprits {
                penalties.slash(id, s);
            }
        }
        self.open_by_tx.remove(&c.disputed_tx);
        self.outcomes.insert(id, outcome);
        Ok(outcome)
    }
}

/// Strict majority of cast effective weight; a tie upholds.
pub fn tally<'a>(votes: impl IntoIterator<Item = &'a Vote>) -> Outcome {
    let mut invalid = 0.0;
    let mut total = 0.0;
    for v in votes {
        let w = v.effective_weight();
        total += w;
        if v.verdict == Verdict::Invalid {
            invalid += w;
        }
    }
    if invalid > total / 2.0 {
        Outcome::RolledBack
    } else {
        Outcome::Upheld
    }
}

/// What an honest shard knows when re-verifying a challenged transaction.
pub struct VerifyCtx<'a> {
    pub registry: &'a ShareRegistry,
    /// Earliest committed position per spent (account, nonce).
    pub first_spend: &'a BTreeMap<(AccountId, u64), (u64, Digest)>,
    /// The record this shard logged for the disputed transaction.
    pub record: Option<&'a DecisionRecord>,
}

/// Independent re-verification by an honest shard: the threshold signature
/// must verify for the transaction's input shards, every state proof must
/// verify, and no earlier committed transaction may have spent any of its
/// (account, nonce) pairs.
pub fn reverify(challenge: &Challenge, ctx: &VerifyCtx<'_>) -> Verdict {
    let Some(rec) = ctx.record else {
        return Verdict::Invalid;
    };
    if rec.tx.id() != challenge.disputed_tx || !rec.tx.id_matches() {
        return Verdict::Invalid;
    }
    let signers: BTreeSet<SignerId> = rec.tx.input_shards().iter().map(|s| SignerId(s.0)).collect();
    if rec.sigma.message_digest != rec.tx.id()
        || !ctx
            .registry
            .verify_threshold_with(&rec.sigma, signers.len(), Some(&signers))
    {
        return Verdict::Invalid;
    }
    for e in &challenge.evidence {
        if let DisputeEvidence::StateProof { root, proof } = e {
            if !verify(root, proof) {
                return Verdict::Invalid;
            }
        }
    }
    for l in &rec.tx.inputs {
        if let Some(&(pos, id)) = ctx.first_spend.get(&(l.account, l.nonce)) {
            if id != rec.tx.id() && pos < rec.position {
                return Verdict::Invalid;
            }
        }
    }
    Verdict::Valid
}

/// A ledger entry that was actually applied for a transaction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Effect {
    pub entry: Entry,
}

/// Access to the shard state currently homing an account.
pub trait StateAccess {
    fn state_for(&mut self, a: AccountId) -> Option<&mut ShardState>;
}

impl StateAccess for BTreeMap<ShardId, ShardState> {
    fn state_for(&mut self, a: AccountId) -> Option<&mut ShardState> {
        self.values_mut().find(|s| s.contains(a))
    }
}

/// Per-transaction record of applied effects, with tombstones for rolled
/// back transactions.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EffectLog {
    applied: BTreeMap<Digest, Vec<Effect>>,
    tombstones: BTreeSet<Digest>,
}

impl EffectLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, tx: Digest, effect: Effect) {
        self.applied.entry(tx).or_default().push(effect);
    }

    pub fn effects(&self, tx: &Digest) -> Option<&[Effect]> {
        self.applied.get(tx).map(|v| v.as_slice())
    }

    pub fn is_rolled_back(&self, tx: &Digest) -> bool {
        self.tombstones.contains(tx)
    }

    /// Undo every recorded effect of `tx`, all or nothing. Returns the
    /// accounts touched. Balances are restored; a debited (account, nonce)
    /// stays consumed, exactly as after an abort, so the pair can never be
    /// spent again and later nonces of the account stay valid.
    pub fn rollback(&mut self, tx: Digest, states: &mut impl StateAccess) -> Result<Vec<AccountId>, DisputeError> {
        let effects = self.applied.get(&tx).ok_or(DisputeError::UnknownTx)?;
        // Check first so a blocked rollback changes nothing.
        let mut need: BTreeMap<AccountId, Amount> = BTreeMap::new();
        for e in effects {
            if let Entry::Credit { account, amount } = e.entry {
                *need.entry(account).or_insert(0) += amount;
            }
        }
        for (&a, &amt) in &need {
            let have = states.state_for(a).map_or(0, |s| s.balance(a));
            if have < amt {
                return Err(DisputeError::RollbackBlocked(a));
            }
        }
        let effects = self.applied.remove(&tx).expect("checked above");
        let mut touched = Vec::new();
        for e in effects.iter().rev() {
            let a = e.entry.account();
            let st = states.state_for(a).ok_or(DisputeError::UnknownTx)?;
            match e.entry {
                Entry::Credit { account, amount } => {
                    st.apply_in_place(
                        &Entry::Debit {
                            account,
                            amount,
                            nonce: 0,
                        },
                        false,
                    )
                    .map_err(|_| DisputeError::RollbackBlocked(account))?;
                }
                Entry::Debit { account, amount, .. } => {
                    st.apply_in_place(&Entry::Credit { account, amount }, false)
                        .map_err(|_| DisputeError::RollbackBlocked(account))?;
                }
            }
            touched.push(a);
        }
        self.tombstones.insert(tx);
        Ok(touched)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::{InputLeg, OutputLeg};
    use crate::merkle::StateTree;
    use crate::thresh::ShareRegistry;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn reg(n: usize) -> ShareRegistry {
        ShareRegistry::keygen(0, n, 1, 5).unwrap()
    }

    fn announce(reg: &ShareRegistry, origin: u32, version: u64, tag: u8) -> GossipMsg {
        let tree = StateTree::build(vec![(
            crate::ledger::hash(DomainTag::Leaf, &[tag]),
            crate::ledger::hash(DomainTag::Leaf, &[tag, 1]),
        )])
        .unwrap();
        let key = tree.leaves().next().unwrap().0;
        let proof = tree.prove(&key).unwrap();
        GossipMsg::signed(
            ShardId(origin),
            tree.root(),
            version,
            vec![proof],
            &reg.signer(SignerId(origin)).unwrap(),
        )
    }

    fn seeded_nodes(reg: &ShareRegistry, n: u32) -> BTreeMap<ShardId, GossipNode> {
        let mut nodes = BTreeMap::new();
        for i in 0..n {
            nodes.insert(ShardId(i), GossipNode::new());
        }
        for i in 0..n {
            let m = announce(reg, i, 1, i as u8);
            for node in nodes.values_mut() {
                node.receive(&m, reg).unwrap();
            }
        }
        nodes
    }

    #[test]
    fn fanout_formula() {
        assert_eq!(gossip_fanout(8), 4);
        assert_eq!(gossip_fanout(9), 5);
        assert_eq!(gossip_fanout(2), 2);
        assert_eq!(gossip_fanout(1), 1);
    }

    #[test]
    fn single_update_converges_quickly() {
        let r = reg(8);
        let mut worst = 0;
        for seed in 0..100 {
            let mut nodes = seeded_nodes(&r, 8);
            let m = announce(&r, 3, 2, 99);
            nodes.get_mut(&ShardId(3)).unwrap().receive(&m, &r).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut rounds = 0;
            while !nodes.values().all(|n| n.view.root(ShardId(3)) == Some(m.root)) {
                gossip_round(&mut nodes, gossip_fanout(8), &r, &mut rng);
                rounds += 1;
                assert!(rounds <= 50);
            }
            worst = worst.max(rounds);
        }
        assert!(worst <= 6, "worst = {worst}");
    }

    #[test]
    fn bad_proof_and_bad_signature_rejected() {
        let r = reg(4);
        let mut node = GossipNode::new();
        let mut m = announce(&r, 1, 1, 7);
        m.proofs[0].value = crate::ledger::hash(DomainTag::Leaf, b"lie");
        // Re-sign so only the proof is wrong.
        let m = GossipMsg::signed(m.origin, m.root, m.version, m.proofs, &r.signer(SignerId(1)).unwrap());
        assert_eq!(node.receive(&m, &r), Err(SyncError::BadProof(ShardId(1))));
        let mut forged = announce(&r, 1, 1, 7);
        forged.signature.signer = SignerId(2);
        assert_eq!(node.receive(&forged, &r), Err(SyncError::BadSignature(ShardId(1))));
        assert_eq!(node.rejected.len(), 2);
        assert!(node.view.roots.is_empty());
    }

    #[test]
    fn idle_round_changes_nothing() {
        let r = reg(8);
        let mut nodes = seeded_nodes(&r, 8);
        let before: Vec<_> = nodes.values().map(|n| n.view.clone()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let stats = gossip_round(&mut nodes, 4, &r, &mut rng);
        assert_eq!(stats.adopted, 0);
        let after: Vec<_> = nodes.values().map(|n| n.view.clone()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn stale_version_ignored() {
        let r = reg(4);
        let mut node = GossipNode::new();
        node.receive(&announce(&r, 0, 3, 1), &r).unwrap();
        assert!(matches!(
            node.receive(&announce(&r, 0, 2, 2), &r),
            Err(SyncError::StaleVersion { .. })
        ));
    }

    fn vote(r: &ShareRegistry, id: u64, s: u32, verdict: Verdict, stake: u64) -> Vote {
        let sig = r
            .signer(SignerId(s))
            .unwrap()
            .sign(Vote::signing_digest(id, ShardId(s), verdict));
        Vote {
            shard: ShardId(s),
            verdict,
            stake,
            reputation: 1.0,
            evidence_attached: vec![],
            signature: sig,
        }
    }

    fn tx(nonce: u64, to: u64) -> Transaction {
        Transaction::new(
            vec![InputLeg {
                shard: ShardId(0),
                account: AccountId(1),
                amount: 10,
                nonce,
            }],
            vec![OutputLeg {
                shard: ShardId(1),
                account: AccountId(to),
                amount: 10,
            }],
            0,
        )
        .unwrap()
    }

    fn conflict_evidence(r: &ShareRegistry) -> (Vec<DisputeEvidence>, DecisionRecord, DecisionRecord) {
        let a = tx(1, 2);
        let b = tx(1, 3);
        let sig = |t: &Transaction| {
            r.combine_with(&[r.partial_sign(SignerId(0), t.id()).unwrap()], 1, None)
                .unwrap()
        };
        let ra = DecisionRecord {
            sigma: sig(&a),
            tx: a,
            position: 0,
        };
        let rb = DecisionRecord {
            sigma: sig(&b),
            tx: b,
            position: 1,
        };
        (
            vec![DisputeEvidence::ConflictingDecisions {
                first: ra.clone(),
                second: rb.clone(),
            }],
            ra,
            rb,
        )
    }

    #[test]
    fn weighted_majority_rolls_back_and_slashes() {
        let r = reg(4);
        let (ev, _, rb) = conflict_evidence(&r);
        let mut board = DisputeBoard::new(DisputeConfig::default());
        let id = board
            .open_challenge(
                ShardId(0),
                rb.tx.id(),
                ev,
                [ShardId(0), ShardId(1)].into_iter().collect(),
                0,
            )
            .unwrap();
        board
            .cast_vote(id, vote(&r, id, 0, Verdict::Invalid, 3), 1, &r)
            .unwrap();
        board.cast_vote(id, vote(&r, id, 1, Verdict::Valid, 1), 1, &r).unwrap();
        board.cast_vote(id, vote(&r, id, 2, Verdict::Valid, 1), 1, &r).unwrap();
        let mut pen = PenaltyLedger::new(0.95, 0.5);
        for s in 0..3 {
            pen.enroll(ShardId(s), 100);
        }
        assert_eq!(
            board.resolve(id, 5, &BTreeSet::new(), &mut pen),
            Err(DisputeError::WindowOpen(id))
        );
        assert_eq!(
            board.resolve(id, 10, &BTreeSet::new(), &mut pen),
            Ok(Outcome::RolledBack)
        );
        assert_eq!(pen.stake(ShardId(0)), 100);
        assert_eq!(pen.stake(ShardId(1)), 5);
        assert_eq!(pen.stake(ShardId(2)), 5);
        assert_eq!(pen.reputation(ShardId(1)), 0.5);
        assert_eq!(pen.total_slashed(), 190);
        assert_eq!(
            board.cast_vote(id, vote(&r, id, 3, Verdict::Valid, 1), 11, &r),
            Err(DisputeError::WindowClosed(id))
        );
    }

    #[test]
    fn unanimous_valid_and_tie_uphold() {
        let r = reg(4);
        let all_valid = [vote(&r, 0, 0, Verdict::Valid, 2), vote(&r, 0, 1, Verdict::Valid, 2)];
        assert_eq!(tally(&all_valid), Outcome::Upheld);
        let tie = [vote(&r, 0, 0, Verdict::Invalid, 5), vote(&r, 0, 1, Verdict::Valid, 5)];
        assert_eq!(tally(&tie), Outcome::Upheld);
        let mut half = vote(&r, 0, 2, Verdict::Invalid, 5);
        half.reputation = 0.5;
        assert_eq!(
            tally(&[
                half,
                vote(&r, 0, 0, Verdict::Valid, 1),
                vote(&r, 0, 1, Verdict::Valid, 1)
            ]),
            Outcome::RolledBack
        );
    }

    #[test]
    fn challenge_validation_and_dedup() {
        let r = reg(4);
        let (ev, _, rb) = conflict_evidence(&r);
        let mut board = DisputeBoard::new(DisputeConfig::default());
        assert_eq!(
            board.open_challenge(ShardId(0), rb.tx.id(), vec![], BTreeSet::new(), 0),
            Err(DisputeError::EmptyEvidence)
        );
        let a = board
            .open_challenge(ShardId(0), rb.tx.id(), ev.clone(), BTreeSet::new(), 0)
            .unwrap();
        let b = board
            .open_challenge(ShardId(2), rb.tx.id(), ev, BTreeSet::new(), 1)
            .unwrap();
        assert_eq!(a, b);
        let unrelated = DisputeEvidence::ConflictingDecisions {
            first: rb.clone(),
            second: rb.clone(),
        };
        assert_eq!(
            board.open_challenge(ShardId(0), Digest::ZERO, vec![unrelated], BTreeSet::new(), 0),
            Err(DisputeError::InconsistentEvidence)
        );
    }

    #[test]
    fn observers_excluded_when_disabled() {
        let r = reg(4);
        let (ev, _, rb) = conflict_evidence(&r);
        let mut board = DisputeBoard::new(DisputeConfig {
            observers_vote: false,
            ..DisputeConfig::default()
        });
        let id = board
            .open_challenge(ShardId(0), rb.tx.id(), ev, [ShardId(0)].into_iter().collect(), 0)
            .unwrap();
        assert!(board.cast_vote(id, vote(&r, id, 0, Verdict::Invalid, 1), 0, &r).is_ok());
        assert_eq!(
            board.cast_vote(id, vote(&r, id, 3, Verdict::Invalid, 1), 0, &r),
            Err(DisputeError::NotEligible(ShardId(3)))
        );
    }

    #[test]
    fn reverify_flags_the_later_spend_only() {
        let r = reg(4);
        let (ev, ra, rb) = conflict_evidence(&r);
        let mut first_spend = BTreeMap::new();
        first_spend.insert((AccountId(1), 1), (0, ra.tx.id()));
        let mut board = DisputeBoard::new(DisputeConfig::default());
        let id_b = board
            .open_challenge(ShardId(0), rb.tx.id(), ev.clone(), BTreeSet::new(), 0)
            .unwrap();
        let id_a = board
            .open_challenge(ShardId(0), ra.tx.id(), ev, BTreeSet::new(), 0)
            .unwrap();
        let cb = board.challenge(id_b).unwrap().clone();
        let ca = board.challenge(id_a).unwrap().clone();
        let vb = reverify(
            &cb,
            &VerifyCtx {
                registry: &r,
                first_spend: &first_spend,
                record: Some(&rb),
            },
        );
        let va = reverify(
            &ca,
            &VerifyCtx {
                registry: &r,
                first_spend: &first_spend,
                record: Some(&ra),
            },
        );
        assert_eq!((va, vb), (Verdict::Valid, Verdict::Invalid));
        let mut bad = ra.clone();
        bad.sigma.signer_set.clear();
        assert_eq!(
            reverify(
                &ca,
                &VerifyCtx {
                    registry: &r,
                    first_spend: &first_spend,
                    record: Some(&bad),
                }
            ),
            Verdict::Invalid
        );
    }

    #[test]
    fn rollback_restores_pre_commit_balances() {
        let mut states: BTreeMap<ShardId, ShardState> = BTreeMap::new();
        states.insert(ShardId(0), ShardState::with_balances([(AccountId(1), 100)]));
        states.insert(ShardId(1), ShardState::with_balances([(AccountId(2), 5)]));
        let golden = states.clone();
        let t = tx(1, 2);
        let mut log = EffectLog::new();
        for (s, e) in [(0, t.entries_for(ShardId(0))[0]), (1, t.entries_for(ShardId(1))[0])] {
            let st = states.get_mut(&ShardId(s)).unwrap();
            st.apply_in_place(&e, true).unwrap();
            log.record(t.id(), Effect { entry: e });
        }
        assert_eq!(states[&ShardId(1)].balance(AccountId(2)), 15);
        log.rollback(t.id(), &mut states).unwrap();
        for (s, st) in &states {
            for a in st.accounts() {
                assert_eq!(st.balance(a), golden[s].balance(a));
            }
        }
        // The spent nonce stays burned.
        assert_eq!(states[&ShardId(0)].nonce(AccountId(1)), 1);
        assert!(log.is_rolled_back(&t.id()));
        assert_eq!(log.rollback(t.id(), &mut states), Err(DisputeError::UnknownTx));
        assert_eq!(log.rollback(Digest::ZERO, &mut states), Err(DisputeError::UnknownTx));
    }

    #[test]
    fn penalty_conservation() {
        let mut pen = PenaltyLedger::new(0.95, 0.5);
        pen.enroll(ShardId(0), 1_000);
        pen.enroll(ShardId(1), 7);
        let mut slashed = 0;
        for i in 0..5 {
            slashed += pen.slash(i, ShardId(0));
            slashed += pen.slash(i, ShardId(1));
        }
        assert_eq!(slashed, pen.total_slashed());
        assert_eq!(pen.stake(ShardId(0)) + pen.stake(ShardId(1)) + slashed, 1_007);
    }
}
