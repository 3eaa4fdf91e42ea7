//! Adaptive shard management: load gauges, split/merge decisions with
//! cooldowns, and greedy (longest-processing-time) account rebalancing.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use thiserror::Error;

use crate::consensus::NodeId;
use crate::ledger::{AccountId, ShardId, ShardState, SimTime, SECONDS};
use crate::merkle::StateTree;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MgmtError {
    #[error("split into {k} needs {need} validators, shard has {have}")]
    TooFewValidators { k: usize, need: usize, have: usize },
    #[error("shard {0} is not active")]
    NotActive(ShardId),
    #[error("account {0:?} appears in more than one merged shard")]
    OverlappingAccounts(AccountId),
    #[error("merge group needs at least two distinct shards")]
    BadGroup,
    #[error("invalid management config: {0}")]
    BadConfig(&'static str),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShardMgrConfig {
    pub tau_s: f64,
    pub tau_m: f64,
    /// Consecutive low epochs before a shard may merge.
    pub merge_epochs: u32,
    pub cooldown_epochs: u64,
    pub split_fanout: usize,
    pub epoch_length: SimTime,
    /// Transactions per epoch that count as 100% volume.
    pub shard_capacity: u64,
    /// Minimum cosine similarity of access patterns for a merge.
    pub merge_similarity: f64,
    /// Most shards touched by one evaluation (0 = unlimited).
    pub max_shards_per_eval: usize,
    /// Smallest validator set a shard may have.
    pub min_validators: usize,
}

impl Default for ShardMgrConfig {
    fn default() -> Self {
        ShardMgrConfig {
            tau_s: 80.0,
            tau_m: 30.0,
            merge_epochs: 3,
            cooldown_epochs: 2,
            split_fanout: 2,
            epoch_length: SECONDS,
            shard_capacity: 1_000,
            merge_similarity: 0.5,
            max_shards_per_eval: 0,
            min_validators: 4,
        }
    }
}

impl ShardMgrConfig {
    pub fn validate(&self) -> Result<(), MgmtError> {
        if self.tau_m.partial_cmp(&self.tau_s) != Some(core::cmp::Ordering::Less) {
            return Err(MgmtError::BadConfig("tau_m must be below tau_s"));
        }
        if !(0.0..=100.0).contains(&self.tau_m) || !(0.0..=100.0).contains(&self.tau_s) {
            return Err(MgmtError::BadConfig("thresholds are percentages"));
        }
        if self.split_fanout < 2 {
            return Err(MgmtError::BadConfig("split_fanout must be at least 2"));
        }
        if self.shard_capacity == 0 || self.epoch_length == 0 {
            return Err(MgmtError::BadConfig("capacity and epoch length must be positive"));
        }
        if self.min_validators == 0 {
            return Err(MgmtError::BadConfig("min_validators must be positive"));
        }
        Ok(())
    }
}

/// Normalised load gauges, each in [0, 100].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Gauge {
    pub v: f64,
    pub u: f64,
}

/// `v = 100·processed/capacity`, `u = 100·busy/(epoch_length·validators)`,
/// both clamped to [0, 100].
pub fn gauge(processed: u64, capacity: u64, busy: SimTime, epoch_length: SimTime, validators: usize) -> Gauge {
    let v = if capacity == 0 {
        0.0
    } else {
        100.0 * processed as f64 / capacity as f64
    };
    let denom = epoch_length as f64 * validators.max(1) as f64;
    let u = if denom == 0.0 { 0.0 } else { 100.0 * busy as f64 / denom };
    Gauge {
        v: v.clamp(0.0, 100.0),
        u: u.clamp(0.0, 100.0),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShardStatus {
    Active,
    Splitting,
    Merging,
    Retired,
}

/// A shard as seen by the manager.
#[derive(Clone, Debug)]
pub struct Shard {
    pub id: ShardId,
    pub validators: Vec<NodeId>,
    pub state: ShardState,
    pub tree: StateTree,
    pub status: ShardStatus,
    /// First epoch in which management may act on this shard again.
    pub cooldown_until: u64,
    pub lineage: Vec<ShardId>,
    /// Last evaluated gauges.
    pub gauge: Gauge,
    /// Counters for the running epoch.
    pub processed: u64,
    pub busy: SimTime,
    /// Per counterparty shard (self included), accesses this epoch.
    pub access: BTreeMap<ShardId, u64>,
    /// Per account, accesses since the shard was formed.
    pub account_weight: BTreeMap<AccountId, u64>,
}

/// Merkle tree over a shard's account records.
pub fn state_tree(state: &ShardState) -> StateTree {
    StateTree::build(state.accounts().map(|a| (a.key_digest(), state.record_digest(a))))
        .expect("account ids are unique")
}

impl Shard {
    pub fn new(id: ShardId, validators: Vec<NodeId>, state: ShardState) -> Self {
        let tree = state_tree(&state);
        Shard {
            id,
            validators,
            state,
            tree,
            status: ShardStatus::Active,
            cooldown_until: 0,
            lineage: Vec::new(),
            gauge: Gauge::default(),
            processed: 0,
            busy: 0,
            access: BTreeMap::new(),
            account_weight: BTreeMap::new(),
        }
    }

    /// Refresh one account's leaf after its record changed.
    pub fn sync_leaf(&mut self, a: AccountId) {
        if self.state.contains(a) {
            self.tree.update_in_place(a.key_digest(), self.state.record_digest(a));
        } else {
            self.tree.remove_in_place(&a.key_digest());
        }
    }

    pub fn in_cooldown(&self, epoch: u64) -> bool {
        epoch < self.cooldown_until
    }

    /// Close the running epoch: compute gauges and reset counters.
    pub fn close_epoch(&mut self, cfg: &ShardMgrConfig) -> Gauge {
        self.gauge = gauge(
            self.processed,
            cfg.shard_capacity,
            self.busy,
            cfg.epoch_length,
            self.validators.len(),
        );
        self.processed = 0;
        self.busy = 0;
        self.gauge
    }
}

/// Gauges of every active shard for the epoch just completed.
pub fn snapshot(shards: &BTreeMap<ShardId, Shard>) -> BTreeMap<ShardId, Gauge> {
    shards
        .values()
        .filter(|s| s.status == ShardStatus::Active)
        .map(|s| (s.id, s.gauge))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MgmtKind {
    Split { shard: ShardId, k: usize },
    Merge { group: Vec<ShardId> },
    None,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MgmtAction {
    pub kind: MgmtKind,
    pub epoch: u64,
}

/// What `decide` needs to know per shard.
#[derive(Clone, Debug, PartialEq)]
pub struct ShardObs {
    pub gauge: Gauge,
    pub validators: usize,
    pub cooldown_until: u64,
    pub access: BTreeMap<ShardId, u64>,
    /// Shard may not be reconfigured right now (e.g. not active).
    pub locked: bool,
}

impl ShardObs {
    pub fn of(s: &Shard) -> Self {
        ShardObs {
            gauge: s.gauge,
            validators: s.validators.len(),
            cooldown_until: s.cooldown_until,
            access: s.access.clone(),
            locked: s.status != ShardStatus::Active,
        }
    }
}

/// Consecutive low-load epochs per shard.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MgmtHistory {
    pub low_streak: BTreeMap<ShardId, u32>,
}

/// Cosine similarity of two shards' access vectors. The two candidates'
/// own coordinates are folded into one "between us" coordinate, so shards
/// that mostly talk to each other or to themselves look alike. An all-zero
/// vector (an idle shard) is treated as similar to anything.
pub fn access_similarity(a: ShardId, va: &BTreeMap<ShardId, u64>, b: ShardId, vb: &BTreeMap<ShardId, u64>) -> f64 {
    let fold = |v: &BTreeMap<ShardId, u64>| {
        let mut out: BTreeMap<Option<ShardId>, f64> = BTreeMap::new();
        for (&s, &c) in v {
            let key = if s == a || s == b { None } else { Some(s) };
            *out.entry(key).or_insert(0.0) += c as f64;
        }
        out
    };
    let (fa, fb) = (fold(va), fold(vb));
    let na: f64 = fa.values().map(|x| x * x).sum::<f64>();
    let nb: f64 = fb.values().map(|x| x * x).sum::<f64>();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    let dot: f64 = fa.iter().map(|(k, x)| x * fb.get(k).copied().unwrap_or(0.0)).sum();
    dot / (libm::sqrt(na) * libm::sqrt(nb))
}

/// Decide this epoch's actions.
///
/// Splits: `v > τ_s` or `u > τ_s`, outside cooldown, with at least
/// `k·min_validators` validators. Merges: shards below `τ_m` on both
/// gauges for `merge_epochs` consecutive epochs, outside cooldown, paired
/// greedily with the most similar remaining candidate (similarity at least
/// `merge_similarity`) as long as the pair's combined load stays below
/// `τ_s`. Each shard takes part in at most one action. When
/// `max_shards_per_eval` caps the work, the most loaded splits go first,
/// then merges. The result is ordered by lowest shard id.
pub fn decide(
    obs: &BTreeMap<ShardId, ShardObs>,
    history: &mut MgmtHistory,
    cfg: &ShardMgrConfig,
    epoch: u64,
) -> Vec<MgmtAction> {
    for (&id, o) in obs {
        let low = o.gauge.v < cfg.tau_m && o.gauge.u < cfg.tau_m;
        let streak = history.low_streak.entry(id).or_insert(0);
        *streak = if low { *streak + 1 } else { 0 };
    }
    history.low_streak.retain(|id, _| obs.contains_key(id));

    let k = cfg.split_fanout;
    let mut splits: Vec<(f64, ShardId)> = obs
        .iter()
        .filter(|(_, o)| !o.locked && epoch >= o.cooldown_until)
        .filter(|(_, o)| o.gauge.v > cfg.tau_s || o.gauge.u > cfg.tau_s)
        .filter(|(_, o)| o.validators >= k * cfg.min_validators)
        .map(|(&id, o)| (o.gauge.v.max(o.gauge.u), id))
        .collect();
    splits.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
    });

    let split_ids: BTreeSet<ShardId> = splits.iter().map(|x| x.1).collect();
    let mut candidates: Vec<ShardId> = obs
        .iter()
        .filter(|(id, o)| {
            !o.locked
                && epoch >= o.cooldown_until
                && !split_ids.contains(id)
                && history.low_streak.get(id).copied().unwrap_or(0) >= cfg.merge_epochs
        })
        .map(|(&id, _)| id)
        .collect();
    candidates.sort();
    let mut merges: Vec<Vec<ShardId>> = Vec::new();
    let mut used: BTreeSet<ShardId> = BTreeSet::new();
    for &a in &candidates {
        if used.contains(&a) {
            continue;
        }
        let oa = &obs[&a];
        let mut best: Option<(f64, ShardId)> = None;
        for &b in &candidates {
            if b == a || used.contains(&b) {
                continue;
            }
            let ob = &obs[&b];
            if oa.gauge.v + ob.gauge.v >= cfg.tau_s || oa.gauge.u + ob.gauge.u >= cfg.tau_s {
                continue;
            }
            let sim = access_similarity(a, &oa.access, b, &ob.access);
            if sim >= cfg.merge_similarity && best.is_none_or(|(s, _)| sim > s) {
                best = Some((sim, b));
            }
        }
        if let Some((_, b)) = best {
            used.insert(a);
            used.insert(b);
            merges.push(alloc::vec![a, b]);
        }
    }

    let cap = if cfg.max_shards_per_eval == 0 {
        usize::MAX
    } else {
        cfg.max_shards_per_eval
    };
    let mut touched = 0usize;
    let mut out = Vec::new();
    for (_, id) in splits {
        if touched + 1 > cap {
            break;
        }
        touched += 1;
        out.push(MgmtAction {
            kind: MgmtKind::Split { shard: id, k },
            epoch,
        });
    }
    for g in merges {
        if touched + g.len() > cap {
            break;
        }
        touched += g.len();
        out.push(MgmtAction {
            kind: MgmtKind::Merge { group: g },
            epoch,
        });
    }
    out.sort_by_key(|a| match &a.kind {
        MgmtKind::Split { shard, .. } => *shard,
        MgmtKind::Merge { group } => group[0],
        MgmtKind::None => ShardId(u32::MAX),
    });
    out
}

/// Longest-processing-time greedy: heaviest first, each to the currently
/// lightest bin (lowest index on ties). Returns the bin of each input item
/// (in input order) and the bin loads.
pub fn rebalance(weights: &[(AccountId, u64)], bins: usize) -> (Vec<usize>, Vec<u64>) {
    let bins = bins.max(1);
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&i, &j| weights[j].1.cmp(&weights[i].1).then(weights[i].0.cmp(&weights[j].0)));
    let mut loads = alloc::vec![0u64; bins];
    let mut assign = alloc::vec![0usize; weights.len()];
    for i in order {
        let (b, _) = loads
            .iter()
            .enumerate()
            .min_by(|x, y| x.1.cmp(y.1).then(x.0.cmp(&y.0)))
            .expect("at least one bin");
        assign[i] = b;
        loads[b] += weights[i].1;
    }
    (assign, loads)
}

/// Split `parent` into children with the given ids. Accounts are spread
/// by [`rebalance`] over `weight(account)`, validators round-robin, and the
/// epoch's processed count is shared in proportion to child weight.
pub fn split(
    parent: &mut Shard,
    child_ids: &[ShardId],
    weight: impl Fn(AccountId) -> u64,
    cfg: &ShardMgrConfig,
    epoch: u64,
) -> Result<Vec<Shard>, MgmtError> {
    let k = child_ids.len();
    if parent.status != ShardStatus::Active && parent.status != ShardStatus::Splitting {
        return Err(MgmtError::NotActive(parent.id));
    }
    let need = k * cfg.min_validators;
    if k < 2 || parent.validators.len() < need {
        return Err(MgmtError::TooFewValidators {
            k,
            need,
            have: parent.validators.len(),
        });
    }
    let weights: Vec<(AccountId, u64)> = parent.state.accounts().map(|a| (a, weight(a))).collect();
    let (assign, loads) = rebalance(&weights, k);
    let total_load: u64 = loads.iter().sum();

    let mut children: Vec<Shard> = child_ids
        .iter()
        .enumerate()
        .map(|(i, &id)| {
            let validators = parent.validators.iter().copied().skip(i).step_by(k).collect();
            let mut c = Shard::new(id, validators, ShardState::new());
            c.lineage = alloc::vec![parent.id];
            c.cooldown_until = epoch + cfg.cooldown_epochs + 1;
            c
        })
        .collect();
    for (i, &(a, _)) in weights.iter().enumerate() {
        let (bal, nonce) = parent.state.take_account(a).expect("listed account");
        children[assign[i]].state.insert_account(a, bal, nonce);
        if let Some(w) = parent.account_weight.remove(&a) {
            children[assign[i]].account_weight.insert(a, w);
        }
    }
    // Share the parent's running counters so that load is conserved.
    let mut given_processed = 0;
    let mut given_busy = 0;
    for (i, c) in children.iter_mut().enumerate() {
        let share = |x: u64| -> u64 {
            if i + 1 == k {
                return x;
            }
            if total_load == 0 {
                x / k as u64
            } else {
                ((x as u128 * loads[i] as u128) / total_load as u128) as u64
            }
        };
        c.processed = if i + 1 == k {
            parent.processed - given_processed
        } else {
            share(parent.processed)
        };
        c.busy = if i + 1 == k {
            parent.busy - given_busy
        } else {
            share(parent.busy)
        };
        given_processed += c.processed;
        given_busy += c.busy;
        let frac = if total_load == 0 {
            1.0 / k as f64
        } else {
            loads[i] as f64 / total_load as f64
        };
        c.gauge = Gauge {
            v: parent.gauge.v * frac,
            u: parent.gauge.u * frac,
        };
        c.tree = state_tree(&c.state);
    }
    parent.status = ShardStatus::Retired;
    parent.tree = StateTree::empty();
    Ok(children)
}

/// Merge a group into one shard with id `new_id`.
pub fn merge(group: &mut [&mut Shard], new_id: ShardId, cfg: &ShardMgrConfig, epoch: u64) -> Result<Shard, MgmtError> {
    let ids: BTreeSet<ShardId> = group.iter().map(|s| s.id).collect();
    if group.len() < 2 || ids.len() != group.len() {
        return Err(MgmtError::BadGroup);
    }
    for s in group.iter() {
        if s.status != ShardStatus::Active && s.status != ShardStatus::Merging {
            return Err(MgmtError::NotActive(s.id));
        }
    }
    let mut seen = BTreeSet::new();
    for s in group.iter() {
        for a in s.state.accounts() {
            if !seen.insert(a) {
                return Err(MgmtError::OverlappingAccounts(a));
            }
        }
    }
    let mut validators: Vec<NodeId> = Vec::new();
    let mut state = ShardState::new();
    let mut m = Shard::new(new_id, Vec::new(), ShardState::new());
    let (mut v, mut u) = (0.0, 0.0);
    for s in group.iter_mut() {
        for &n in &s.validators {
            if !validators.contains(&n) {
                validators.push(n);
            }
        }
        let accounts: Vec<AccountId> = s.state.accounts().collect();
        for a in accounts {
            let (bal, nonce) = s.state.take_account(a).expect("listed account");
            state.insert_account(a, bal, nonce);
        }
        m.account_weight.append(&mut s.account_weight);
        m.processed += s.processed;
        m.busy += s.busy;
        v += s.gauge.v;
        u += s.gauge.u;
        m.lineage.push(s.id);
        s.status = ShardStatus::Retired;
        s.tree = StateTree::empty();
    }
    m.gauge = Gauge {
        v: v.clamp(0.0, 100.0),
        u: u.clamp(0.0, 100.0),
    };
    m.validators = validators;
    m.tree = state_tree(&state);
    m.state = state;
    m.cooldown_until = epoch + cfg.cooldown_epochs + 1;
    Ok(m)
}
