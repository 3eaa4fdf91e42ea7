//! Adaptive shard management inside the engine: gauges, evaluation,
//! draining, and the actual split/merge with directory updates.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use crate::consensus::NodeId;
use crate::ledger::{AccountId, ShardId, ShardMap};
use crate::shardmgr::{decide, gauge, merge, split, MgmtKind, ShardObs, ShardStatus};
use crate::syncdispute::GossipNode;
use crate::thresh::SignerId;
use crate::xshard::Committee;

use super::{stake_for, Engine, Ev, MgmtTag, MgmtTrigger, Mode, Op, ShardRt, TraceRecord, TxHandle};

#[derive(Clone, Debug)]
pub(super) struct Reconfig {
    kind: MgmtKind,
    /// Shards being replaced.
    old: Vec<ShardId>,
    /// Set once the state has moved; the new shards go live at
    /// `ReconfigDone`.
    created: Option<Vec<ShardId>>,
}

impl Engine {
    pub(super) fn mgmt_enabled(&self) -> bool {
        self.cfg.mode == Mode::DynaShard && self.cfg.trigger != MgmtTrigger::Disabled
    }

    pub(super) fn on_epoch(&mut self) {
        let now = self.now();
        self.epoch += 1;
        let cfg = self.cfg.mgmt.clone();
        let mut records = Vec::new();
        for (&id, rt) in self.shards.iter_mut() {
            let g = gauge(
                rt.ep_processed,
                cfg.shard_capacity,
                rt.ep_busy,
                cfg.epoch_length,
                rt.s.validators.len(),
            );
            rt.ep_processed = 0;
            rt.ep_busy = 0;
            records.push(TraceRecord::Gauge {
                t: now,
                epoch: self.epoch,
                shard: id,
                v: g.v,
                u: g.u,
            });
        }
        for r in records {
            self.trace.push(r);
        }
        if self.cfg.trigger == MgmtTrigger::Epoch && self.mgmt_enabled() {
            self.evaluate();
        }
        if self.cfg.mode == Mode::DynaShard {
            let by_shard = self.validator_map();
            self.committee = Committee::sample_safe(
                &by_shard,
                self.cfg.committee_fraction,
                self.epoch,
                &self.cfg.adversary.corrupt_nodes,
                &mut self.rng,
            );
        }
        self.sched.schedule(now + self.cfg.mgmt.epoch_length, Ev::Epoch);
    }

    fn validator_map(&self) -> BTreeMap<ShardId, Vec<NodeId>> {
        self.shards
            .iter()
            .map(|(&id, rt)| (id, rt.s.validators.clone()))
            .collect()
    }

    pub(super) fn on_commit_counted(&mut self) {
        if let MgmtTrigger::EveryTxs(n) = self.cfg.trigger {
            if !self.mgmt_enabled() {
                return;
            }
            self.commits_since_eval += 1;
            if self.commits_since_eval >= n.max(1) {
                self.commits_since_eval = 0;
                self.evaluate();
            }
        }
    }

    /// Close the measurement window, decide, and start reconfigurations.
    fn evaluate(&mut self) {
        let now = self.now();
        let window = now.saturating_sub(self.last_eval).max(1);
        self.last_eval = now;
        self.mgmt_epoch += 1;
        let cfg = self.cfg.mgmt.clone();
        let capacity = ((cfg.shard_capacity as u128 * window as u128) / cfg.epoch_length.max(1) as u128).max(1) as u64;
        let mut obs = BTreeMap::new();
        for (&id, rt) in self.shards.iter_mut() {
            rt.s.gauge = gauge(rt.s.processed, capacity, rt.s.busy, window, rt.s.validators.len());
            rt.s.processed = 0;
            rt.s.busy = 0;
            obs.insert(id, ShardObs::of(&rt.s));
        }
        let actions = decide(&obs, &mut self.history, &cfg, self.mgmt_epoch);
        let busy = self.backlogged();
        for a in actions {
            // A shard with work waiting is not under-loaded, however
            // little it managed to process in the window.
            if let MgmtKind::Merge { group } = &a.kind {
                if group.iter().any(|s| busy.contains(s)) {
                    continue;
                }
            }
            self.start_reconfig(a.kind);
        }
    }

    /// Shards with queued operations or with held transactions waiting
    /// for them.
    fn backlogged(&self) -> BTreeSet<ShardId> {
        let mut out: BTreeSet<ShardId> = self
            .shards
            .iter()
            .filter(|(_, rt)| !rt.queue.is_empty())
            .map(|(&id, _)| id)
            .collect();
        for h in self.held.handles() {
            for a in self.txs[&h].tx.accounts() {
                if let Some(s) = self.dir.home(a) {
                    out.insert(s);
                }
            }
        }
        out
    }

    fn start_reconfig(&mut self, kind: MgmtKind) {
        let now = self.now();
        let (old, status, tag) = match &kind {
            MgmtKind::Split { shard, .. } => (alloc::vec![*shard], ShardStatus::Splitting, MgmtTag::Split),
            MgmtKind::Merge { group } => (group.clone(), ShardStatus::Merging, MgmtTag::Merge),
            MgmtKind::None => return,
        };
        for s in &old {
            self.shards.get_mut(s).expect("decided on a live shard").s.status = status;
        }
        self.trace.push(TraceRecord::Mgmt {
            t: now,
            epoch: self.mgmt_epoch,
            tag,
            shards: old.clone(),
        });
        // Pull back routed work that has not started anywhere; it is
        // re-routed once the new shards are live.
        let mut recall: BTreeSet<TxHandle> = BTreeSet::new();
        for s in &old {
            let rt = &self.shards[s];
            recall.extend(rt.routed.iter().filter(|h| !self.txs[h].in_flight));
        }
        for h in recall {
            self.recall(h);
        }
        let waiting: Vec<(AccountId, Op)> = self
            .shards
            .values()
            .flat_map(|rt| {
                rt.parked
                    .iter()
                    .flat_map(|(&a, ops)| ops.iter().map(move |&op| (a, op)))
            })
            .collect();
        for (a, op) in waiting {
            self.rescue(a, op);
        }
        self.reconfigs.push(Reconfig {
            kind,
            old,
            created: None,
        });
    }

    fn recall(&mut self, h: TxHandle) {
        let e = self.txs.get_mut(&h).expect("present");
        e.gen += 1;
        e.record = None;
        e.out_left.clear();
        for s in Self::tx_shards(&e.tx) {
            if let Some(rt) = self.shards.get_mut(&s) {
                rt.routed.remove(&h);
            }
        }
        let tx = e.tx.clone();
        self.held.insert(h, &tx);
    }

    /// Shards waiting to drain before a split or merge.
    pub(super) fn draining_shards(&self) -> BTreeSet<ShardId> {
        self.reconfigs
            .iter()
            .filter(|r| r.created.is_none())
            .flat_map(|r| r.old.iter().copied())
            .collect()
    }

    fn drop_stale(&mut self, s: ShardId) {
        let mut rt = self.shards.remove(&s).expect("live");
        rt.queue.retain(|op| !self.is_stale(op));
        for ops in rt.parked.values_mut() {
            ops.retain(|op| !self.is_stale(op));
        }
        rt.parked.retain(|_, ops| !ops.is_empty());
        self.shards.insert(s, rt);
    }

    fn drained(&mut self, s: ShardId) -> bool {
        self.drop_stale(s);
        let rt = &self.shards[&s];
        rt.inflight.is_empty()
            && rt.running.is_none()
            && !rt.down
            && rt.resume.is_none()
            && rt.queue.is_empty()
            && rt.parked.values().flatten().all(|op| matches!(op, Op::Release(_)))
            && rt.escrows.is_empty()
            && rt
                .routed
                .iter()
                .all(|h| self.txs[h].in_flight || self.txs[h].is_final())
    }

    pub(super) fn progress_reconfigs(&mut self) {
        let mut i = 0;
        while i < self.reconfigs.len() {
            if self.reconfigs[i].created.is_none() {
                let old = self.reconfigs[i].old.clone();
                if old.iter().all(|&s| self.drained(s)) {
                    let kind = self.reconfigs[i].kind.clone();
                    let created = self.perform(&kind, &old);
                    self.reconfigs[i].created = Some(created.clone());
                    let at = self.now() + self.cfg.reconfig_delay;
                    self.sched.schedule(at, Ev::ReconfigDone { shards: created });
                }
            }
            i += 1;
        }
    }

    fn fresh_id(&mut self) -> ShardId {
        let id = ShardId(self.next_shard);
        self.next_shard += 1;
        id
    }

    /// Move state into the new shards. They stay non-active until
    /// `ReconfigDone`.
    fn perform(&mut self, kind: &MgmtKind, old: &[ShardId]) -> Vec<ShardId> {
        let now = self.now();
        let cfg = self.cfg.mgmt.clone();
        let epoch = self.mgmt_epoch;
        let mut olds: Vec<ShardRt> = old.iter().map(|s| self.shards.remove(s).expect("live")).collect();
        let fifo = olds.iter().map(|r| r.client_fifo).max().unwrap_or(0);
        let applied: BTreeSet<_> = olds.iter().flat_map(|r| r.applied.iter().copied()).collect();
        let ep_processed: u64 = olds.iter().map(|r| r.ep_processed).sum();
        let ep_busy: u64 = olds.iter().map(|r| r.ep_busy).sum();
        // Releases waiting on a sender's earlier nonce follow the account.
        let parked: Vec<(AccountId, Vec<Op>)> = olds.iter_mut().flat_map(|r| core::mem::take(&mut r.parked)).collect();
        let new_shards = match kind {
            MgmtKind::Split { k, .. } => {
                let ids: Vec<ShardId> = (0..*k).map(|_| self.fresh_id()).collect();
                let parent = &mut olds[0];
                let weights = parent.s.account_weight.clone();
                match split(
                    &mut parent.s,
                    &ids,
                    |a| weights.get(&a).copied().unwrap_or(0) + 1,
                    &cfg,
                    epoch,
                ) {
                    Ok(children) => children,
                    Err(e) => {
                        let msg = alloc::format!("split failed: {e}");
                        self.violation(msg);
                        Vec::new()
                    }
                }
            }
            MgmtKind::Merge { .. } => {
                let id = self.fresh_id();
                let mut group: Vec<&mut crate::shardmgr::Shard> = olds.iter_mut().map(|r| &mut r.s).collect();
                match merge(&mut group, id, &cfg, epoch) {
                    Ok(m) => alloc::vec![m],
                    Err(e) => {
                        let msg = alloc::format!("merge failed: {e}");
                        self.violation(msg);
                        Vec::new()
                    }
                }
            }
            MgmtKind::None => Vec::new(),
        };
        if new_shards.is_empty() {
            // Put the old shards back untouched.
            for mut r in olds {
                r.s.status = ShardStatus::Active;
                self.shards.insert(r.s.id, r);
            }
            for (a, ops) in parked {
                let home = self.dir.home(a).expect("homed account");
                self.shards
                    .get_mut(&home)
                    .expect("restored")
                    .parked
                    .entry(a)
                    .or_default()
                    .extend(ops);
            }
            return Vec::new();
        }
        let count = new_shards.len() as u64;
        let mut created = Vec::new();
        for (i, mut s) in new_shards.into_iter().enumerate() {
            let id = s.id;
            s.status = match kind {
                MgmtKind::Merge { .. } => ShardStatus::Merging,
                _ => ShardStatus::Splitting,
            };
            let accounts: Vec<AccountId> = s.state.accounts().collect();
            for a in accounts {
                self.dir.assign(a, id);
            }
            self.registry.enroll(SignerId(id.0));
            self.penalties.enroll(id, stake_for(s.validators.len()));
            let mut rt = ShardRt::new(s);
            rt.client_fifo = fifo;
            rt.applied = applied.clone();
            let last = i as u64 + 1 == count;
            rt.ep_processed = if last {
                ep_processed - (ep_processed / count) * (count - 1)
            } else {
                ep_processed / count
            };
            rt.ep_busy = if last {
                ep_busy - (ep_busy / count) * (count - 1)
            } else {
                ep_busy / count
            };
            self.shards.insert(id, rt);
            created.push(id);
        }
        for (a, ops) in parked {
            let home = self.dir.home(a).expect("moved account");
            self.shards
                .get_mut(&home)
                .expect("created")
                .parked
                .entry(a)
                .or_default()
                .extend(ops);
        }
        for s in old {
            for node in self.gossip.values_mut() {
                node.forget(*s);
            }
            self.gossip.remove(s);
            self.versions.remove(s);
        }
        for &id in &created {
            self.gossip.insert(id, GossipNode::new());
        }
        match kind {
            MgmtKind::Split { .. } => self.stats.splits += 1,
            MgmtKind::Merge { .. } => self.stats.merges += 1,
            MgmtKind::None => {}
        }
        self.stats.max_shards = self.stats.max_shards.max(self.shards.len());
        self.trace.push(TraceRecord::Reconfigured {
            t: now,
            retired: old.to_vec(),
            created: created.clone(),
        });
        created
    }

    pub(super) fn on_reconfig_done(&mut self, shards: Vec<ShardId>) {
        for s in &shards {
            if let Some(rt) = self.shards.get_mut(s) {
                rt.s.status = ShardStatus::Active;
            }
        }
        self.reconfigs.retain(|r| r.created.as_ref() != Some(&shards));
        let held: Vec<TxHandle> = self.held.take();
        for h in held {
            self.route(h);
        }
        for s in shards {
            self.try_start(s);
        }
    }
}
