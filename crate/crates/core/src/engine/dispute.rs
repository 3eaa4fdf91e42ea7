//! State gossip and dispute handling inside the engine.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use crate::ledger::ShardId;
use crate::simnet::adversary::{Action, Hook};
use crate::syncdispute::{
    gossip_fanout, gossip_round, reverify, DecisionRecord, DisputeEvidence, GossipMsg, Outcome, VerifyCtx, Vote,
};
use crate::thresh::SignerId;

use super::{Engine, Ev, Homes, TraceRecord, TxHandle, TxStatus};

impl Engine {
    /// A globally ordered decision: remember the first spend of every
    /// (account, nonce) and challenge any later decision reusing one.
    pub(super) fn check_conflicts(&mut self, h: TxHandle, rec: &DecisionRecord) {
        let id = rec.tx.id();
        let mut earlier: Option<DecisionRecord> = None;
        for l in &rec.tx.inputs {
            match self.first_spend.get(&(l.account, l.nonce)) {
                Some(&(_, first)) if first != id => {
                    if earlier.is_none() {
                        earlier = self.decisions.get(&first).cloned();
                    }
                }
                Some(_) => {}
                None => {
                    self.first_spend.insert((l.account, l.nonce), (rec.position, id));
                }
            }
        }
        let Some(first) = earlier else { return };
        let involved: BTreeSet<ShardId> = Self::tx_shards(&rec.tx);
        let challenger = self
            .shards
            .keys()
            .copied()
            .find(|s| !self.adversary.controls_shard(*s))
            .unwrap_or(ShardId(0));
        let evidence = alloc::vec![DisputeEvidence::ConflictingDecisions {
            first,
            second: rec.clone(),
        }];
        match self
            .board
            .open_challenge(challenger, id, evidence, involved, self.round)
        {
            Ok(cid) => {
                self.challenge_tx.insert(cid, h);
                self.stats.challenges += 1;
                self.trace.push(TraceRecord::Challenge {
                    t: self.now(),
                    id: cid,
                    tx: id,
                });
            }
            Err(e) => {
                let msg = alloc::format!("challenge rejected: {e}");
                self.violation(msg);
            }
        }
    }

    pub(super) fn on_gossip(&mut self) {
        let now = self.now();
        self.round += 1;
        self.stats.gossip_rounds += 1;
        // Every active shard announces its root when it changed.
        let ids: Vec<ShardId> = self.shards.keys().copied().collect();
        for s in ids {
            let rt = self.shards.get_mut(&s).expect("live");
            if !rt.is_active() {
                continue;
            }
            rt.flush_tree();
            let root = rt.s.tree.root();
            let known = self.gossip.get(&s).and_then(|g| g.view.roots.get(&s).copied());
            if known.is_some_and(|(r, _)| r == root) {
                continue;
            }
            let version = self.versions.entry(s).or_insert(0);
            *version += 1;
            let signer = self.registry.signer(SignerId(s.0)).expect("enrolled shard");
            let msg = GossipMsg::signed(s, root, *version, Vec::new(), &signer);
            if let Some(node) = self.gossip.get_mut(&s) {
                let _ = node.receive(&msg, &self.registry);
            }
        }
        let fanout = gossip_fanout(self.gossip.len());
        gossip_round(&mut self.gossip, fanout, &self.registry, &mut self.gossip_rng);
        self.vote_and_resolve();
        self.sched.schedule(now + self.cfg.gossip_interval, Ev::Gossip);
    }

    fn vote_and_resolve(&mut self) {
        for cid in self.board.open_ids() {
            let Some(c) = self.board.challenge(cid).cloned() else {
                continue;
            };
            if self.round < c.closes_at {
                let voters: Vec<ShardId> = self
                    .shards
                    .iter()
                    .filter(|(id, rt)| rt.is_active() && !c.votes.contains_key(id))
                    .map(|(&id, _)| id)
                    .collect();
                for s in voters {
                    let honest = reverify(
                        &c,
                        &VerifyCtx {
                            registry: &self.registry,
                            first_spend: &self.first_spend,
                            record: self.decisions.get(&c.disputed_tx),
                        },
                    );
                    let verdict = match self.adversary.inject(Hook::Vote { shard: s }) {
                        Action::Vote(v) => v,
                        _ => honest,
                    };
                    let signer = self.registry.signer(SignerId(s.0)).expect("enrolled shard");
                    let vote = Vote {
                        shard: s,
                        verdict,
                        stake: self.penalties.stake(s),
                        reputation: self.penalties.reputation(s),
                        evidence_attached: Vec::new(),
                        signature: signer.sign(Vote::signing_digest(cid, s, verdict)),
                    };
                    let _ = self.board.cast_vote(cid, vote, self.round, &self.registry);
                }
                continue;
            }
            let Some(&h) = self.challenge_tx.get(&cid) else {
                continue;
            };
            let enablers: BTreeSet<ShardId> = self.txs[&h].tx.input_shards();
            let outcome = match self.board.resolve(cid, self.round, &enablers, &mut self.penalties) {
                Ok(o) => o,
                Err(_) => continue,
            };
            let rolled_back = outcome == Outcome::RolledBack && self.roll_back(h);
            self.trace.push(TraceRecord::Resolved {
                t: self.now(),
                id: cid,
                rolled_back,
            });
        }
    }

    /// Undo a committed (or partly committed) decision.
    fn roll_back(&mut self, h: TxHandle) -> bool {
        let now = self.now();
        let id = self.txs[&h].tx.id();
        let mut homes = Homes {
            dir: &self.dir,
            shards: &mut self.shards,
        };
        match self.effects.rollback(id, &mut homes) {
            Ok(_) => {
                let e = self.txs.get_mut(&h).expect("present");
                let was_pending = e.status == super::TxStatus::Pending;
                e.status = TxStatus::RolledBack(now);
                self.stats.rolled_back += 1;
                if was_pending {
                    self.unresolved -= 1;
                }
                // Outputs not applied yet will be skipped; nothing is owed.
                let shards = Self::tx_shards(&self.txs[&h].tx);
                for s in shards {
                    self.release_shard(h, s);
                    if let Some(rt) = self.shards.get_mut(&s) {
                        rt.routed.remove(&h);
                    }
                }
                true
            }
            Err(e) => {
                let msg = alloc::format!("rollback of {h:?} failed: {e}");
                self.violation(msg);
                false
            }
        }
    }
}
