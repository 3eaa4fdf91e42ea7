//! Baseline cross-shard commit: coordinator-led two-phase commit with
//! blocking account locks. The coordinator is the lowest input shard.
//! Every phase step is an operation ordered by the shard's own block
//! consensus. A timed-out attempt is aborted and retried by the client
//! with exponential backoff; a "no" vote aborts for good.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use crate::ledger::{AccountId, Entry, ShardId};

use super::{AbortKind, Engine, Ev, Op, TraceRecord, TxHandle, TxStatus};

/// Attempts before a transaction is given up as timed out.
const MAX_ATTEMPTS: u32 = 8;

impl Engine {
    fn coordinator(&self, h: TxHandle) -> ShardId {
        *self.txs[&h].tx.input_shards().iter().next().expect("inputs")
    }

    pub(super) fn start_2pc(&mut self, h: TxHandle) {
        let e = self.txs.get_mut(&h).expect("present");
        e.attempt += 1;
        e.votes.clear();
        e.decided = None;
        let shards = Self::tx_shards(&e.tx);
        e.finish_left = shards.clone();
        let attempt = e.attempt;
        for s in shards {
            self.client_send(s, Op::Prepare(h, attempt));
        }
        let at = self.now() + self.cfg.lock_timeout;
        self.sched.schedule(at, Ev::Timeout2pc { h, attempt });
    }

    /// Phase one at a participant: lock every touched account, check the
    /// debits, vote.
    pub(super) fn exec_prepare(&mut self, s: ShardId, h: TxHandle, attempt: u32, op: Op) {
        let tx = self.txs[&h].tx.clone();
        let mine: BTreeSet<AccountId> = tx
            .inputs
            .iter()
            .filter(|l| l.shard == s)
            .map(|l| l.account)
            .chain(tx.outputs.iter().filter(|l| l.shard == s).map(|l| l.account))
            .collect();
        let rt = self.shards.get_mut(&s).expect("live");
        if let Some(&a) = mine.iter().find(|a| rt.locks.get(a).is_some_and(|&(o, _)| o != h)) {
            rt.lock_wait.entry(a).or_default().push_back(op);
            return;
        }
        let entries = tx.entries_for(s);
        match entries.iter().try_for_each(|en| rt.s.state.check(en, true)) {
            Err(crate::ledger::LedgerError::NonceGap { account, .. }) => {
                self.park(s, account, op);
                return;
            }
            Err(_) => {
                self.count_op(s, &tx);
                self.send_vote(s, h, attempt, false);
                return;
            }
            Ok(()) => {}
        }
        self.count_op(s, &tx);
        let rt = self.shards.get_mut(&s).expect("live");
        for a in mine {
            rt.locks.insert(a, (h, attempt));
        }
        self.send_vote(s, h, attempt, true);
    }

    fn send_vote(&mut self, from: ShardId, h: TxHandle, attempt: u32, yes: bool) {
        let to = self.coordinator(h);
        let d = if to == from { 0 } else { self.hop() };
        self.sched.schedule_in(d, Ev::Vote2pc { h, attempt, from, yes });
    }

    pub(super) fn on_vote_2pc(&mut self, h: TxHandle, attempt: u32, from: ShardId, yes: bool) {
        let now = self.now();
        let Some(e) = self.txs.get_mut(&h) else { return };
        if e.attempt != attempt || e.decided.is_some() || e.is_final() {
            return;
        }
        e.votes.insert(from, yes);
        let shards = Self::tx_shards(&e.tx);
        let coord = *e.tx.input_shards().iter().next().expect("inputs");
        if !yes {
            e.decided = Some(false);
            let inputs = e.tx.input_shards();
            for s in shards {
                self.shard_send(s, Op::Finish(h, attempt, false));
            }
            for s in inputs {
                self.shard_send(s, Op::Release(h));
            }
            self.finish_tx(h, TxStatus::Aborted(now, AbortKind::VotedNo));
            return;
        }
        if e.votes.len() == shards.len() {
            e.decided = Some(true);
            // The commit decision is logged through the coordinator's
            // consensus before participants hear it.
            self.shards
                .get_mut(&coord)
                .expect("live")
                .queue
                .push_back(Op::Decide(h, attempt, true));
            self.try_start(coord);
        }
    }

    pub(super) fn exec_decide(&mut self, s: ShardId, h: TxHandle, attempt: u32, commit: bool) {
        let tx = self.txs[&h].tx.clone();
        self.count_op(s, &tx);
        for p in Self::tx_shards(&tx) {
            if p == s {
                self.shards
                    .get_mut(&s)
                    .expect("live")
                    .queue
                    .push_front(Op::Finish(h, attempt, commit));
            } else {
                self.shard_send(p, Op::Finish(h, attempt, commit));
            }
        }
    }

    /// Phase two at a participant: apply (on commit) and unlock.
    pub(super) fn exec_finish(&mut self, s: ShardId, h: TxHandle, attempt: u32, commit: bool) {
        let now = self.now();
        let tx = self.txs[&h].tx.clone();
        self.count_op(s, &tx);
        let mut advanced: Vec<AccountId> = Vec::new();
        if commit {
            let entries = tx.entries_for(s);
            let rt = self.shards.get_mut(&s).expect("live");
            match rt.s.state.apply_logged(&entries, true) {
                Ok(_) => {
                    for (i, l) in tx.outputs.iter().enumerate() {
                        if l.shard == s {
                            rt.applied.insert((tx.id(), i as u32));
                        }
                    }
                    for en in &entries {
                        rt.dirty.insert(en.account());
                        if let Entry::Debit { account, .. } = en {
                            advanced.push(*account);
                        }
                    }
                }
                Err(err) => {
                    let msg = alloc::format!("2pc commit of {h:?} failed at {s:?}: {err}");
                    self.violation(msg);
                }
            }
        }
        let rt = self.shards.get_mut(&s).expect("live");
        let held: Vec<AccountId> = rt
            .locks
            .iter()
            .filter(|(_, &(o, a))| o == h && a == attempt)
            .map(|(&acc, _)| acc)
            .collect();
        for a in held {
            rt.locks.remove(&a);
            if let Some(waiting) = rt.lock_wait.remove(&a) {
                for op in waiting.into_iter().rev() {
                    rt.queue.push_front(op);
                }
            }
        }
        for a in advanced {
            self.unpark(s, a);
        }
        if commit {
            let e = self.txs.get_mut(&h).expect("present");
            e.finish_left.remove(&s);
            if e.finish_left.is_empty() {
                self.finish_tx(h, TxStatus::Committed(now));
            }
        }
    }

    pub(super) fn on_timeout_2pc(&mut self, h: TxHandle, attempt: u32) {
        let now = self.now();
        let Some(e) = self.txs.get_mut(&h) else { return };
        if e.attempt != attempt || e.decided.is_some() || e.is_final() {
            return;
        }
        e.decided = Some(false);
        let shards = Self::tx_shards(&e.tx);
        let retries = e.retries;
        e.retries += 1;
        for s in shards {
            self.shard_send(s, Op::Finish(h, attempt, false));
        }
        if attempt >= MAX_ATTEMPTS {
            for s in self.txs[&h].tx.input_shards() {
                self.shard_send(s, Op::Release(h));
            }
            self.finish_tx(h, TxStatus::Aborted(now, AbortKind::Timeout));
            return;
        }
        self.stats.retries += 1;
        self.trace.push(TraceRecord::Retry { t: now, h });
        let backoff = self.cfg.retry_backoff << retries.min(10);
        self.sched.schedule(now + backoff, Ev::Retry { h });
    }
}
