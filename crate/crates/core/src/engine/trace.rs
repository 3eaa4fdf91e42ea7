//! Ordered event trace with a running digest.

use alloc::vec::Vec;

use crate::ledger::{hash_parts, Digest, DomainTag, Encoder, ObjectKind, ShardId, SimTime};

/// Client-side handle of a submitted transaction. It stays stable when the
/// transaction is rebuilt after a reconfiguration moves its accounts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TxHandle(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum AbortKind {
    /// An input shard refused (balance, nonce, ownership).
    Refused,
    /// Lock timeout with partial signatures missing or invalid.
    Timeout,
    /// Σ failed the committee's validity filter.
    Excluded,
    /// Baseline: a participant voted no.
    VotedNo,
    /// Intra-shard transaction rejected by its shard.
    Rejected,
}

impl AbortKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AbortKind::Refused => "refused",
            AbortKind::Timeout => "timeout",
            AbortKind::Excluded => "excluded",
            AbortKind::VotedNo => "voted_no",
            AbortKind::Rejected => "rejected",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MgmtTag {
    Split,
    Merge,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TraceRecord {
    Submit {
        t: SimTime,
        h: TxHandle,
        tx: Digest,
        cross: bool,
    },
    Commit {
        t: SimTime,
        h: TxHandle,
        tx: Digest,
    },
    Abort {
        t: SimTime,
        h: TxHandle,
        tx: Digest,
        kind: AbortKind,
    },
    /// Baseline only: an aborted attempt that the client retries.
    Retry {
        t: SimTime,
        h: TxHandle,
    },
    Block {
        t: SimTime,
        shard: ShardId,
        ops: u32,
        latency: SimTime,
    },
    Batch {
        t: SimTime,
        seq: u64,
        txs: u32,
        excluded: u32,
        view: u64,
        latency: SimTime,
    },
    Gauge {
        t: SimTime,
        epoch: u64,
        shard: ShardId,
        v: f64,
        u: f64,
    },
    Mgmt {
        t: SimTime,
        epoch: u64,
        tag: MgmtTag,
        shards: Vec<ShardId>,
    },
    Reconfigured {
        t: SimTime,
        retired: Vec<ShardId>,
        created: Vec<ShardId>,
    },
    Crash {
        t: SimTime,
        shard: ShardId,
    },
    Recover {
        t: SimTime,
        shard: ShardId,
    },
    Challenge {
        t: SimTime,
        id: u64,
        tx: Digest,
    },
    Resolved {
        t: SimTime,
        id: u64,
        rolled_back: bool,
    },
}

impl TraceRecord {
    pub fn time(&self) -> SimTime {
        match *self {
            TraceRecord::Submit { t, .. }
            | TraceRecord::Commit { t, .. }
            | TraceRecord::Abort { t, .. }
            | TraceRecord::Retry { t, .. }
            | TraceRecord::Block { t, .. }
            | TraceRecord::Batch { t, .. }
            | TraceRecord::Gauge { t, .. }
            | TraceRecord::Mgmt { t, .. }
            | TraceRecord::Reconfigured { t, .. }
            | TraceRecord::Crash { t, .. }
            | TraceRecord::Recover { t, .. }
            | TraceRecord::Challenge { t, .. }
            | TraceRecord::Resolved { t, .. } => t,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            TraceRecord::Submit { .. } => "submit",
            TraceRecord::Commit { .. } => "commit",
            TraceRecord::Abort { .. } => "abort",
            TraceRecord::Retry { .. } => "retry",
            TraceRecord::Block { .. } => "block",
            TraceRecord::Batch { .. } => "batch",
            TraceRecord::Gauge { .. } => "gauge",
            TraceRecord::Mgmt { .. } => "mgmt",
            TraceRecord::Reconfigured { .. } => "reconfigured",
            TraceRecord::Crash { .. } => "crash",
            TraceRecord::Recover { .. } => "recover",
            TraceRecord::Challenge { .. } => "challenge",
            TraceRecord::Resolved { .. } => "resolved",
        }
    }

    /// Canonical encoding, used for the running digest.
    pub fn encode(&self) -> Vec<u8> {
        let mut e = Encoder::new(ObjectKind::TraceRecord);
        e.bytes(self.kind().as_bytes()).u64(self.time());
        let shards = |e: &mut Encoder, v: &[ShardId]| {
            e.len_prefix(v.len());
            for s in v {
                e.u32(s.0);
            }
        };
        match self {
            TraceRecord::Submit { h, tx, cross, .. } => {
                e.u64(h.0).digest(tx).bool(*cross);
            }
            TraceRecord::Commit { h, tx, .. } => {
                e.u64(h.0).digest(tx);
            }
            TraceRecord::Abort { h, tx, kind, .. } => {
                e.u64(h.0).digest(tx).u8(*kind as u8);
            }
            TraceRecord::Retry { h, .. } => {
                e.u64(h.0);
            }
            TraceRecord::Block {
                shard, ops, latency, ..
            } => {
                e.u32(shard.0).u32(*ops).u64(*latency);
            }
            TraceRecord::Batch {
                seq,
                txs,
                excluded,
                view,
                latency,
                ..
            } => {
                e.u64(*seq).u32(*txs).u32(*excluded).u64(*view).u64(*latency);
            }
            TraceRecord::Gauge { epoch, shard, v, u, .. } => {
                e.u64(*epoch).u32(shard.0).u64(v.to_bits()).u64(u.to_bits());
            }
            TraceRecord::Mgmt {
                epoch, tag, shards: s, ..
            } => {
                e.u64(*epoch).u8(*tag as u8);
                shards(&mut e, s);
            }
            TraceRecord::Reconfigured { retired, created, .. } => {
                shards(&mut e, retired);
                shards(&mut e, created);
            }
            TraceRecord::Crash { shard, .. } | TraceRecord::Recover { shard, .. } => {
                e.u32(shard.0);
            }
            TraceRecord::Challenge { id, tx, .. } => {
                e.u64(*id).digest(tx);
            }
            TraceRecord::Resolved { id, rolled_back, .. } => {
                e.u64(*id).bool(*rolled_back);
            }
        }
        e.finish()
    }
}

/// Append-only trace. The digest chains every record, so two traces have
/// equal digests only if they hold the same records in the same order.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    records: Vec<TraceRecord>,
    digest: Digest,
}

impl Default for Trace {
    fn default() -> Self {
        Self::new()
    }
}

impl Trace {
    pub fn new() -> Self {
        Trace {
            records: Vec::new(),
            digest: Digest::ZERO,
        }
    }

    pub fn push(&mut self, r: TraceRecord) {
        self.digest = chain(&self.digest, &r);
        self.records.push(r);
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn digest(&self) -> Digest {
        self.digest
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// One step of the digest chain.
pub fn chain(prev: &Digest, r: &TraceRecord) -> Digest {
    hash_parts(DomainTag::Msg, &[&prev.0, &r.encode()])
}

/// Recompute the digest of a record sequence from scratch.
pub fn digest_of<'a>(records: impl IntoIterator<Item = &'a TraceRecord>) -> Digest {
    records.into_iter().fold(Digest::ZERO, |d, r| chain(&d, r))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_matches_recomputation_and_order_matters() {
        let a = TraceRecord::Commit {
            t: 5,
            h: TxHandle(1),
            tx: Digest([1; 32]),
        };
        let b = TraceRecord::Block {
            t: 6,
            shard: ShardId(2),
            ops: 3,
            latency: 9,
        };
        let mut t = Trace::new();
        assert_eq!(t.digest(), Digest::ZERO);
        t.push(a.clone());
        t.push(b.clone());
        assert_eq!(t.digest(), digest_of(t.records()));
        assert_ne!(t.digest(), digest_of([&b, &a]));
    }
}
