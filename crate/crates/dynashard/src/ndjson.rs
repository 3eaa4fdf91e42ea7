//! Traces as newline-delimited JSON: one object per record, tagged by
//! `kind`, times in integer microseconds and digests in hex.

use std::io::{BufRead, Write};

use dynashard_core::engine::{AbortKind, MgmtTag, TraceRecord, TxHandle};
use dynashard_core::ledger::{Digest, ShardId, SimTime};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TraceIoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum Line {
    Submit {
        t: SimTime,
        h: u64,
        tx: String,
        cross: bool,
    },
    Commit {
        t: SimTime,
        h: u64,
        tx: String,
    },
    Abort {
        t: SimTime,
        h: u64,
        tx: String,
        reason: String,
    },
    Retry {
        t: SimTime,
        h: u64,
    },
    Block {
        t: SimTime,
        shard: u32,
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
        shard: u32,
        v: f64,
        u: f64,
    },
    Mgmt {
        t: SimTime,
        epoch: u64,
        tag: String,
        shards: Vec<u32>,
    },
    Reconfigured {
        t: SimTime,
        retired: Vec<u32>,
        created: Vec<u32>,
    },
    Crash {
        t: SimTime,
        shard: u32,
    },
    Recover {
        t: SimTime,
        shard: u32,
    },
    Challenge {
        t: SimTime,
        id: u64,
        tx: String,
    },
    Resolved {
        t: SimTime,
        id: u64,
        rolled_back: bool,
    },
}

fn ids(v: &[ShardId]) -> Vec<u32> {
    v.iter().map(|s| s.0).collect()
}

fn shard_ids(v: &[u32]) -> Vec<ShardId> {
    v.iter().map(|&s| ShardId(s)).collect()
}

fn hex_digest(d: &Digest) -> String {
    hex::encode(d.0)
}

fn parse_digest(s: &str) -> Result<Digest, String> {
    let bytes = hex::decode(s).map_err(|e| format!("bad digest {s:?}: {e}"))?;
    let arr: [u8; 32] = bytes.try_into().map_err(|_| format!("digest {s:?} is not 32 bytes"))?;
    Ok(Digest(arr))
}

fn parse_abort(s: &str) -> Result<AbortKind, String> {
    [
        AbortKind::Refused,
        AbortKind::Timeout,
        AbortKind::Excluded,
        AbortKind::VotedNo,
        AbortKind::Rejected,
    ]
    .into_iter()
    .find(|k| k.as_str() == s)
    .ok_or_else(|| format!("unknown abort reason {s:?}"))
}

fn tag_name(t: MgmtTag) -> &'static str {
    match t {
        MgmtTag::Split => "split",
        MgmtTag::Merge => "merge",
    }
}

fn parse_tag(s: &str) -> Result<MgmtTag, String> {
    match s {
        "split" => Ok(MgmtTag::Split),
        "merge" => Ok(MgmtTag::Merge),
        _ => Err(format!("unknown management tag {s:?}")),
    }
}

impl From<&TraceRecord> for Line {
    fn from(r: &TraceRecord) -> Line {
        match r {
            TraceRecord::Submit { t, h, tx, cross } => Line::Submit {
                t: *t,
                h: h.0,
                tx: hex_digest(tx),
                cross: *cross,
            },
            TraceRecord::Commit { t, h, tx } => Line::Commit {
                t: *t,
                h: h.0,
                tx: hex_digest(tx),
            },
            TraceRecord::Abort { t, h, tx, kind } => Line::Abort {
                t: *t,
                h: h.0,
                tx: hex_digest(tx),
                reason: kind.as_str().to_string(),
            },
            TraceRecord::Retry { t, h } => Line::Retry { t: *t, h: h.0 },
            TraceRecord::Block { t, shard, ops, latency } => Line::Block {
                t: *t,
                shard: shard.0,
                ops: *ops,
                latency: *latency,
            },
            TraceRecord::Batch {
                t,
                seq,
                txs,
                excluded,
                view,
                latency,
            } => Line::Batch {
                t: *t,
                seq: *seq,
                txs: *txs,
                excluded: *excluded,
                view: *view,
                latency: *latency,
            },
            TraceRecord::Gauge { t, epoch, shard, v, u } => Line::Gauge {
                t: *t,
                epoch: *epoch,
                shard: shard.0,
                v: *v,
                u: *u,
            },
            TraceRecord::Mgmt { t, epoch, tag, shards } => Line::Mgmt {
                t: *t,
                epoch: *epoch,
                tag: tag_name(*tag).to_string(),
                shards: ids(shards),
            },
            TraceRecord::Reconfigured { t, retired, created } => Line::Reconfigured {
                t: *t,
                retired: ids(retired),
                created: ids(created),
            },
            TraceRecord::Crash { t, shard } => Line::Crash { t: *t, shard: shard.0 },
            TraceRecord::Recover { t, shard } => Line::Recover { t: *t, shard: shard.0 },
            TraceRecord::Challenge { t, id, tx } => Line::Challenge {
                t: *t,
                id: *id,
                tx: hex_digest(tx),
            },
            TraceRecord::Resolved { t, id, rolled_back } => Line::Resolved {
                t: *t,
                id: *id,
                rolled_back: *rolled_back,
            },
        }
    }
}

impl TryFrom<Line> for TraceRecord {
    type Error = String;

    fn try_from(l: Line) -> Result<TraceRecord, String> {
        Ok(match l {
            Line::Submit { t, h, tx, cross } => TraceRecord::Submit {
                t,
                h: TxHandle(h),
                tx: parse_digest(&tx)?,
                cross,
            },
            Line::Commit { t, h, tx } => TraceRecord::Commit {
                t,
                h: TxHandle(h),
                tx: parse_digest(&tx)?,
            },
            Line::Abort { t, h, tx, reason } => TraceRecord::Abort {
                t,
                h: TxHandle(h),
                tx: parse_digest(&tx)?,
                kind: parse_abort(&reason)?,
            },
            Line::Retry { t, h } => TraceRecord::Retry { t, h: TxHandle(h) },
            Line::Block { t, shard, ops, latency } => TraceRecord::Block {
                t,
                shard: ShardId(shard),
                ops,
                latency,
            },
            Line::Batch {
                t,
                seq,
                txs,
                excluded,
                view,
                latency,
            } => TraceRecord::Batch {
                t,
                seq,
                txs,
                excluded,
                view,
                latency,
            },
            Line::Gauge { t, epoch, shard, v, u } => TraceRecord::Gauge {
                t,
                epoch,
                shard: ShardId(shard),
                v,
                u,
            },
            Line::Mgmt { t, epoch, tag, shards } => TraceRecord::Mgmt {
                t,
                epoch,
                tag: parse_tag(&tag)?,
                shards: shard_ids(&shards),
            },
            Line::Reconfigured { t, retired, created } => TraceRecord::Reconfigured {
                t,
                retired: shard_ids(&retired),
                created: shard_ids(&created),
            },
            Line::Crash { t, shard } => TraceRecord::Crash {
                t,
                shard: ShardId(shard),
            },
            Line::Recover { t, shard } => TraceRecord::Recover {
                t,
                shard: ShardId(shard),
            },
            Line::Challenge { t, id, tx } => TraceRecord::Challenge {
                t,
                id,
                tx: parse_digest(&tx)?,
            },
            Line::Resolved { t, id, rolled_back } => TraceRecord::Resolved { t, id, rolled_back },
        })
    }
}

/// Write one JSON object per record.
pub fn write_trace<W: Write>(records: &[TraceRecord], mut out: W) -> Result<(), TraceIoError> {
    for r in records {
        serde_json::to_writer(&mut out, &Line::from(r)).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Read records back; blank lines are skipped.
pub fn read_trace<R: BufRead>(input: R) -> Result<Vec<TraceRecord>, TraceIoError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |msg: String| TraceIoError::Malformed { line: i + 1, msg };
        let parsed: Line = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        out.push(TraceRecord::try_from(parsed).map_err(malformed)?);
    }
    Ok(out)
}
