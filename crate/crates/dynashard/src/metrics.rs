//! Metrics computed from a run's trace: throughput, latency, batch
//! makespan and load balance across shards.

use std::collections::{BTreeMap, BTreeSet};

use dynashard_core::engine::{TraceRecord, TxHandle};
use dynashard_core::ledger::{ShardId, SimTime, SECONDS};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("nothing to measure")]
    EmptyInput,
    #[error("batch incomplete: {unresolved} of {size} transactions never resolved")]
    BatchIncomplete { unresolved: usize, size: usize },
}

/// Mean absolute deviation of per-shard load from the equal share, in the
/// units of `loads`.
pub fn util_distance(loads: &[f64]) -> Result<f64, MetricsError> {
    if loads.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let n = loads.len() as f64;
    let mean = loads.iter().sum::<f64>() / n;
    Ok(loads.iter().map(|l| (l - mean).abs()).sum::<f64>() / n)
}

/// Share of capacity that is not lost to imbalance, given a distance in
/// percentage points of shard capacity.
pub fn efficiency(util_distance: f64) -> f64 {
    (100.0 - util_distance).clamp(0.0, 100.0)
}

/// Half-open on the left: covers times `t` with `start < t <= end`, so
/// adjacent windows partition a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub start: SimTime,
    pub end: SimTime,
}

impl Window {
    pub fn new(start: SimTime, end: SimTime) -> Self {
        Window { start, end }
    }

    pub fn contains(&self, t: SimTime) -> bool {
        self.start < t && t <= self.end
    }

    pub fn seconds(&self) -> f64 {
        self.end.saturating_sub(self.start) as f64 / SECONDS as f64
    }
}

fn commit_times(trace: &[TraceRecord]) -> impl Iterator<Item = SimTime> + '_ {
    trace.iter().filter_map(|r| match r {
        TraceRecord::Commit { t, .. } => Some(*t),
        _ => None,
    })
}

/// Commits per sim-second inside `window`; zero for an empty window.
pub fn tps(trace: &[TraceRecord], window: Window) -> f64 {
    let secs = window.seconds();
    if secs <= 0.0 {
        return 0.0;
    }
    commit_times(trace).filter(|&t| window.contains(t)).count() as f64 / secs
}

/// From time zero to the last commit.
pub fn run_window(trace: &[TraceRecord]) -> Window {
    Window::new(0, commit_times(trace).max().unwrap_or(0))
}

/// Sim-time from the first submit to the last commit of `batch`. Every
/// transaction of the batch must have been submitted and resolved; a batch
/// in which nothing committed measures up to its last abort.
pub fn batch_latency(trace: &[TraceRecord], batch: &BTreeSet<TxHandle>) -> Result<SimTime, MetricsError> {
    if batch.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut first_submit: Option<SimTime> = None;
    let mut last_commit: Option<SimTime> = None;
    let mut last_abort: Option<SimTime> = None;
    let mut resolved: BTreeSet<TxHandle> = BTreeSet::new();
    let mut submitted: BTreeSet<TxHandle> = BTreeSet::new();
    for r in trace {
        match r {
            TraceRecord::Submit { t, h, .. } if batch.contains(h) => {
                submitted.insert(*h);
                first_submit = Some(first_submit.map_or(*t, |f| f.min(*t)));
            }
            TraceRecord::Commit { t, h, .. } if batch.contains(h) => {
                resolved.insert(*h);
                last_commit = Some(last_commit.map_or(*t, |l| l.max(*t)));
            }
            TraceRecord::Abort { t, h, .. } if batch.contains(h) => {
                resolved.insert(*h);
                last_abort = Some(last_abort.map_or(*t, |l| l.max(*t)));
            }
            _ => {}
        }
    }
    let unresolved = batch
        .iter()
        .filter(|h| !submitted.contains(h) || !resolved.contains(h))
        .count();
    if unresolved > 0 {
        return Err(MetricsError::BatchIncomplete {
            unresolved,
            size: batch.len(),
        });
    }
    let start = first_submit.expect("every member was submitted");
    let end = last_commit.or(last_abort).expect("every member resolved");
    Ok(end.saturating_sub(start))
}

/// Every submitted transaction of a trace.
pub fn submitted(trace: &[TraceRecord]) -> BTreeSet<TxHandle> {
    trace
        .iter()
        .filter_map(|r| match r {
            TraceRecord::Submit { h, .. } => Some(*h),
            _ => None,
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LatencyStats {
    pub count: usize,
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
}

/// Commit minus submit, in sim-seconds, for every committed transaction.
pub fn latencies(trace: &[TraceRecord]) -> Vec<f64> {
    let mut submit: BTreeMap<TxHandle, SimTime> = BTreeMap::new();
    let mut out = Vec::new();
    for r in trace {
        match r {
            TraceRecord::Submit { t, h, .. } => {
                submit.entry(*h).or_insert(*t);
            }
            TraceRecord::Commit { t, h, .. } => {
                if let Some(s) = submit.get(h) {
                    out.push(t.saturating_sub(*s) as f64 / SECONDS as f64);
                }
            }
            _ => {}
        }
    }
    out
}

/// Nearest-rank percentile of sorted data.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn latency_stats(trace: &[TraceRecord]) -> LatencyStats {
    let mut v = latencies(trace);
    if v.is_empty() {
        return LatencyStats::default();
    }
    v.sort_by(f64::total_cmp);
    LatencyStats {
        count: v.len(),
        mean: v.iter().sum::<f64>() / v.len() as f64,
        p50: percentile(&v, 50.0),
        p95: percentile(&v, 95.0),
    }
}

/// Per-epoch volume gauges (percent of capacity) of the live shards.
pub fn gauge_series(trace: &[TraceRecord]) -> BTreeMap<u64, (SimTime, BTreeMap<ShardId, f64>)> {
    let mut out: BTreeMap<u64, (SimTime, BTreeMap<ShardId, f64>)> = BTreeMap::new();
    for r in trace {
        if let TraceRecord::Gauge { t, epoch, shard, v, .. } = r {
            let e = out.entry(*epoch).or_insert((*t, BTreeMap::new()));
            e.1.insert(*shard, *v);
        }
    }
    out
}

/// Load balance before management acts and once it has settled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Utilization {
    /// Distance over the first epoch.
    pub before: f64,
    /// Mean distance over the settled epochs.
    pub after: f64,
    /// Number of epochs averaged into `after`.
    pub epochs: usize,
}

/// Utilization distance per epoch, restricted to epochs that closed while
/// transactions were still arriving (idle tails would read as balanced).
/// `after` averages the epochs numbered above `settle`.
pub fn utilization(trace: &[TraceRecord], settle: u64) -> Option<Utilization> {
    let last_submit = trace
        .iter()
        .filter_map(|r| match r {
            TraceRecord::Submit { t, .. } => Some(*t),
            _ => None,
        })
        .max()?;
    let series = gauge_series(trace);
    let per_epoch: Vec<(u64, f64)> = series
        .iter()
        .filter(|(_, (t, _))| *t <= last_submit)
        .filter_map(|(&e, (_, loads))| {
            let v: Vec<f64> = loads.values().copied().collect();
            util_distance(&v).ok().map(|d| (e, d))
        })
        .collect();
    let before = per_epoch.first()?.1;
    let settled: Vec<f64> = per_epoch.iter().filter(|(e, _)| *e > settle).map(|(_, d)| *d).collect();
    if settled.is_empty() {
        return None;
    }
    Some(Utilization {
        before,
        after: settled.iter().sum::<f64>() / settled.len() as f64,
        epochs: settled.len(),
    })
}

/// Mean and sample standard deviation.
pub fn mean_stdev(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Relative difference `(new − old) / old`, in percent.
pub fn improvement_pct(new: f64, old: f64) -> f64 {
    if old == 0.0 {
        return 0.0;
    }
    (new - old) / old * 100.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use dynashard_core::ledger::Digest;

    fn submit(t: SimTime, h: u64) -> TraceRecord {
        TraceRecord::Submit {
            t,
            h: TxHandle(h),
            tx: Digest::ZERO,
            cross: false,
        }
    }

    fn commit(t: SimTime, h: u64) -> TraceRecord {
        TraceRecord::Commit {
            t,
            h: TxHandle(h),
            tx: Digest::ZERO,
        }
    }

    #[test]
    fn util_distance_examples() {
        assert_eq!(util_distance(&[10.0; 4]), Ok(0.0));
        assert_eq!(util_distance(&[40.0, 0.0, 0.0, 0.0]), Ok(15.0));
        assert_eq!(util_distance(&[7.0]), Ok(0.0));
        assert_eq!(util_distance(&[]), Err(MetricsError::EmptyInput));
    }

    #[test]
    fn tps_examples() {
        let trace: Vec<TraceRecord> = (0..100).map(|i| commit(1 + i * 19_000, i)).collect();
        assert_eq!(tps(&trace, Window::new(0, 2 * SECONDS)), 50.0);
        assert_eq!(tps(&trace, Window::new(5, 5)), 0.0);
        assert_eq!(tps(&[], Window::new(0, SECONDS)), 0.0);
    }

    #[test]
    fn batch_latency_examples() {
        let one = [submit(0, 1), commit(5, 1)];
        assert_eq!(batch_latency(&one, &submitted(&one)), Ok(5));
        let two = [submit(0, 1), submit(2, 2), commit(4, 1), commit(9, 2)];
        assert_eq!(batch_latency(&two, &submitted(&two)), Ok(9));
        let open = [submit(0, 1), submit(2, 2), commit(4, 1)];
        assert!(matches!(
            batch_latency(&open, &submitted(&open)),
            Err(MetricsError::BatchIncomplete { unresolved: 1, size: 2 })
        ));
    }

    #[test]
    fn latency_percentiles() {
        let mut trace = Vec::new();
        for i in 0..100u64 {
            trace.push(submit(0, i));
            trace.push(commit((i + 1) * SECONDS / 100, i));
        }
        let s = latency_stats(&trace);
        assert_eq!(s.count, 100);
        assert!((s.p50 - 0.5).abs() < 1e-9);
        assert!((s.p95 - 0.95).abs() < 1e-9);
        assert!((s.mean - 0.505).abs() < 1e-9);
    }

    #[test]
    fn mean_stdev_and_improvement() {
        let (m, s) = mean_stdev(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
        assert_eq!(m, 5.0);
        assert!((s - 2.138089935).abs() < 1e-6);
        assert_eq!(improvement_pct(120.0, 100.0), 20.0);
        assert_eq!(efficiency(3.5), 96.5);
    }
}
