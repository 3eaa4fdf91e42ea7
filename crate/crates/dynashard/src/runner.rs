//! Executes scenario runs, several seeds at once on worker threads. Each
//! run owns its engine, so runs share no mutable state and every result
//! is independent of scheduling.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use dynashard_core::engine::{Engine, Mode, Trace, TxStatus};
use dynashard_core::ledger::SECONDS;
use serde::Serialize;

use crate::metrics::{self, MetricsError};
use crate::scenario::{RunSpec, ScenarioError};

/// Per-run numbers; one CSV row each.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunMetrics {
    pub scenario: String,
    pub variant: String,
    pub mode: &'static str,
    pub seed: u64,
    pub shards_initial: u32,
    pub shards_final: usize,
    pub submitted: u64,
    pub committed: u64,
    pub aborted: u64,
    pub rolled_back: u64,
    pub unresolved: u64,
    /// Commits per sim-second from time zero to the last commit.
    pub tps: f64,
    pub latency_mean_s: f64,
    pub latency_p50_s: f64,
    pub latency_p95_s: f64,
    /// First submit to last commit; empty when the batch did not finish.
    pub batch_latency_s: Option<f64>,
    pub util_before: Option<f64>,
    pub util_after: Option<f64>,
    pub efficiency_pct: Option<f64>,
    pub splits: u64,
    pub merges: u64,
    pub committed_double_spends: u64,
    pub conserved: bool,
    pub violations: usize,
    pub sim_end_s: f64,
    pub digest: String,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub spec: RunSpec,
    pub metrics: RunMetrics,
    /// Set when some submitted transaction never resolved.
    pub incomplete: Option<MetricsError>,
    pub trace: Trace,
}

pub fn mode_name(m: Mode) -> &'static str {
    match m {
        Mode::DynaShard => "dynashard",
        Mode::Baseline => "baseline",
    }
}

/// Run one engine to completion and measure it.
pub fn run_one(spec: &RunSpec) -> Result<RunOutcome, ScenarioError> {
    let mut engine = Engine::new(spec.config.clone()).map_err(|source| ScenarioError::Config {
        variant: spec.variant.clone(),
        source,
    })?;
    engine.run();
    let trace = engine.trace().clone();
    let records = trace.records();
    let stats = engine.stats();
    let lat = metrics::latency_stats(records);
    let batch = metrics::batch_latency(records, &metrics::submitted(records));
    let util = metrics::utilization(records, spec.settle_epochs);
    let unresolved = engine.txs().filter(|(_, t)| t.status == TxStatus::Pending).count() as u64;
    let m = RunMetrics {
        scenario: spec.scenario.clone(),
        variant: spec.variant.clone(),
        mode: mode_name(spec.config.mode),
        seed: spec.seed,
        shards_initial: spec.config.shards,
        shards_final: engine.shard_ids().len(),
        submitted: stats.submitted,
        committed: stats.committed,
        aborted: stats.aborted,
        rolled_back: stats.rolled_back,
        unresolved,
        tps: metrics::tps(records, metrics::run_window(records)),
        latency_mean_s: lat.mean,
        latency_p50_s: lat.p50,
        latency_p95_s: lat.p95,
        batch_latency_s: batch.as_ref().ok().map(|&b| b as f64 / SECONDS as f64),
        util_before: util.map(|u| u.before),
        util_after: util.map(|u| u.after),
        efficiency_pct: util.map(|u| metrics::efficiency(u.after)),
        splits: stats.splits,
        merges: stats.merges,
        committed_double_spends: engine.committed_double_spends(),
        conserved: engine.total_value() == engine.initial_total(),
        violations: engine.violations().len(),
        sim_end_s: engine.now() as f64 / SECONDS as f64,
        digest: trace.digest().to_string(),
    };
    Ok(RunOutcome {
        spec: spec.clone(),
        metrics: m,
        incomplete: batch.err(),
        trace,
    })
}

/// Default worker count: one per available core.
pub fn default_threads() -> usize {
    thread::available_parallelism().map_or(1, |n| n.get())
}

/// Run every spec on up to `threads` workers; results come back in spec
/// order.
pub fn run_all(specs: &[RunSpec], threads: usize) -> Vec<Result<RunOutcome, ScenarioError>> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<RunOutcome, ScenarioError>>>> = specs.iter().map(|_| Mutex::new(None)).collect();
    thread::scope(|scope| {
        for _ in 0..threads.clamp(1, specs.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(spec) = specs.get(i) else { break };
                let r = run_one(spec);
                *slots[i].lock().expect("result slot") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("result slot").expect("every spec ran"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::Scenario;

    const DOC: &str = r#"
        seeds = [1, 2, 3]
        compare_baseline = true
        [shards]
        count = 4
        validators = 4
        [workload]
        rate = 200.0
        max_txs = 120
        cross_ratio = 0.5
        accounts = 64
        zipf = 0.0
        [mgmt]
        trigger = "disabled"
    "#;

    #[test]
    fn parallel_results_match_sequential_ones() {
        let specs = Scenario::parse(DOC, "t").unwrap().runs();
        let par = run_all(&specs, 4);
        assert_eq!(par.len(), specs.len());
        for (spec, r) in specs.iter().zip(&par) {
            let r = r.as_ref().unwrap();
            let seq = run_one(spec).unwrap();
            assert_eq!(r.metrics, seq.metrics);
            assert!(r.incomplete.is_none());
            assert!(r.metrics.conserved);
            assert_eq!(r.metrics.violations, 0);
            assert_eq!(r.metrics.submitted, 120);
        }
    }

    #[test]
    fn tps_matches_a_recount_of_the_trace() {
        let specs = Scenario::parse(DOC, "t").unwrap().runs();
        let out = run_one(&specs[0]).unwrap();
        let commits: Vec<u64> = out
            .trace
            .records()
            .iter()
            .filter(|r| r.kind() == "commit")
            .map(|r| r.time())
            .collect();
        let last = *commits.iter().max().unwrap();
        let expect = commits.len() as f64 / (last as f64 / SECONDS as f64);
        assert!((out.metrics.tps - expect).abs() < 1e-9);
        assert_eq!(commits.len() as u64, out.metrics.committed);
    }
}
