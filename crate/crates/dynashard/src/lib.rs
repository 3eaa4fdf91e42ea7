//! Experiment harness for the adaptive sharded-ledger simulator: scenario
//! files, parallel multi-seed runs, metrics, trace files, reports and the
//! approximation-factor calculator behind the `dynashard` CLI.

pub mod approx;
pub mod metrics;
pub mod ndjson;
pub mod report;
pub mod runner;
pub mod scenario;

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub use dynashard_core as core;

use crate::report::SummaryRow;
use crate::runner::RunOutcome;
use crate::scenario::{Scenario, ScenarioError};

/// Environment variable that overrides the default output directory.
pub const OUT_ENV: &str = "DYNASHARD_OUT";
/// Output directory used when neither `--out` nor [`OUT_ENV`] is given.
pub const DEFAULT_OUT: &str = "results";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("{0}")]
    Metrics(#[from] metrics::MetricsError),
    #[error(transparent)]
    TraceIo(#[from] ndjson::TraceIoError),
    #[error(transparent)]
    Approx(#[from] approx::ApproxError),
    #[error("cannot write {path}: {msg}")]
    Output { path: String, msg: String },
}

impl HarnessError {
    /// Process exit status: 2 for configuration problems, 3 for batches
    /// that never finished, 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            HarnessError::Scenario(_) | HarnessError::Approx(_) => 2,
            HarnessError::Metrics(metrics::MetricsError::BatchIncomplete { .. }) => 3,
            _ => 1,
        }
    }
}

/// All runs of a scenario plus their aggregate.
#[derive(Debug)]
pub struct Report {
    pub scenario: String,
    pub outcomes: Vec<RunOutcome>,
    pub summary: Vec<SummaryRow>,
}

impl Report {
    pub fn metrics(&self) -> Vec<runner::RunMetrics> {
        self.outcomes.iter().map(|o| o.metrics.clone()).collect()
    }

    /// The first run whose batch never finished, if any.
    pub fn incomplete(&self) -> Option<&metrics::MetricsError> {
        self.outcomes.iter().find_map(|o| o.incomplete.as_ref())
    }

    pub fn table(&self) -> String {
        report::summary_table(&self.summary)
    }
}

/// Run every (variant, mode, seed) of `scenario` on `threads` workers.
pub fn run_scenario(scenario: &Scenario, threads: usize) -> Result<Report, HarnessError> {
    let specs = scenario.runs();
    let outcomes = runner::run_all(&specs, threads)
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let metrics: Vec<runner::RunMetrics> = outcomes.iter().map(|o| o.metrics.clone()).collect();
    Ok(Report {
        scenario: scenario.name.clone(),
        summary: report::summarize(&metrics),
        outcomes,
    })
}

/// `--out` if given, else the environment override, else the default.
pub fn output_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, HarnessError> {
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| HarnessError::Output {
            path: path.display().to_string(),
            msg: e.to_string(),
        })
}

fn out_err(path: &Path) -> impl Fn(String) -> HarnessError + '_ {
    move |msg| HarnessError::Output {
        path: path.display().to_string(),
        msg,
    }
}

/// Write `runs.csv`, `summary.csv`, `summary.txt` and, if asked, one NDJSON
/// trace per run under `dir/<scenario>/`. Returns that directory.
pub fn write_report(report: &Report, dir: &Path, traces: bool) -> Result<PathBuf, HarnessError> {
    let root = dir.join(&report.scenario);
    fs::create_dir_all(&root).map_err(|e| out_err(&root)(e.to_string()))?;
    let runs = root.join("runs.csv");
    report::write_runs_csv(&report.metrics(), create(&runs)?).map_err(|e| out_err(&runs)(e.to_string()))?;
    let summary = root.join("summary.csv");
    report::write_summary_csv(&report.summary, create(&summary)?).map_err(|e| out_err(&summary)(e.to_string()))?;
    let text = root.join("summary.txt");
    fs::write(&text, report.table()).map_err(|e| out_err(&text)(e.to_string()))?;
    if traces {
        let tdir = root.join("traces");
        fs::create_dir_all(&tdir).map_err(|e| out_err(&tdir)(e.to_string()))?;
        for o in &report.outcomes {
            let p = tdir.join(format!("{}-{}-{}.ndjson", o.spec.variant, o.metrics.mode, o.spec.seed));
            ndjson::write_trace(o.trace.records(), create(&p)?)?;
        }
    }
    Ok(root)
}
