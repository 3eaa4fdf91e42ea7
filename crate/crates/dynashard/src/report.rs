//! Aggregation across seeds and the two output formats: CSV records and an
//! aligned text summary.

use std::io::Write;

use serde::Serialize;

use crate::metrics::{improvement_pct, mean_stdev};
use crate::runner::RunMetrics;

/// Mean and sample standard deviation over seeds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub sd: f64,
    /// Seeds that contributed a value.
    pub n: usize,
}

impl Stat {
    pub fn of(xs: impl IntoIterator<Item = f64>) -> Option<Stat> {
        let v: Vec<f64> = xs.into_iter().collect();
        if v.is_empty() {
            return None;
        }
        let (mean, sd) = mean_stdev(&v);
        Some(Stat { mean, sd, n: v.len() })
    }

    fn show(s: Option<Stat>, prec: usize) -> String {
        match s {
            Some(s) => format!("{:.p$} ± {:.p$}", s.mean, s.sd, p = prec),
            None => "-".to_string(),
        }
    }
}

/// One (variant, mode) group.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub variant: String,
    pub mode: &'static str,
    pub runs: usize,
    pub tps: Option<Stat>,
    pub latency_mean: Option<Stat>,
    pub batch_latency: Option<Stat>,
    pub util_before: Option<Stat>,
    pub util_after: Option<Stat>,
    pub efficiency: Option<Stat>,
    pub splits: Option<Stat>,
    pub merges: Option<Stat>,
    /// DynaShard rows only, against the baseline row of the same variant.
    pub tps_improvement_pct: Option<f64>,
    pub latency_improvement_pct: Option<f64>,
}

/// Flat summary record for CSV output.
#[derive(Serialize)]
struct SummaryCsv<'a> {
    variant: &'a str,
    mode: &'a str,
    runs: usize,
    tps_mean: Option<f64>,
    tps_sd: Option<f64>,
    latency_mean_s: Option<f64>,
    latency_sd_s: Option<f64>,
    batch_latency_mean_s: Option<f64>,
    batch_latency_sd_s: Option<f64>,
    util_before_mean: Option<f64>,
    util_after_mean: Option<f64>,
    util_after_sd: Option<f64>,
    efficiency_mean_pct: Option<f64>,
    splits_mean: Option<f64>,
    merges_mean: Option<f64>,
    tps_improvement_pct: Option<f64>,
    latency_improvement_pct: Option<f64>,
}

/// Group runs by (variant, mode) in first-seen order.
pub fn summarize(runs: &[RunMetrics]) -> Vec<SummaryRow> {
    let mut keys: Vec<(String, &'static str)> = Vec::new();
    for r in runs {
        let k = (r.variant.clone(), r.mode);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let mut rows: Vec<SummaryRow> = keys
        .into_iter()
        .map(|(variant, mode)| {
            let g: Vec<&RunMetrics> = runs.iter().filter(|r| r.variant == variant && r.mode == mode).collect();
            SummaryRow {
                runs: g.len(),
                tps: Stat::of(g.iter().map(|r| r.tps)),
                latency_mean: Stat::of(g.iter().map(|r| r.latency_mean_s)),
                batch_latency: Stat::of(g.iter().filter_map(|r| r.batch_latency_s)),
                util_before: Stat::of(g.iter().filter_map(|r| r.util_before)),
                util_after: Stat::of(g.iter().filter_map(|r| r.util_after)),
                efficiency: Stat::of(g.iter().filter_map(|r| r.efficiency_pct)),
                splits: Stat::of(g.iter().map(|r| r.splits as f64)),
                merges: Stat::of(g.iter().map(|r| r.merges as f64)),
                tps_improvement_pct: None,
                latency_improvement_pct: None,
                variant,
                mode,
            }
        })
        .collect();
    let baselines: Vec<SummaryRow> = rows.iter().filter(|r| r.mode == "baseline").cloned().collect();
    for row in rows.iter_mut().filter(|r| r.mode == "dynashard") {
        let Some(b) = baselines.iter().find(|b| b.variant == row.variant) else {
            continue;
        };
        if let (Some(d), Some(bb)) = (row.tps, b.tps) {
            row.tps_improvement_pct = Some(improvement_pct(d.mean, bb.mean));
        }
        if let (Some(d), Some(bb)) = (row.batch_latency, b.batch_latency) {
            // Lower is better: the reduction relative to the baseline.
            row.latency_improvement_pct = Some(-improvement_pct(d.mean, bb.mean));
        }
    }
    rows
}

pub fn write_runs_csv<W: Write>(runs: &[RunMetrics], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for r in runs {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary_csv<W: Write>(rows: &[SummaryRow], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(SummaryCsv {
            variant: &r.variant,
            mode: r.mode,
            runs: r.runs,
            tps_mean: r.tps.map(|s| s.mean),
            tps_sd: r.tps.map(|s| s.sd),
            latency_mean_s: r.latency_mean.map(|s| s.mean),
            latency_sd_s: r.latency_mean.map(|s| s.sd),
            batch_latency_mean_s: r.batch_latency.map(|s| s.mean),
            batch_latency_sd_s: r.batch_latency.map(|s| s.sd),
            util_before_mean: r.util_before.map(|s| s.mean),
            util_after_mean: r.util_after.map(|s| s.mean),
            util_after_sd: r.util_after.map(|s| s.sd),
            efficiency_mean_pct: r.efficiency.map(|s| s.mean),
            splits_mean: r.splits.map(|s| s.mean),
            merges_mean: r.merges.map(|s| s.mean),
            tps_improvement_pct: r.tps_improvement_pct,
            latency_improvement_pct: r.latency_improvement_pct,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Render rows as a table whose columns are padded to equal width.
pub fn align(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut width: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (i, c) in r.iter().enumerate() {
            width[i] = width[i].max(c.chars().count());
        }
    }
    let line = |cells: Vec<String>| -> String {
        let padded: Vec<String> = cells
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{c}{}", " ".repeat(width[i] - c.chars().count())))
            .collect();
        padded.join("  ").trim_end().to_string()
    };
    let mut out = line(header.iter().map(|h| h.to_string()).collect());
    out.push('\n');
    out.push_str(&line(width.iter().map(|w| "-".repeat(*w)).collect()));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r.clone()));
        out.push('\n');
    }
    out
}

pub fn summary_table(rows: &[SummaryRow]) -> String {
    let pct = |p: Option<f64>| p.map_or("-".to_string(), |p| format!("{p:+.1}%"));
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.variant.clone(),
                r.mode.to_string(),
                r.runs.to_string(),
                Stat::show(r.tps, 1),
                Stat::show(r.latency_mean, 3),
                Stat::show(r.batch_latency, 2),
                Stat::show(r.util_before, 2),
                Stat::show(r.util_after, 2),
                Stat::show(r.efficiency, 1),
                Stat::show(r.splits, 1),
                Stat::show(r.merges, 1),
                pct(r.tps_improvement_pct),
                pct(r.latency_improvement_pct),
            ]
        })
        .collect();
    align(
        &[
            "variant",
            "mode",
            "runs",
            "tps",
            "latency (s)",
            "batch (s)",
            "util before",
            "util after",
            "efficiency (%)",
            "splits",
            "merges",
            "tps gain",
            "batch gain",
        ],
        &body,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(variant: &str, mode: &'static str, seed: u64, tps: f64, batch: f64) -> RunMetrics {
        RunMetrics {
            scenario: "s".into(),
            variant: variant.into(),
            mode,
            seed,
            shards_initial: 4,
            shards_final: 4,
            submitted: 10,
            committed: 10,
            aborted: 0,
            rolled_back: 0,
            unresolved: 0,
            tps,
            latency_mean_s: 0.1,
            latency_p50_s: 0.1,
            latency_p95_s: 0.2,
            batch_latency_s: Some(batch),
            util_before: None,
            util_after: None,
            efficiency_pct: None,
            splits: 0,
            merges: 0,
            committed_double_spends: 0,
            conserved: true,
            violations: 0,
            sim_end_s: 1.0,
            digest: "00".into(),
        }
    }

    #[test]
    fn groups_and_improvements() {
        let runs = vec![
            run("a", "dynashard", 1, 110.0, 9.0),
            run("a", "dynashard", 2, 130.0, 11.0),
            run("a", "baseline", 1, 100.0, 20.0),
            run("a", "baseline", 2, 100.0, 20.0),
            run("b", "dynashard", 1, 50.0, 1.0),
        ];
        let rows = summarize(&runs);
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].tps.unwrap().mean, 120.0);
        assert!((rows[0].tps.unwrap().sd - 14.142135).abs() < 1e-5);
        assert_eq!(rows[0].tps_improvement_pct, Some(20.0));
        assert_eq!(rows[0].latency_improvement_pct, Some(50.0));
        assert_eq!(rows[1].tps_improvement_pct, None);
        assert_eq!(rows[2].tps_improvement_pct, None);
        let table = summary_table(&rows);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines[2].starts_with("a "));
        assert_eq!(lines[2].find("dynashard"), lines[0].find("mode"));
    }

    #[test]
    fn csv_has_header_and_one_row_per_run() {
        let runs = vec![run("a", "dynashard", 1, 1.0, 2.0), run("a", "baseline", 1, 1.0, 2.0)];
        let mut buf = Vec::new();
        write_runs_csv(&runs, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("scenario,variant,mode,seed,"));
        let mut buf = Vec::new();
        write_summary_csv(&summarize(&runs), &mut buf).unwrap();
        assert!(String::from_utf8(buf)
            .unwrap()
            .starts_with("variant,mode,runs,tps_mean"));
    }
}
