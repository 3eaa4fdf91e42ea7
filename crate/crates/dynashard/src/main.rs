use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dynashard::approx::{self, ApproxParams, Method, Topology};
use dynashard::core::engine::trace::digest_of;
use dynashard::core::engine::Mode;
use dynashard::core::ledger::SECONDS;
use dynashard::scenario::Scenario;
use dynashard::{metrics, ndjson, runner, HarnessError};

#[derive(Parser)]
#[command(name = "dynashard", version, about = "Adaptive sharded-ledger simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Dynashard,
    Baseline,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario file over one or more seeds.
    Run {
        scenario: PathBuf,
        /// First seed (replaces the file's seed list).
        #[arg(long)]
        seed: Option<u64>,
        /// Number of consecutive seeds starting at --seed.
        #[arg(long)]
        seeds: Option<u64>,
        /// Output directory (default: $DYNASHARD_OUT, else ./results).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run only this mode, ignoring the file's comparison setting.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Worker threads (default: available cores).
        #[arg(long)]
        threads: Option<usize>,
        /// Also write one NDJSON trace per run.
        #[arg(long)]
        traces: bool,
    },
    /// Recompute metrics from an NDJSON trace file.
    Metrics {
        trace: PathBuf,
        /// Epochs ignored before load balance is averaged.
        #[arg(long, default_value_t = 3)]
        settle: u64,
    },
    /// Evaluate an approximation factor.
    Approx {
        #[arg(long)]
        topology: String,
        #[arg(long)]
        method: String,
        #[arg(short = 'k')]
        k: f64,
        #[arg(short = 'd')]
        d: f64,
        #[arg(short = 's')]
        s: f64,
        #[arg(short = 'D')]
        big_d: f64,
        #[arg(short = 'g')]
        g: Option<f64>,
    },
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.cmd {
        Cmd::Run {
            scenario,
            seed,
            seeds,
            out,
            mode,
            threads,
            traces,
        } => {
            let mut sc = Scenario::load(&scenario)?;
            if seed.is_some() || seeds.is_some() {
                let first = seed.unwrap_or(sc.seeds[0]);
                sc = sc.with_seeds(first, seeds.unwrap_or(1));
            }
            if let Some(m) = mode {
                sc = sc.with_mode(match m {
                    ModeArg::Dynashard => Mode::DynaShard,
                    ModeArg::Baseline => Mode::Baseline,
                });
            }
            let report = dynashard::run_scenario(&sc, threads.unwrap_or_else(runner::default_threads))?;
            let dir = dynashard::write_report(&report, &dynashard::output_dir(out), traces)?;
            println!("scenario {} ({} runs)", report.scenario, report.outcomes.len());
            print!("{}", report.table());
            println!("wrote {}", dir.display());
            if let Some(e) = report.incomplete() {
                return Err(e.clone().into());
            }
            Ok(())
        }
        Cmd::Metrics { trace, settle } => {
            let file = File::open(&trace).map_err(ndjson::TraceIoError::Io)?;
            let records = ndjson::read_trace(BufReader::new(file))?;
            let lat = metrics::latency_stats(&records);
            let window = metrics::run_window(&records);
            let commits = records.iter().filter(|r| r.kind() == "commit").count();
            let aborts = records.iter().filter(|r| r.kind() == "abort").count();
            println!("records         {}", records.len());
            println!("digest          {}", digest_of(&records));
            println!("submitted       {}", metrics::submitted(&records).len());
            println!("committed       {commits}");
            println!("aborted         {aborts}");
            println!("tps             {:.2}", metrics::tps(&records, window));
            println!("latency mean    {:.4} s", lat.mean);
            println!("latency p50     {:.4} s", lat.p50);
            println!("latency p95     {:.4} s", lat.p95);
            if let Some(u) = metrics::utilization(&records, settle) {
                println!("util before     {:.3}", u.before);
                println!("util after      {:.3} ({} epochs)", u.after, u.epochs);
                println!("efficiency      {:.2} %", metrics::efficiency(u.after));
            }
            let b = metrics::batch_latency(&records, &metrics::submitted(&records))?;
            println!("batch latency   {:.4} s", b as f64 / SECONDS as f64);
            Ok(())
        }
        Cmd::Approx {
            topology,
            method,
            k,
            d,
            s,
            big_d,
            g,
        } => {
            let t: Topology = topology.parse()?;
            let m: Method = method.parse()?;
            let v = approx::approx_factor(t, m, ApproxParams { k, d, s, big_d, g })?;
            println!("{t} {m} {}: {v}", approx::expression(t, m));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
