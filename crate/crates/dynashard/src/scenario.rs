//! Scenario files: TOML documents with one table per subsystem, plus an
//! optional list of `[[variant]]` tables that override parts of the base
//! document (one sweep point each).
//!
//! Times are given in milliseconds (`*_ms`) or seconds (`*_s`); every
//! omitted key keeps the engine default.

use std::collections::BTreeSet;
use std::path::Path;

use dynashard_core::consensus::NodeId;
use dynashard_core::engine::{Assignment, ConfigError, EngineConfig, MgmtTrigger, Mode};
use dynashard_core::ledger::{ShardId, SimTime, MILLIS, SECONDS};
use dynashard_core::simnet::adversary::Behavior;
use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed scenario: {0}")]
    Parse(String),
    #[error("variant {variant:?}: {source}")]
    Config {
        variant: String,
        #[source]
        source: ConfigError,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    Dynashard,
    Baseline,
}

impl From<ModeName> for Mode {
    fn from(m: ModeName) -> Mode {
        match m {
            ModeName::Dynashard => Mode::DynaShard,
            ModeName::Baseline => Mode::Baseline,
        }
    }
}

#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(rename_all = "snake_case")]
enum AssignmentName {
    Range,
    Hash,
}

#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(rename_all = "snake_case")]
enum TriggerName {
    Disabled,
    Epoch,
    EveryTxs,
}

#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(rename_all = "snake_case")]
enum BehaviorName {
    Equivocate,
    Withhold,
    DelayMax,
    ForgePartial,
    DoubleSpendInject,
    CollusionApprove,
}

impl From<BehaviorName> for Behavior {
    fn from(b: BehaviorName) -> Behavior {
        match b {
            BehaviorName::Equivocate => Behavior::Equivocate,
            BehaviorName::Withhold => Behavior::Withhold,
            BehaviorName::DelayMax => Behavior::DelayMax,
            BehaviorName::ForgePartial => Behavior::ForgePartial,
            BehaviorName::DoubleSpendInject => Behavior::DoubleSpendInject,
            BehaviorName::CollusionApprove => Behavior::CollusionApprove,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct Doc {
    name: Option<String>,
    mode: Option<ModeName>,
    seeds: Option<Vec<u64>>,
    /// Also run every variant in the other mode.
    compare_baseline: Option<bool>,
    /// Management epochs ignored before load balance is averaged.
    settle_epochs: Option<u64>,
    horizon_s: Option<f64>,
    #[serde(default)]
    shards: ShardsDoc,
    #[serde(default)]
    network: NetworkDoc,
    #[serde(default)]
    workload: WorkloadDoc,
    #[serde(default)]
    mgmt: MgmtDoc,
    #[serde(default)]
    committee: CommitteeDoc,
    #[serde(default)]
    adversary: AdversaryDoc,
    #[serde(default)]
    faults: FaultsDoc,
    #[serde(default)]
    dispute: DisputeDoc,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ShardsDoc {
    count: Option<u32>,
    validators: Option<usize>,
    assignment: Option<AssignmentName>,
    block_size: Option<usize>,
    exec_per_op_ms: Option<f64>,
    view_timeout_ms: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkDoc {
    base_latency_ms: Option<f64>,
    jitter_ms: Option<f64>,
    delta_ms: Option<f64>,
    gst_ms: Option<f64>,
    drop_rate: Option<f64>,
    pre_gst_max_delay_ms: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct WorkloadDoc {
    rate: Option<f64>,
    cross_ratio: Option<f64>,
    accounts: Option<u64>,
    zipf: Option<f64>,
    duration_s: Option<f64>,
    max_txs: Option<u64>,
    multi_input_ratio: Option<f64>,
    max_amount: Option<u64>,
    initial_balance: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct MgmtDoc {
    trigger: Option<TriggerName>,
    /// Committed transactions between evaluations (`every_txs`).
    n_c: Option<u64>,
    /// Most shards one evaluation may touch (0 = unlimited).
    s: Option<usize>,
    tau_s: Option<f64>,
    tau_m: Option<f64>,
    merge_epochs: Option<u32>,
    cooldown_epochs: Option<u64>,
    split_fanout: Option<usize>,
    epoch_ms: Option<f64>,
    capacity: Option<u64>,
    merge_similarity: Option<f64>,
    min_validators: Option<usize>,
    reconfig_delay_ms: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CommitteeDoc {
    batch_size: Option<usize>,
    lock_timeout_ms: Option<f64>,
    fraction: Option<f64>,
    retry_backoff_ms: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdversaryDoc {
    corrupt_shards: Option<Vec<u32>>,
    corrupt_nodes: Option<Vec<u32>>,
    behaviors: Option<Vec<BehaviorName>>,
    injection_rate: Option<f64>,
    max_twins: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FaultsDoc {
    committee_leader_crash: Option<bool>,
    commit_crash_prob: Option<f64>,
    crash_recovery_ms: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct DisputeDoc {
    gossip_interval_ms: Option<f64>,
    window_rounds: Option<u64>,
    slash_fraction: Option<f64>,
    reputation_decay: Option<f64>,
    observers_vote: Option<bool>,
}

/// One sweep point: a name and the engine configuration it runs.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub config: EngineConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub seeds: Vec<u64>,
    pub compare_baseline: bool,
    pub settle_epochs: u64,
    pub variants: Vec<Variant>,
}

/// One engine run of a scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSpec {
    pub scenario: String,
    pub variant: String,
    pub seed: u64,
    pub settle_epochs: u64,
    pub config: EngineConfig,
}

fn time(x: f64, unit: SimTime, key: &str) -> Result<SimTime, ScenarioError> {
    if !x.is_finite() || x < 0.0 {
        return Err(ScenarioError::Parse(format!("{key} must be a non-negative number")));
    }
    Ok((x * unit as f64).round() as SimTime)
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn set_time(slot: &mut SimTime, v: Option<f64>, unit: SimTime, key: &str) -> Result<(), ScenarioError> {
    if let Some(x) = v {
        *slot = time(x, unit, key)?;
    }
    Ok(())
}

/// Merge `over` into `base`, recursing into tables.
fn merge(base: &mut toml::Table, over: &toml::Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

impl Doc {
    fn engine_config(&self) -> Result<EngineConfig, ScenarioError> {
        let mut c = EngineConfig::default();
        if let Some(m) = self.mode {
            c.mode = m.into();
        }
        set_time(&mut c.horizon, self.horizon_s, SECONDS, "horizon_s")?;

        let s = &self.shards;
        set(&mut c.shards, s.count);
        set(&mut c.validators_per_shard, s.validators);
        if let Some(a) = s.assignment {
            c.assignment = match a {
                AssignmentName::Range => Assignment::Range,
                AssignmentName::Hash => Assignment::Hash,
            };
        }
        set(&mut c.block_size, s.block_size);
        set_time(&mut c.exec_per_op, s.exec_per_op_ms, MILLIS, "shards.exec_per_op_ms")?;
        if let Some(v) = s.view_timeout_ms {
            c.view_timeout = Some(time(v, MILLIS, "shards.view_timeout_ms")?);
        }

        let n = &self.network;
        set_time(
            &mut c.net.base_latency,
            n.base_latency_ms,
            MILLIS,
            "network.base_latency_ms",
        )?;
        set_time(&mut c.net.jitter, n.jitter_ms, MILLIS, "network.jitter_ms")?;
        set_time(&mut c.net.delta, n.delta_ms, MILLIS, "network.delta_ms")?;
        set_time(&mut c.net.gst, n.gst_ms, MILLIS, "network.gst_ms")?;
        set(&mut c.net.drop_rate, n.drop_rate);
        set_time(
            &mut c.net.pre_gst_max_delay,
            n.pre_gst_max_delay_ms,
            MILLIS,
            "network.pre_gst_max_delay_ms",
        )?;

        let w = &self.workload;
        set(&mut c.workload.rate, w.rate);
        set(&mut c.workload.cross_ratio, w.cross_ratio);
        set(&mut c.workload.account_count, w.accounts);
        set(&mut c.workload.zipf_exponent, w.zipf);
        set_time(&mut c.workload.duration, w.duration_s, SECONDS, "workload.duration_s")?;
        set(&mut c.workload.max_txs, w.max_txs);
        set(&mut c.workload.multi_input_ratio, w.multi_input_ratio);
        set(&mut c.workload.max_amount, w.max_amount);
        set(&mut c.workload.initial_balance, w.initial_balance);
        if !(c.workload.rate.is_finite() && c.workload.rate > 0.0) {
            return Err(ScenarioError::Parse("workload.rate must be positive".into()));
        }
        if c.workload.duration == 0 && c.workload.max_txs == 0 {
            return Err(ScenarioError::Parse(
                "workload needs a bound: duration_s or max_txs".into(),
            ));
        }

        let m = &self.mgmt;
        if let Some(t) = m.trigger {
            c.trigger = match t {
                TriggerName::Disabled => MgmtTrigger::Disabled,
                TriggerName::Epoch => MgmtTrigger::Epoch,
                TriggerName::EveryTxs => match m.n_c {
                    Some(n) if n > 0 => MgmtTrigger::EveryTxs(n),
                    _ => {
                        return Err(ScenarioError::Parse(
                            "mgmt.trigger = \"every_txs\" needs n_c >= 1".into(),
                        ))
                    }
                },
            };
        }
        set(&mut c.mgmt.max_shards_per_eval, m.s);
        set(&mut c.mgmt.tau_s, m.tau_s);
        set(&mut c.mgmt.tau_m, m.tau_m);
        set(&mut c.mgmt.merge_epochs, m.merge_epochs);
        set(&mut c.mgmt.cooldown_epochs, m.cooldown_epochs);
        set(&mut c.mgmt.split_fanout, m.split_fanout);
        set_time(&mut c.mgmt.epoch_length, m.epoch_ms, MILLIS, "mgmt.epoch_ms")?;
        set(&mut c.mgmt.shard_capacity, m.capacity);
        set(&mut c.mgmt.merge_similarity, m.merge_similarity);
        set(&mut c.mgmt.min_validators, m.min_validators);
        set_time(
            &mut c.reconfig_delay,
            m.reconfig_delay_ms,
            MILLIS,
            "mgmt.reconfig_delay_ms",
        )?;

        let k = &self.committee;
        set(&mut c.batch_size, k.batch_size);
        set_time(
            &mut c.lock_timeout,
            k.lock_timeout_ms,
            MILLIS,
            "committee.lock_timeout_ms",
        )?;
        set(&mut c.committee_fraction, k.fraction);
        set_time(
            &mut c.retry_backoff,
            k.retry_backoff_ms,
            MILLIS,
            "committee.retry_backoff_ms",
        )?;

        let a = &self.adversary;
        if let Some(v) = &a.corrupt_shards {
            c.adversary.corrupt_shards = v.iter().map(|&s| ShardId(s)).collect();
        }
        if let Some(v) = &a.corrupt_nodes {
            c.adversary.corrupt_nodes = v.iter().map(|&n| NodeId(n)).collect();
        }
        if let Some(v) = &a.behaviors {
            c.adversary.behaviors = v.iter().map(|&b| b.into()).collect::<BTreeSet<Behavior>>();
        }
        set(&mut c.adversary.injection_rate, a.injection_rate);
        set(&mut c.max_twins, a.max_twins);

        let f = &self.faults;
        set(&mut c.faults.committee_leader_crash, f.committee_leader_crash);
        set(&mut c.faults.commit_crash_prob, f.commit_crash_prob);
        set_time(
            &mut c.faults.crash_recovery,
            f.crash_recovery_ms,
            MILLIS,
            "faults.crash_recovery_ms",
        )?;

        let d = &self.dispute;
        set_time(
            &mut c.gossip_interval,
            d.gossip_interval_ms,
            MILLIS,
            "dispute.gossip_interval_ms",
        )?;
        set(&mut c.dispute.window_rounds, d.window_rounds);
        set(&mut c.dispute.slash_fraction, d.slash_fraction);
        set(&mut c.dispute.reputation_decay, d.reputation_decay);
        set(&mut c.dispute.observers_vote, d.observers_vote);
        Ok(c)
    }
}

fn parse_doc(table: toml::Table) -> Result<Doc, ScenarioError> {
    Doc::deserialize(toml::Value::Table(table)).map_err(|e| ScenarioError::Parse(e.to_string()))
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Scenario, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let fallback = path.file_stem().and_then(|s| s.to_str()).unwrap_or("scenario");
        Scenario::parse(&text, fallback)
    }

    /// Parse a scenario document; `fallback_name` is used when the
    /// document has no `name`.
    pub fn parse(text: &str, fallback_name: &str) -> Result<Scenario, ScenarioError> {
        let mut base: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| ScenarioError::Parse(e.to_string()))?;
        let variants = match base.remove("variant") {
            None => Vec::new(),
            Some(toml::Value::Array(items)) => items
                .into_iter()
                .map(|v| match v {
                    toml::Value::Table(t) => Ok(t),
                    _ => Err(ScenarioError::Parse("every [[variant]] must be a table".into())),
                })
                .collect::<Result<Vec<_>, _>>()?,
            Some(_) => return Err(ScenarioError::Parse("`variant` must be an array of tables".into())),
        };
        let doc = parse_doc(base.clone())?;
        let name = doc.name.clone().unwrap_or_else(|| fallback_name.to_string());
        let seeds = doc.seeds.clone().unwrap_or_else(|| vec![1]);
        if seeds.is_empty() {
            return Err(ScenarioError::Parse("seeds must not be empty".into()));
        }
        let mut out = Vec::new();
        if variants.is_empty() {
            out.push(build_variant("default".to_string(), &doc)?);
        }
        let mut names = BTreeSet::new();
        for (i, mut over) in variants.into_iter().enumerate() {
            let vname = match over.remove("name") {
                Some(toml::Value::String(s)) => s,
                None => format!("v{i}"),
                Some(_) => return Err(ScenarioError::Parse("variant name must be a string".into())),
            };
            if !names.insert(vname.clone()) {
                return Err(ScenarioError::Parse(format!("duplicate variant {vname:?}")));
            }
            for k in ["name", "seeds", "compare_baseline", "settle_epochs"] {
                if over.contains_key(k) {
                    return Err(ScenarioError::Parse(format!("variant {vname:?} may not set {k}")));
                }
            }
            let mut t = base.clone();
            merge(&mut t, &over);
            let vdoc = parse_doc(t)?;
            out.push(build_variant(vname, &vdoc)?);
        }
        Ok(Scenario {
            name,
            seeds,
            compare_baseline: doc.compare_baseline.unwrap_or(false),
            settle_epochs: doc.settle_epochs.unwrap_or(3),
            variants: out,
        })
    }

    /// Replace the seed list by `count` consecutive seeds from `first`.
    pub fn with_seeds(mut self, first: u64, count: u64) -> Self {
        self.seeds = (0..count.max(1)).map(|i| first + i).collect();
        self
    }

    /// Run every variant in `mode` only.
    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.compare_baseline = false;
        for v in &mut self.variants {
            v.config.mode = mode;
        }
        self
    }

    /// Every (variant, mode, seed) run, variants in file order, the
    /// variant's own mode before the compared one.
    pub fn runs(&self) -> Vec<RunSpec> {
        let mut out = Vec::new();
        for v in &self.variants {
            let mut modes = vec![v.config.mode];
            if self.compare_baseline {
                modes.push(match v.config.mode {
                    Mode::DynaShard => Mode::Baseline,
                    Mode::Baseline => Mode::DynaShard,
                });
            }
            for mode in modes {
                for &seed in &self.seeds {
                    let mut config = v.config.clone();
                    config.mode = mode;
                    config.seed = seed;
                    config.workload.seed = seed;
                    config.adversary.seed = seed;
                    out.push(RunSpec {
                        scenario: self.name.clone(),
                        variant: v.name.clone(),
                        seed,
                        settle_epochs: self.settle_epochs,
                        config,
                    });
                }
            }
        }
        out
    }
}

fn build_variant(name: String, doc: &Doc) -> Result<Variant, ScenarioError> {
    let config = doc.engine_config()?;
    config.validate().map_err(|source| ScenarioError::Config {
        variant: name.clone(),
        source,
    })?;
    Ok(Variant { name, config })
}

#[cfg(test)]
mod tests {
    use super::*;

    const DOC: &str = r#"
        name = "sweep"
        seeds = [4, 5]
        compare_baseline = true

        [shards]
        count = 8
        validators = 4
        assignment = "hash"

        [workload]
        rate = 500.0
        max_txs = 1000
        zipf = 0.0

        [mgmt]
        trigger = "disabled"

        [[variant]]
        name = "low"
        workload = { cross_ratio = 0.0 }

        [[variant]]
        name = "high"
        workload = { cross_ratio = 0.8 }
        mgmt = { trigger = "every_txs", n_c = 100, s = 2 }
    "#;

    #[test]
    fn variants_override_the_base() {
        let s = Scenario::parse(DOC, "x").unwrap();
        assert_eq!(s.name, "sweep");
        assert_eq!(s.variants.len(), 2);
        let low = &s.variants[0].config;
        let high = &s.variants[1].config;
        assert_eq!(low.shards, 8);
        assert_eq!(low.workload.cross_ratio, 0.0);
        assert_eq!(low.trigger, MgmtTrigger::Disabled);
        assert_eq!(high.workload.cross_ratio, 0.8);
        assert_eq!(high.workload.rate, 500.0);
        assert_eq!(high.trigger, MgmtTrigger::EveryTxs(100));
        assert_eq!(high.mgmt.max_shards_per_eval, 2);
        assert_eq!(high.assignment, Assignment::Hash);
    }

    #[test]
    fn runs_cover_modes_and_seeds() {
        let s = Scenario::parse(DOC, "x").unwrap();
        let runs = s.runs();
        assert_eq!(runs.len(), 2 * 2 * 2);
        assert_eq!(runs[0].config.mode, Mode::DynaShard);
        assert_eq!(runs[2].config.mode, Mode::Baseline);
        assert_eq!(runs[1].seed, 5);
        assert_eq!(runs[1].config.workload.seed, 5);
        let only = s.with_seeds(10, 3).with_mode(Mode::Baseline).runs();
        assert_eq!(only.len(), 2 * 3);
        assert!(only.iter().all(|r| r.config.mode == Mode::Baseline));
        assert_eq!(only.iter().map(|r| r.seed).max(), Some(12));
    }

    #[test]
    fn errors_are_reported() {
        assert!(matches!(
            Scenario::parse("[shards]\ncount = 0\n", "x"),
            Err(ScenarioError::Config { .. })
        ));
        assert!(matches!(
            Scenario::parse("bogus = 1\n", "x"),
            Err(ScenarioError::Parse(_))
        ));
        assert!(matches!(
            Scenario::parse("[workload]\nrate = -1.0\n", "x"),
            Err(ScenarioError::Parse(_))
        ));
        assert!(matches!(
            Scenario::parse("[mgmt]\ntrigger = \"every_txs\"\n", "x"),
            Err(ScenarioError::Parse(_))
        ));
        assert!(matches!(
            Scenario::parse("[[variant]]\nname = \"a\"\n[[variant]]\nname = \"a\"\n", "x"),
            Err(ScenarioError::Parse(_))
        ));
        assert!(matches!(
            Scenario::parse("[workload]\nduration_s = 0.0\n", "x"),
            Err(ScenarioError::Parse(_))
        ));
    }

    #[test]
    fn units_convert_to_microseconds() {
        let s = Scenario::parse("[committee]\nlock_timeout_ms = 2.5\n[workload]\nduration_s = 3\n", "d").unwrap();
        let c = &s.variants[0].config;
        assert_eq!(c.lock_timeout, 2_500);
        assert_eq!(c.workload.duration, 3 * SECONDS);
        assert_eq!(s.name, "d");
        assert_eq!(s.seeds, vec![1]);
    }
}
