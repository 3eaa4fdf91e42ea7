use super::*;
use alloc::collections::BTreeSet;

fn small(mode: Mode, seed: u64) -> EngineConfig {
    EngineConfig {
        mode,
        shards: 4,
        validators_per_shard: 4,
        assignment: Assignment::Hash,
        workload: WorkloadSpec {
            rate: 200.0,
            cross_ratio: 0.5,
            account_count: 64,
            zipf_exponent: 0.0,
            duration: 0,
            max_txs: 150,
            multi_input_ratio: 0.3,
            seed,
            ..WorkloadSpec::default()
        },
        trigger: MgmtTrigger::Disabled,
        seed,
        ..EngineConfig::default()
    }
}

fn check_clean(e: &Engine) {
    assert!(e.violations().is_empty(), "{:?}", e.violations());
    assert_eq!(e.total_value(), e.initial_total());
    assert_eq!(e.escrowed(), 0);
    assert_eq!(e.committed_double_spends(), 0);
    for (h, t) in e.txs() {
        assert!(t.is_final(), "{h:?} unresolved");
        let applied = e.applied_outputs(h);
        match t.status {
            TxStatus::Committed(_) if t.is_cross() => {
                assert_eq!(applied, t.tx.outputs.len())
            }
            TxStatus::Aborted(..) => assert_eq!(applied, 0),
            _ => {}
        }
    }
}

#[test]
fn dynashard_run_resolves_everything_and_conserves_value() {
    let mut e = Engine::new(small(Mode::DynaShard, 3)).unwrap();
    e.run();
    check_clean(&e);
    assert_eq!(e.stats().submitted, 150);
    assert!(e.stats().committed > 140, "{:?}", e.stats());
    assert!(e.stats().batches > 0);
}

#[test]
fn baseline_run_resolves_everything_and_conserves_value() {
    let mut e = Engine::new(small(Mode::Baseline, 3)).unwrap();
    e.run();
    check_clean(&e);
    assert!(e.stats().committed > 140, "{:?}", e.stats());
    assert_eq!(e.stats().batches, 0);
}

#[test]
fn same_seed_same_trace() {
    for mode in [Mode::DynaShard, Mode::Baseline] {
        let mut a = Engine::new(small(mode, 9)).unwrap();
        let mut b = Engine::new(small(mode, 9)).unwrap();
        let mut c = Engine::new(small(mode, 10)).unwrap();
        a.run();
        b.run();
        c.run();
        assert_eq!(a.trace().digest(), b.trace().digest());
        assert_eq!(a.trace().records(), b.trace().records());
        assert_ne!(a.trace().digest(), c.trace().digest());
    }
}

#[test]
fn mid_commit_crashes_recover_without_partial_outputs() {
    let mut cfg = small(Mode::DynaShard, 5);
    cfg.faults.commit_crash_prob = 0.5;
    cfg.faults.committee_leader_crash = true;
    cfg.view_timeout = Some(100 * MILLIS);
    let mut e = Engine::new(cfg).unwrap();
    e.run();
    check_clean(&e);
    assert!(e.stats().crashes > 0);
    assert!(e.stats().max_committee_view >= 1);
}

#[test]
fn withheld_partials_time_out_and_refund() {
    let mut cfg = small(Mode::DynaShard, 6);
    cfg.adversary = AdversarySpec {
        corrupt_shards: [ShardId(1)].into_iter().collect(),
        behaviors: [Behavior::Withhold].into_iter().collect(),
        ..AdversarySpec::none()
    };
    let mut e = Engine::new(cfg).unwrap();
    e.run();
    check_clean(&e);
    let timeouts = e
        .txs()
        .filter(|(_, t)| matches!(t.status, TxStatus::Aborted(_, AbortKind::Timeout)))
        .count();
    assert!(timeouts > 0);
    // Every timed-out transaction had shard 1 as an input.
    for (_, t) in e.txs() {
        if matches!(t.status, TxStatus::Aborted(_, AbortKind::Timeout)) {
            assert!(t.tx.input_shards().contains(&ShardId(1)));
        }
    }
}

#[test]
fn double_spend_twins_never_both_commit() {
    let mut cfg = small(Mode::DynaShard, 7);
    cfg.adversary = AdversarySpec {
        behaviors: [Behavior::DoubleSpendInject].into_iter().collect(),
        injection_rate: 1.0,
        ..AdversarySpec::none()
    };
    let mut e = Engine::new(cfg).unwrap();
    e.run();
    check_clean(&e);
    assert!(e.stats().twins_injected > 50);
}

#[test]
fn colluding_approval_is_rolled_back() {
    let mut cfg = small(Mode::DynaShard, 8);
    cfg.adversary = AdversarySpec {
        corrupt_shards: [ShardId(0)].into_iter().collect(),
        behaviors: [Behavior::DoubleSpendInject, Behavior::CollusionApprove]
            .into_iter()
            .collect(),
        injection_rate: 1.0,
        ..AdversarySpec::none()
    };
    let mut e = Engine::new(cfg).unwrap();
    e.run();
    check_clean(&e);
    assert!(e.stats().twins_approved > 0);
    assert_eq!(e.stats().rolled_back, e.stats().challenges);
    assert!(e.penalties().stake(ShardId(0)) < stake_for(4));
}

#[test]
fn hot_shard_splits_and_value_is_conserved() {
    let mut cfg = small(Mode::DynaShard, 11);
    cfg.validators_per_shard = 8;
    cfg.assignment = Assignment::Range;
    cfg.trigger = MgmtTrigger::Epoch;
    cfg.mgmt.shard_capacity = 100;
    cfg.workload.zipf_exponent = 1.2;
    cfg.workload.max_txs = 1500;
    cfg.workload.rate = 300.0;
    let mut e = Engine::new(cfg).unwrap();
    e.run();
    check_clean(&e);
    assert!(e.stats().splits > 0, "{:?}", e.stats());
    // Every account is homed in exactly one live shard.
    let mut seen = BTreeSet::new();
    for (id, st) in e.states() {
        for a in st.accounts() {
            assert_eq!(e.directory().home(a), Some(id));
            assert!(seen.insert(a));
        }
    }
    assert_eq!(seen.len(), 64);
}
