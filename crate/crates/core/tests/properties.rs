//! Property tests for the invariants the simulator relies on.

use std::collections::{BTreeMap, BTreeSet};

use dynashard_core::consensus::NodeId;
use dynashard_core::engine::{Assignment, Engine, EngineConfig, MgmtTrigger, Mode, TxStatus};
use dynashard_core::ledger::{
    hash_parts, AccountId, Digest, DomainTag, Entry, InputLeg, OutputLeg, ShardId, ShardState, Transaction, MILLIS,
};
use dynashard_core::merkle::{verify, StateTree};
use dynashard_core::shardmgr::rebalance;
use dynashard_core::simnet::adversary::{AdversarySpec, Behavior};
use dynashard_core::simnet::cluster::{run_cluster, ClusterConfig};
use dynashard_core::simnet::net::NetModel;
use dynashard_core::simnet::workload::WorkloadSpec;
use dynashard_core::thresh::{ShareRegistry, SignerId};
use proptest::prelude::*;

fn key(i: u64) -> Digest {
    hash_parts(DomainTag::Tx, &[&i.to_be_bytes()])
}

fn entry() -> impl Strategy<Value = Entry> {
    prop_oneof![
        (0u64..6, 0u64..400, 1u64..4).prop_map(|(a, amount, nonce)| Entry::Debit {
            account: AccountId(a),
            amount,
            nonce,
        }),
        (0u64..6, 0u64..400).prop_map(|(a, amount)| Entry::Credit {
            account: AccountId(a),
            amount,
        }),
    ]
}

fn engine_config(mode: Mode, seed: u64, cross: f64, multi: f64) -> EngineConfig {
    EngineConfig {
        mode,
        shards: 4,
        validators_per_shard: 4,
        assignment: Assignment::Hash,
        workload: WorkloadSpec {
            rate: 200.0,
            cross_ratio: cross,
            account_count: 48,
            zipf_exponent: 0.0,
            duration: 0,
            max_txs: 80,
            multi_input_ratio: multi,
            seed,
            ..WorkloadSpec::default()
        },
        trigger: MgmtTrigger::Disabled,
        seed,
        ..EngineConfig::default()
    }
}

proptest! {
    #[test]
    fn apply_all_is_all_or_nothing(entries in prop::collection::vec(entry(), 1..8)) {
        let start = ShardState::with_balances((0..6).map(|a| (AccountId(a), 500)));
        let mut s = start.clone();
        match s.apply_all(&entries, true) {
            Ok(()) => {
                let debits: u128 = entries.iter().map(|e| match e { Entry::Debit { amount, .. } => *amount as u128, _ => 0 }).sum();
                let credits: u128 = entries.iter().map(|e| match e { Entry::Credit { amount, .. } => *amount as u128, _ => 0 }).sum();
                prop_assert_eq!(s.total() + debits, start.total() + credits);
            }
            Err(_) => prop_assert_eq!(s, start),
        }
    }

    #[test]
    fn transaction_ids_commit_to_every_field(
        amount in 1u64..1000,
        nonce in 1u64..10,
        t in 0u64..1_000_000,
        a in 0u64..100,
        b in 0u64..100,
    ) {
        let mk = |amount, nonce, t| Transaction::new(
            vec![InputLeg { shard: ShardId(0), account: AccountId(a), amount, nonce }],
            vec![OutputLeg { shard: ShardId(1), account: AccountId(b), amount }],
            t,
        ).unwrap();
        let tx = mk(amount, nonce, t);
        prop_assert!(tx.id_matches());
        prop_assert_eq!(tx.id(), mk(amount, nonce, t).id());
        prop_assert_ne!(tx.id(), mk(amount, nonce + 1, t).id());
        prop_assert_ne!(tx.id(), mk(amount + 1, nonce, t).id());
        prop_assert_ne!(tx.id(), mk(amount, nonce, t + 1).id());
    }

    #[test]
    fn incremental_merkle_updates_match_a_rebuild(ops in prop::collection::vec((0u64..32, prop::option::of(0u64..1000)), 1..40)) {
        let mut model: BTreeMap<Digest, Digest> = BTreeMap::new();
        let mut tree = StateTree::empty();
        for (k, v) in ops {
            let k = key(k);
            match v {
                Some(v) => {
                    model.insert(k, key(10_000 + v));
                    tree.update_in_place(k, key(10_000 + v));
                }
                None => {
                    model.remove(&k);
                    tree.remove_in_place(&k);
                }
            }
        }
        let rebuilt = StateTree::build(model.iter().map(|(k, v)| (*k, *v))).unwrap();
        prop_assert_eq!(tree.root(), rebuilt.root());
        for k in model.keys() {
            let p = tree.prove(k).unwrap();
            prop_assert!(verify(&tree.root(), &p));
        }
    }

    #[test]
    fn greedy_rebalance_places_everything_within_the_list_bound(
        weights in prop::collection::vec(1u64..1000, 1..30),
        bins in 1usize..6,
    ) {
        let items: Vec<(AccountId, u64)> = weights.iter().enumerate().map(|(i, &w)| (AccountId(i as u64), w)).collect();
        let (assign, loads) = rebalance(&items, bins);
        prop_assert_eq!(assign.len(), weights.len());
        let mut recount = vec![0u64; bins];
        for (i, &b) in assign.iter().enumerate() {
            recount[b] += weights[i];
        }
        prop_assert_eq!(&recount, &loads);
        let total: u64 = weights.iter().sum();
        let biggest = *weights.iter().max().unwrap();
        // Any greedy list schedule stays within average load plus one item.
        prop_assert!(*loads.iter().max().unwrap() as f64 <= total as f64 / bins as f64 + biggest as f64);
    }

    #[test]
    fn threshold_combines_exactly_at_quorum(n in 1usize..9, t_frac in 0.0f64..1.0, pick in any::<u16>(), seed in any::<u64>()) {
        let t = 1 + ((n - 1) as f64 * t_frac) as usize;
        let reg = ShareRegistry::keygen(3, n, t, seed).unwrap();
        let msg = key(seed);
        let chosen: Vec<u32> = (0..n as u32).filter(|i| pick >> i & 1 == 1).collect();
        let parts: Vec<_> = chosen.iter().map(|&i| reg.partial_sign(SignerId(i), msg).unwrap()).collect();
        match reg.combine(&parts) {
            Ok(sigma) => {
                prop_assert!(chosen.len() >= t);
                prop_assert!(reg.verify_threshold(&sigma));
            }
            Err(_) => prop_assert!(chosen.len() < t),
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn honest_nodes_never_disagree(seed in any::<u64>(), f in 1u32..3, equivocate in any::<bool>(), drop in 0.0f64..0.2) {
        let b = if equivocate { Behavior::Equivocate } else { Behavior::Withhold };
        let r = run_cluster(&ClusterConfig {
            n: 3 * f as usize + 1,
            adversary: AdversarySpec {
                corrupt_nodes: (0..f).map(NodeId).collect(),
                behaviors: [b].into_iter().collect(),
                seed,
                ..AdversarySpec::none()
            },
            net: NetModel { gst: 200 * MILLIS, drop_rate: drop, ..NetModel::default() },
            instances: 2,
            seed,
            ..ClusterConfig::default()
        });
        let mut by_seq: BTreeMap<u64, BTreeSet<Digest>> = BTreeMap::new();
        for (&(node, seq), &(v, _)) in &r.decisions {
            if r.honest.contains(&node) {
                by_seq.entry(seq).or_default().insert(v);
            }
        }
        prop_assert!(by_seq.values().all(|vs| vs.len() == 1));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn engine_runs_conserve_value_and_are_reproducible(
        seed in any::<u64>(),
        baseline in any::<bool>(),
        cross in 0.0f64..1.0,
        multi in 0.0f64..0.6,
    ) {
        let mode = if baseline { Mode::Baseline } else { Mode::DynaShard };
        let mut e = Engine::new(engine_config(mode, seed, cross, multi)).unwrap();
        e.run();
        prop_assert!(e.violations().is_empty(), "{:?}", e.violations());
        prop_assert_eq!(e.total_value(), e.initial_total());
        prop_assert_eq!(e.escrowed(), 0);
        prop_assert_eq!(e.committed_double_spends(), 0);
        for (h, t) in e.txs() {
            prop_assert!(t.status != TxStatus::Pending, "{:?} unresolved", h);
            if t.is_cross() && matches!(t.status, TxStatus::Committed(_)) {
                prop_assert_eq!(e.applied_outputs(h), t.tx.outputs.len());
            }
        }
        let mut again = Engine::new(engine_config(mode, seed, cross, multi)).unwrap();
        again.run();
        prop_assert_eq!(e.trace().digest(), again.trace().digest());
    }
}
