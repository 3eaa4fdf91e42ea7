//! Adversary injection.
//!
//! An [`Adversary`] holds signing capability only for corrupt parties
//! ([`AdversaryKeys`] is built by filtering the registry down to corrupt
//! ids) and never a reference to the registry itself, so honest shares and
//! honest state are unreachable from adversary code.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::consensus::NodeId;
use crate::ledger::{hash_parts, AccountId, Digest, DomainTag, OutputLeg, ShardId, SimTime, Transaction};
use crate::syncdispute::Verdict;
use crate::thresh::{PartialSignature, ShareRegistry, Signer, SignerId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Behavior {
    Equivocate,
    Withhold,
    DelayMax,
    ForgePartial,
    DoubleSpendInject,
    CollusionApprove,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdversarySpec {
    pub corrupt_nodes: BTreeSet<NodeId>,
    /// Shards whose shard-level signing key and vote are adversarial.
    pub corrupt_shards: BTreeSet<ShardId>,
    pub behaviors: BTreeSet<Behavior>,
    /// Probability that a submitted transaction gets a conflicting twin.
    pub injection_rate: f64,
    pub seed: u64,
}

impl Default for AdversarySpec {
    fn default() -> Self {
        Self::none()
    }
}

impl AdversarySpec {
    pub fn none() -> Self {
        AdversarySpec {
            corrupt_nodes: BTreeSet::new(),
            corrupt_shards: BTreeSet::new(),
            behaviors: BTreeSet::new(),
            injection_rate: 0.0,
            seed: 0,
        }
    }

    pub fn has(&self, b: Behavior) -> bool {
        self.behaviors.contains(&b)
    }

    /// True iff fewer than a third of `group` is corrupt.
    pub fn tolerable_in(&self, group: &[NodeId]) -> bool {
        let bad = group.iter().filter(|n| self.corrupt_nodes.contains(n)).count();
        3 * bad < group.len()
    }
}

/// Signing capability for corrupt parties only.
#[derive(Clone, Debug, Default)]
pub struct AdversaryKeys {
    signers: BTreeMap<SignerId, Signer>,
}

impl AdversaryKeys {
    pub fn issue(registry: &ShareRegistry, corrupt: impl IntoIterator<Item = SignerId>) -> Self {
        AdversaryKeys {
            signers: corrupt
                .into_iter()
                .filter_map(|id| registry.signer(id).map(|s| (id, s)))
                .collect(),
        }
    }

    pub fn signer(&self, id: SignerId) -> Option<&Signer> {
        self.signers.get(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = SignerId> + '_ {
        self.signers.keys().copied()
    }
}

/// Where the simulator consults the adversary.
#[derive(Clone, Debug)]
pub enum Hook<'a> {
    LeaderTurn {
        node: NodeId,
        view: u64,
        value: Digest,
    },
    PartialSign {
        signer: SignerId,
        message: Digest,
    },
    Vote {
        shard: ShardId,
    },
    TxSubmit {
        tx: &'a Transaction,
        /// Account the twin pays instead.
        alt_receiver: (ShardId, AccountId),
        /// Another shard the twin may falsely claim holds the input.
        alt_input_shard: Option<ShardId>,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Action {
    Honest,
    Silent,
    Equivocate { first: Digest, second: Digest },
    Delay(SimTime),
    Partial(PartialSignature),
    Vote(Verdict),
    DoubleSpend(Transaction),
}

#[derive(Clone, Debug)]
pub struct Adversary {
    spec: AdversarySpec,
    keys: AdversaryKeys,
    rng: ChaCha8Rng,
    /// Delay applied under `DelayMax`.
    pub max_delay: SimTime,
}

impl Adversary {
    pub fn new(spec: AdversarySpec, keys: AdversaryKeys, max_delay: SimTime) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x4144_5645_5253_4152);
        Adversary {
            spec,
            keys,
            rng,
            max_delay,
        }
    }

    pub fn spec(&self) -> &AdversarySpec {
        &self.spec
    }

    pub fn keys(&self) -> &AdversaryKeys {
        &self.keys
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn controls_node(&self, n: NodeId) -> bool {
        self.spec.corrupt_nodes.contains(&n)
    }

    pub fn controls_shard(&self, s: ShardId) -> bool {
        self.spec.corrupt_shards.contains(&s)
    }

    fn junk(&mut self, base: &Digest) -> Digest {
        let salt: [u8; 8] = self.rng.random();
        hash_parts(DomainTag::Msg, &[&base.0, &salt])
    }

    /// Decide what the adversary does at `hook`. Only corrupt parties act;
    /// everyone else gets [`Action::Honest`].
    pub fn inject(&mut self, hook: Hook<'_>) -> Action {
        match hook {
            Hook::LeaderTurn { node, value, .. } => {
                if !self.controls_node(node) {
                    return Action::Honest;
                }
                if self.spec.has(Behavior::Withhold) {
                    Action::Silent
                } else if self.spec.has(Behavior::Equivocate) {
                    let second = self.junk(&value);
                    Action::Equivocate { first: value, second }
                } else if self.spec.has(Behavior::DelayMax) {
                    Action::Delay(self.max_delay)
                } else {
                    Action::Honest
                }
            }
            Hook::PartialSign { signer, message } => {
                let Some(s) = self.keys.signer(signer).cloned() else {
                    return Action::Honest;
                };
                if self.spec.has(Behavior::Withhold) {
                    Action::Silent
                } else if self.spec.has(Behavior::ForgePartial) {
                    Action::Partial(PartialSignature {
                        signer,
                        message_digest: message,
                        sig: Digest(self.rng.random()),
                    })
                } else if self.spec.has(Behavior::CollusionApprove) {
                    Action::Partial(s.sign(message))
                } else {
                    Action::Honest
                }
            }
            Hook::Vote { shard } => {
                if self.controls_shard(shard) && self.spec.has(Behavior::CollusionApprove) {
                    Action::Vote(Verdict::Valid)
                } else {
                    Action::Honest
                }
            }
            Hook::TxSubmit {
                tx,
                alt_receiver,
                alt_input_shard,
            } => {
                if !self.spec.has(Behavior::DoubleSpendInject) || self.rng.random::<f64>() >= self.spec.injection_rate {
                    return Action::Honest;
                }
                let mut inputs = tx.inputs.clone();
                if let Some(s) = alt_input_shard {
                    if self.rng.random::<bool>() {
                        inputs[0].shard = s;
                    }
                }
                let twin = Transaction::new(
                    inputs,
                    vec![OutputLeg {
                        shard: alt_receiver.0,
                        account: alt_receiver.1,
                        amount: tx.total(),
                    }],
                    tx.created_at + 1,
                );
                match twin {
                    Ok(t) if t.id() != tx.id() => Action::DoubleSpend(t),
                    _ => Action::Honest,
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::{hash, InputLeg};

    fn spec(bs: &[Behavior]) -> AdversarySpec {
        AdversarySpec {
            corrupt_nodes: [NodeId(0)].into_iter().collect(),
            corrupt_shards: [ShardId(0)].into_iter().collect(),
            behaviors: bs.iter().copied().collect(),
            injection_rate: 1.0,
            seed: 3,
        }
    }

    #[test]
    fn keys_only_cover_corrupt_ids() {
        let reg = ShareRegistry::keygen(0, 4, 1, 9).unwrap();
        let keys = AdversaryKeys::issue(&reg, [SignerId(0), SignerId(42)]);
        assert!(keys.signer(SignerId(0)).is_some());
        for honest in 1..4 {
            assert!(keys.signer(SignerId(honest)).is_none());
        }
        assert_eq!(keys.ids().count(), 1);
    }

    #[test]
    fn honest_parties_are_never_driven() {
        let reg = ShareRegistry::keygen(0, 4, 1, 9).unwrap();
        let mut adv = Adversary::new(
            spec(&[Behavior::Equivocate, Behavior::ForgePartial, Behavior::CollusionApprove]),
            AdversaryKeys::issue(&reg, [SignerId(0)]),
            50,
        );
        let m = hash(DomainTag::Tx, b"m");
        assert_eq!(
            adv.inject(Hook::LeaderTurn {
                node: NodeId(1),
                view: 0,
                value: m
            }),
            Action::Honest
        );
        assert_eq!(
            adv.inject(Hook::PartialSign {
                signer: SignerId(2),
                message: m
            }),
            Action::Honest
        );
        assert_eq!(adv.inject(Hook::Vote { shard: ShardId(3) }), Action::Honest);
    }

    #[test]
    fn equivocation_and_forgery() {
        let reg = ShareRegistry::keygen(0, 4, 1, 9).unwrap();
        let mut adv = Adversary::new(
            spec(&[Behavior::Equivocate, Behavior::ForgePartial]),
            AdversaryKeys::issue(&reg, [SignerId(0)]),
            50,
        );
        let m = hash(DomainTag::Tx, b"m");
        match adv.inject(Hook::LeaderTurn {
            node: NodeId(0),
            view: 0,
            value: m,
        }) {
            Action::Equivocate { first, second } => assert_ne!(first, second),
            a => panic!("unexpected {a:?}"),
        }
        for _ in 0..100 {
            match adv.inject(Hook::PartialSign {
                signer: SignerId(0),
                message: m,
            }) {
                Action::Partial(p) => assert!(!reg.verify_partial(&p)),
                a => panic!("unexpected {a:?}"),
            }
        }
    }

    #[test]
    fn collusion_signs_and_votes_valid() {
        let reg = ShareRegistry::keygen(0, 4, 1, 9).unwrap();
        let mut adv = Adversary::new(
            spec(&[Behavior::CollusionApprove]),
            AdversaryKeys::issue(&reg, [SignerId(0)]),
            50,
        );
        let m = hash(DomainTag::Tx, b"m");
        match adv.inject(Hook::PartialSign {
            signer: SignerId(0),
            message: m,
        }) {
            Action::Partial(p) => assert!(reg.verify_partial(&p)),
            a => panic!("unexpected {a:?}"),
        }
        assert_eq!(
            adv.inject(Hook::Vote { shard: ShardId(0) }),
            Action::Vote(Verdict::Valid)
        );
    }

    #[test]
    fn double_spend_twin_shares_account_and_nonce() {
        let mut adv = Adversary::new(spec(&[Behavior::DoubleSpendInject]), AdversaryKeys::default(), 50);
        let tx = Transaction::new(
            vec![InputLeg {
                shard: ShardId(1),
                account: AccountId(5),
                amount: 10,
                nonce: 3,
            }],
            vec![OutputLeg {
                shard: ShardId(2),
                account: AccountId(6),
                amount: 10,
            }],
            7,
        )
        .unwrap();
        match adv.inject(Hook::TxSubmit {
            tx: &tx,
            alt_receiver: (ShardId(3), AccountId(9)),
            alt_input_shard: None,
        }) {
            Action::DoubleSpend(t) => {
                assert_eq!((t.inputs[0].account, t.inputs[0].nonce), (AccountId(5), 3));
                assert_ne!(t.id(), tx.id());
                assert_eq!(t.outputs[0].account, AccountId(9));
            }
            a => panic!("unexpected {a:?}"),
        }
    }
}
