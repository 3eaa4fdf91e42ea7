//! Runs one consensus group over the simulated network, with Byzantine
//! members driven only through their own signers.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::consensus::{
    check_decision_log, ConsensusConfig, ConsensusInstance, ConsensusMessage, Destination, Input, Justification,
    MsgKind, NodeId, PreparedCert, StepCtx,
};
use crate::ledger::{hash_parts, Digest, DomainTag, SimTime, SECONDS};
use crate::thresh::{ShareRegistry, Signer, SignerId};

use super::adversary::{Action, Adversary, AdversaryKeys, AdversarySpec, Behavior, Hook};
use super::net::NetModel;
use super::sched::Scheduler;

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterConfig {
    pub n: usize,
    pub group_id: u64,
    pub net: NetModel,
    /// Defaults to four times the mean one-way latency.
    pub view_timeout: Option<SimTime>,
    pub adversary: AdversarySpec,
    /// Number of independent sequence numbers decided concurrently.
    pub instances: u64,
    pub horizon: SimTime,
    pub seed: u64,
    /// Value every honest member proposes; by default each proposes its
    /// own candidate.
    pub proposal: Option<Digest>,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            n: 4,
            group_id: 1,
            net: NetModel::default(),
            view_timeout: None,
            adversary: AdversarySpec::none(),
            instances: 1,
            horizon: 60 * SECONDS,
            seed: 1,
            proposal: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClusterReport {
    /// (node, seq) → (decided value, view at decision).
    pub decisions: BTreeMap<(NodeId, u64), (Digest, u64)>,
    pub honest: BTreeSet<NodeId>,
    pub agreement: bool,
    pub all_honest_decided: bool,
    /// Highest view any honest node reached in any instance.
    pub max_view: u64,
    pub messages_delivered: u64,
    /// Largest delivery delay of a message sent at or after GST.
    pub max_post_gst_delay: SimTime,
    pub finished_at: SimTime,
    pub evidence: usize,
}

#[derive(Clone, Debug)]
enum Ev {
    Start {
        node: NodeId,
        seq: u64,
    },
    Timer {
        node: NodeId,
        seq: u64,
    },
    Deliver {
        to: NodeId,
        msg: ConsensusMessage,
        sent: SimTime,
    },
}

/// Byzantine member: tries to split honest nodes using every message it
/// can legitimately sign, plus certificates assembled from honest prepares.
struct Byzantine {
    signer: Signer,
    voted: BTreeSet<(u64, u64, Digest)>,
    prepares: BTreeMap<(u64, u64, Digest), BTreeMap<NodeId, ConsensusMessage>>,
    vcs: BTreeMap<(u64, u64), BTreeMap<NodeId, ConsensusMessage>>,
    vc_sent: BTreeSet<(u64, u64)>,
    nv_sent: BTreeSet<(u64, u64)>,
}

struct Sim<'a> {
    cfg: &'a ClusterConfig,
    ccfg: ConsensusConfig,
    registry: &'a ShareRegistry,
    sched: Scheduler<Ev>,
    rng: ChaCha8Rng,
    adversary: Adversary,
    honest: BTreeMap<(NodeId, u64), ConsensusInstance>,
    byz: BTreeMap<NodeId, Byzantine>,
    delivered: u64,
    max_post_gst_delay: SimTime,
}

fn candidate(group: u64, seq: u64, node: NodeId) -> Digest {
    hash_parts(
        DomainTag::Msg,
        &[&group.to_be_bytes(), &seq.to_be_bytes(), &node.0.to_be_bytes()],
    )
}

impl Sim<'_> {
    fn send(&mut self, from: NodeId, to: Destination, msg: ConsensusMessage) {
        let targets: Vec<NodeId> = match to {
            Destination::All => self.ccfg.nodes.iter().copied().filter(|&n| n != from).collect(),
            Destination::Node(n) => alloc::vec![n],
        };
        for t in targets {
            self.send_one(from, t, msg.clone());
        }
    }

    fn send_one(&mut self, from: NodeId, to: NodeId, msg: ConsensusMessage) {
        let now = self.sched.now();
        let Some(mut at) = self.cfg.net.delivery(&mut self.rng, from.0, to.0, now) else {
            return;
        };
        if self.adversary.controls_node(from) && self.adversary.spec().has(Behavior::DelayMax) {
            at = at.max(now.max(self.cfg.net.gst) + self.cfg.net.delta);
        }
        self.sched.schedule(at, Ev::Deliver { to, msg, sent: now });
    }

    fn honest_step(&mut self, node: NodeId, seq: u64, input: Input) {
        let now = self.sched.now();
        let ctx = StepCtx {
            registry: self.registry,
            validity: &|_| true,
        };
        let Some(inst) = self.honest.get_mut(&(node, seq)) else {
            return;
        };
        let Ok(out) = inst.step(now, input, &ctx) else {
            return;
        };
        if let Some(d) = out.timer {
            self.sched.schedule(d, Ev::Timer { node, seq });
        }
        for o in out.outbox {
            self.send(node, o.to, o.msg);
        }
    }

    fn split_send(&mut self, from: NodeId, a: ConsensusMessage, b: ConsensusMessage) {
        let mut others: Vec<NodeId> = self.ccfg.nodes.iter().copied().filter(|&n| n != from).collect();
        others.shuffle(&mut self.rng);
        let half = others.len() / 2;
        for (i, t) in others.into_iter().enumerate() {
            let m = if i < half { a.clone() } else { b.clone() };
            self.send_one(from, t, m);
        }
    }

    fn byz_start(&mut self, node: NodeId, seq: u64) {
        if self.ccfg.leader(0) != node {
            return;
        }
        let value = candidate(self.ccfg.group_id, seq, node);
        let action = self.adversary.inject(Hook::LeaderTurn { node, view: 0, value });
        let signer = self.byz[&node].signer.clone();
        let g = self.ccfg.group_id;
        match action {
            Action::Silent => {}
            Action::Equivocate { first, second } => {
                let a = ConsensusMessage::signed(g, MsgKind::PrePrepare, 0, seq, first, Justification::None, &signer);
                let b = ConsensusMessage::signed(g, MsgKind::PrePrepare, 0, seq, second, Justification::None, &signer);
                self.split_send(node, a, b);
            }
            _ => {
                let a = ConsensusMessage::signed(g, MsgKind::PrePrepare, 0, seq, value, Justification::None, &signer);
                self.send(node, Destination::All, a);
            }
        }
    }

    fn byz_receive(&mut self, node: NodeId, m: ConsensusMessage) {
        if self.adversary.spec().has(Behavior::Withhold) {
            return;
        }
        let g = self.ccfg.group_id;
        let q = self.ccfg.quorum();
        let seq = m.seq;
        let signer = self.byz[&node].signer.clone();
        let mut out: Vec<(Destination, ConsensusMessage)> = Vec::new();
        {
            let b = self.byz.get_mut(&node).expect("byzantine node");
            match m.kind {
                MsgKind::Prepare => {
                    b.prepares
                        .entry((seq, m.view, m.value_digest))
                        .or_default()
                        .insert(m.sender, m.clone());
                }
                MsgKind::ViewChange => {
                    b.vcs.entry((seq, m.view)).or_default().insert(m.sender, m.clone());
                }
                _ => {}
            }
            // Vote for every value seen in a view, to random halves.
            if matches!(m.kind, MsgKind::PrePrepare | MsgKind::NewView | MsgKind::Prepare)
                && b.voted.insert((seq, m.view, m.value_digest))
            {
                for kind in [MsgKind::Prepare, MsgKind::Commit] {
                    let msg =
                        ConsensusMessage::signed(g, kind, m.view, seq, m.value_digest, Justification::None, &signer);
                    out.push((Destination::All, msg));
                }
            }
            // Join every view change, offering whichever certificate it can
            // assemble (possibly stale).
            if m.kind == MsgKind::ViewChange && b.vc_sent.insert((seq, m.view)) {
                let certs: Vec<PreparedCert> = b
                    .prepares
                    .iter()
                    .filter(|((s, v, _), ps)| *s == seq && *v < m.view && ps.len() >= q)
                    .map(|((_, v, d), ps)| PreparedCert {
                        view: *v,
                        value: *d,
                        prepares: ps.values().take(q).cloned().collect(),
                    })
                    .collect();
                let cert = certs.first().cloned();
                let (value, j) = match cert {
                    Some(c) => (c.value, Justification::Prepared(c)),
                    None => (Digest::ZERO, Justification::None),
                };
                let vc = ConsensusMessage::signed(g, MsgKind::ViewChange, m.view, seq, value, j, &signer);
                b.vcs.entry((seq, m.view)).or_default().insert(node, vc.clone());
                out.push((Destination::All, vc));
            }
        }
        for (to, msg) in out {
            self.send(node, to, msg);
        }
        self.byz_try_new_view(node, seq, m.view);
    }

    fn byz_try_new_view(&mut self, node: NodeId, seq: u64, view: u64) {
        if view == 0 || self.ccfg.leader(view) != node {
            return;
        }
        let q = self.ccfg.quorum();
        let g = self.ccfg.group_id;
        let (signer, vcs) = {
            let b = &self.byz[&node];
            if b.nv_sent.contains(&(seq, view)) {
                return;
            }
            let Some(vcs) = b.vcs.get(&(seq, view)) else { return };
            if vcs.len() < q {
                return;
            }
            (b.signer.clone(), vcs.values().cloned().collect::<Vec<_>>())
        };
        self.byz
            .get_mut(&node)
            .expect("byzantine node")
            .nv_sent
            .insert((seq, view));
        // Two different valid quorums, each with the value its own
        // certificates force (or an arbitrary one if none).
        let pick = |rng: &mut ChaCha8Rng| {
            let mut subset = vcs.clone();
            subset.shuffle(rng);
            subset.truncate(q);
            let best = subset
                .iter()
                .filter_map(|m| match &m.justification {
                    Justification::Prepared(c) => Some((c.view, c.value)),
                    _ => None,
                })
                .max_by_key(|x| x.0);
            let value = best.map_or_else(
                || {
                    let salt: [u8; 8] = rng.random();
                    hash_parts(DomainTag::Msg, &[&salt])
                },
                |x| x.1,
            );
            ConsensusMessage::signed(
                g,
                MsgKind::NewView,
                view,
                seq,
                value,
                Justification::ViewChanges(subset),
                &signer,
            )
        };
        let a = pick(&mut self.rng);
        let b = pick(&mut self.rng);
        self.split_send(node, a, b);
    }

    fn all_decided(&self) -> bool {
        self.honest.values().all(|i| i.decided().is_some())
    }
}

/// Run a consensus group until every honest member decides every instance
/// or the horizon passes.
pub fn run_cluster(cfg: &ClusterConfig) -> ClusterReport {
    let nodes: Vec<NodeId> = (0..cfg.n as u32).map(NodeId).collect();
    let timeout = cfg.view_timeout.unwrap_or(4 * cfg.net.mean_latency());
    let ccfg = ConsensusConfig::new(cfg.group_id, nodes.clone(), timeout).expect("non-empty group");
    let registry = ShareRegistry::keygen(cfg.group_id, cfg.n, 1, cfg.seed).expect("valid registry");
    let keys = AdversaryKeys::issue(&registry, cfg.adversary.corrupt_nodes.iter().map(|n| SignerId(n.0)));
    let adversary = Adversary::new(cfg.adversary.clone(), keys, cfg.net.delta);

    let mut honest = BTreeMap::new();
    let mut byz = BTreeMap::new();
    for &n in &nodes {
        if adversary.controls_node(n) {
            let signer = adversary.keys().signer(n.signer_id()).expect("corrupt key").clone();
            byz.insert(
                n,
                Byzantine {
                    signer,
                    voted: BTreeSet::new(),
                    prepares: BTreeMap::new(),
                    vcs: BTreeMap::new(),
                    vc_sent: BTreeSet::new(),
                    nv_sent: BTreeSet::new(),
                },
            );
        } else {
            for seq in 0..cfg.instances {
                let signer = registry.signer(n.signer_id()).expect("member key");
                honest.insert((n, seq), ConsensusInstance::new(ccfg.clone(), seq, signer));
            }
        }
    }
    let mut sim = Sim {
        cfg,
        ccfg,
        registry: &registry,
        sched: Scheduler::new(),
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        adversary,
        honest,
        byz,
        delivered: 0,
        max_post_gst_delay: 0,
    };
    for seq in 0..cfg.instances {
        for &n in &nodes {
            let jitter = sim.rng.random_range(0..=cfg.net.jitter);
            sim.sched.schedule(jitter, Ev::Start { node: n, seq });
        }
    }
    while let Some(ev) = sim.sched.pop_until(cfg.horizon) {
        match ev.payload {
            Ev::Start { node, seq } => {
                if sim.byz.contains_key(&node) {
                    sim.byz_start(node, seq);
                } else {
                    let v = cfg.proposal.unwrap_or_else(|| candidate(cfg.group_id, seq, node));
                    sim.honest_step(node, seq, Input::Propose(v));
                }
            }
            Ev::Timer { node, seq } => sim.honest_step(node, seq, Input::TimerFired),
            Ev::Deliver { to, msg, sent } => {
                sim.delivered += 1;
                if sent >= cfg.net.gst {
                    sim.max_post_gst_delay = sim.max_post_gst_delay.max(ev.fire_at - sent);
                }
                if sim.byz.contains_key(&to) {
                    sim.byz_receive(to, msg);
                } else {
                    let seq = msg.seq;
                    sim.honest_step(to, seq, Input::Msg(msg));
                }
            }
        }
        if sim.all_decided() {
            break;
        }
    }

    let mut decisions = BTreeMap::new();
    let mut max_view = 0;
    let mut evidence = 0;
    for (&(n, seq), inst) in &sim.honest {
        max_view = max_view.max(inst.view());
        evidence += inst.evidence().len();
        if let (Some(d), Some(v)) = (inst.decided(), inst.decided_view()) {
            decisions.insert((n, seq), (d, v));
        }
    }
    let honest: BTreeSet<NodeId> = sim.honest.keys().map(|k| k.0).collect();
    ClusterReport {
        agreement: check_decision_log(decisions.iter().map(|(k, v)| (k.1, v.0))),
        all_honest_decided: sim.all_decided(),
        decisions,
        honest,
        max_view,
        messages_delivered: sim.delivered,
        max_post_gst_delay: sim.max_post_gst_delay,
        finished_at: sim.sched.now(),
        evidence,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::MILLIS;

    fn byz(f: u32, bs: &[Behavior], seed: u64) -> AdversarySpec {
        AdversarySpec {
            corrupt_nodes: (0..f).map(NodeId).collect(),
            behaviors: bs.iter().copied().collect(),
            seed,
            ..AdversarySpec::none()
        }
    }

    #[test]
    fn honest_cluster_decides_in_view_zero() {
        let r = run_cluster(&ClusterConfig::default());
        assert!(r.agreement && r.all_honest_decided);
        assert_eq!(r.max_view, 0);
    }

    #[test]
    fn equivocating_minority_cannot_split() {
        for seed in 0..20 {
            for f in 1..=2u32 {
                let r = run_cluster(&ClusterConfig {
                    n: 3 * f as usize + 1,
                    adversary: byz(f, &[Behavior::Equivocate], seed),
                    net: NetModel {
                        gst: 300 * MILLIS,
                        drop_rate: 0.05,
                        ..NetModel::default()
                    },
                    instances: 2,
                    seed,
                    ..ClusterConfig::default()
                });
                assert!(r.agreement, "seed {seed} f {f}");
                assert!(r.all_honest_decided, "seed {seed} f {f}");
            }
        }
    }

    #[test]
    fn silent_leaders_bounded_view_changes() {
        for seed in 0..10 {
            let r = run_cluster(&ClusterConfig {
                n: 7,
                adversary: byz(2, &[Behavior::Withhold], seed),
                seed,
                ..ClusterConfig::default()
            });
            assert!(r.all_honest_decided && r.agreement);
            assert!(r.max_view <= 3, "max view {}", r.max_view);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = ClusterConfig {
            n: 7,
            adversary: byz(2, &[Behavior::Equivocate], 5),
            net: NetModel {
                gst: 100 * MILLIS,
                drop_rate: 0.1,
                ..NetModel::default()
            },
            seed: 5,
            ..ClusterConfig::default()
        };
        assert_eq!(run_cluster(&cfg), run_cluster(&cfg));
    }
}
