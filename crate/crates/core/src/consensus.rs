//! PBFT-style replicated decision on a single value per sequence number.
//!
//! One [`ConsensusInstance`] exists per (group, seq) per node. The instance
//! is a single-owner state machine: the simulator feeds it messages, timer
//! expirations and the local proposal through [`ConsensusInstance::step`],
//! and broadcasts whatever ends up in the returned outbox.
//!
//! Protocol summary:
//! * view 0: the leader sends `PrePrepare(v)`; every node that accepts it
//!   sends `Prepare`; `quorum` matching prepares make a node *prepared*
//!   and it sends `Commit`; `quorum` matching commits decide.
//! * on timeout a node sends `ViewChange(view+1)` carrying its highest
//!   prepared certificate (the signed prepares themselves). The new leader
//!   collects a quorum of view changes and broadcasts `NewView`, which
//!   carries them as justification and re-proposes the value of the
//!   highest certificate (or its own candidate if none exists). `NewView`
//!   doubles as the pre-prepare of the new view.
//! * `f + 1` view changes for higher views make a lagging node join.
//! * a decided node answers view changes with its commit certificate so
//!   stragglers can catch up.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use thiserror::Error;

use crate::ledger::{Digest, DomainTag, Encoder, ObjectKind, SimTime};
use crate::thresh::{PartialSignature, ShareRegistry, Signer, SignerId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn signer_id(self) -> SignerId {
        SignerId(self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConsensusError {
    #[error("consensus group has no nodes")]
    EmptyGroup,
    #[error("node {0:?} listed twice")]
    DuplicateNode(NodeId),
    #[error("sender {0:?} is not a member")]
    NotMember(NodeId),
    #[error("message belongs to another instance")]
    WrongInstance,
    #[error("authentication failed for message from {0:?}")]
    AuthFailure(NodeId),
    #[error("{0:?} is not the leader of view {1}")]
    NotLeader(NodeId, u64),
    #[error("leader {sender:?} equivocated in view {view}")]
    Equivocation { sender: NodeId, view: u64 },
    #[error("invalid justification from {0:?}")]
    InvalidJustification(NodeId),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConsensusConfig {
    pub group_id: u64,
    pub nodes: Vec<NodeId>,
    pub f: usize,
    pub view_timeout: SimTime,
}

impl ConsensusConfig {
    pub fn new(group_id: u64, nodes: Vec<NodeId>, view_timeout: SimTime) -> Result<Self, ConsensusError> {
        if nodes.is_empty() {
            return Err(ConsensusError::EmptyGroup);
        }
        let mut seen = BTreeSet::new();
        for &n in &nodes {
            if !seen.insert(n) {
                return Err(ConsensusError::DuplicateNode(n));
            }
        }
        let f = (nodes.len() - 1) / 3;
        Ok(ConsensusConfig {
            group_id,
            nodes,
            f,
            view_timeout,
        })
    }

    pub fn n(&self) -> usize {
        self.nodes.len()
    }

    pub fn contains(&self, node: NodeId) -> bool {
        self.nodes.contains(&node)
    }

    pub fn leader(&self, view: u64) -> NodeId {
        leader(view, self)
    }

    pub fn quorum(&self) -> usize {
        quorum(self)
    }

    /// Timeout for `view`; doubles with every view change (capped).
    pub fn timeout_for(&self, view: u64) -> SimTime {
        self.view_timeout.saturating_mul(1 << view.min(16))
    }
}

/// Round-robin leader: `nodes[view mod n]`.
pub fn leader(view: u64, config: &ConsensusConfig) -> NodeId {
    config.nodes[(view % config.nodes.len() as u64) as usize]
}

/// Size of a quorum. Equals `2f + 1` whenever `n = 3f + 1`; for other
/// group sizes it is the smallest count such that any two quorums share
/// at least `f + 1` members, which keeps the protocol safe.
pub fn quorum(config: &ConsensusConfig) -> usize {
    (config.n() + config.f + 2) / 2
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum MsgKind {
    PrePrepare = 0,
    Prepare = 1,
    Commit = 2,
    ViewChange = 3,
    NewView = 4,
}

/// Prepared certificate: a quorum of signed prepares for one (view, value).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PreparedCert {
    pub view: u64,
    pub value: Digest,
    pub prepares: Vec<ConsensusMessage>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Justification {
    None,
    /// Carried by a view change: the sender's highest prepared certificate.
    Prepared(PreparedCert),
    /// Carried by a new view: a quorum of view changes.
    ViewChanges(Vec<ConsensusMessage>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConsensusMessage {
    pub group: u64,
    pub kind: MsgKind,
    pub view: u64,
    pub seq: u64,
    pub value_digest: Digest,
    pub sender: NodeId,
    pub justification: Justification,
    pub auth: PartialSignature,
}

impl ConsensusMessage {
    /// Build and sign a message. Adversarial nodes use this too, with their
    /// own signer only.
    #[allow(clippy::too_many_arguments)]
    pub fn signed(
        group: u64,
        kind: MsgKind,
        view: u64,
        seq: u64,
        value_digest: Digest,
        justification: Justification,
        signer: &Signer,
    ) -> Self {
        let sender = NodeId(signer.id().0);
        let body = body_digest(group, kind, view, seq, &value_digest, sender, &justification);
        ConsensusMessage {
            group,
            kind,
            view,
            seq,
            value_digest,
            sender,
            justification,
            auth: signer.sign(body),
        }
    }

    /// Digest of the canonical encoding of everything except `auth`.
    pub fn body_digest(&self) -> Digest {
        body_digest(
            self.group,
            self.kind,
            self.view,
            self.seq,
            &self.value_digest,
            self.sender,
            &self.justification,
        )
    }

    fn authentic(&self, registry: &ShareRegistry) -> bool {
        self.auth.signer == self.sender.signer_id()
            && self.auth.message_digest == self.body_digest()
            && registry.verify_partial(&self.auth)
    }

    /// Approximate wire size, used for bandwidth accounting.
    pub fn wire_size(&self) -> usize {
        let just = match &self.justification {
            Justification::None => 0,
            Justification::Prepared(c) => 40 + c.prepares.iter().map(|m| m.wire_size()).sum::<usize>(),
            Justification::ViewChanges(v) => v.iter().map(|m| m.wire_size()).sum(),
        };
        128 + just
    }
}

fn body_digest(
    group: u64,
    kind: MsgKind,
    view: u64,
    seq: u64,
    value: &Digest,
    sender: NodeId,
    justification: &Justification,
) -> Digest {
    let mut e = Encoder::new(ObjectKind::ConsensusMessage);
    e.u64(group)
        .u8(kind as u8)
        .u64(view)
        .u64(seq)
        .digest(value)
        .u32(sender.0);
    match justification {
        Justification::None => {
            e.u8(0);
        }
        Justification::Prepared(c) => {
            e.u8(1).u64(c.view).digest(&c.value).len_prefix(c.prepares.len());
            for m in &c.prepares {
                e.digest(&m.body_digest());
            }
        }
        Justification::ViewChanges(v) => {
            e.u8(2).len_prefix(v.len());
            for m in v {
                e.digest(&m.body_digest());
            }
        }
    }
    e.hash(DomainTag::Msg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Phase {
    Idle,
    PrePrepared,
    Prepared,
    Decided,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvidenceKind {
    AuthFailure,
    Equivocation,
    InvalidJustification,
}

/// Misbehaviour observed by an instance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Evidence {
    pub kind: EvidenceKind,
    pub sender: NodeId,
    pub messages: Vec<ConsensusMessage>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Input {
    Msg(ConsensusMessage),
    TimerFired,
    Propose(Digest),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Destination {
    /// Every other member of the group.
    All,
    Node(NodeId),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Outgoing {
    pub to: Destination,
    pub msg: ConsensusMessage,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StepOutput {
    pub outbox: Vec<Outgoing>,
    /// Set on the step that decides.
    pub decision: Option<Digest>,
    /// New timer deadline the caller must schedule.
    pub timer: Option<SimTime>,
}

/// Everything an instance needs from its environment.
pub struct StepCtx<'a> {
    pub registry: &'a ShareRegistry,
    /// External validity of proposed values.
    pub validity: &'a dyn Fn(&Digest) -> bool,
}

type Tally = BTreeMap<(u64, Digest), BTreeMap<NodeId, ConsensusMessage>>;

#[derive(Clone, Debug)]
pub struct ConsensusInstance {
    config: ConsensusConfig,
    seq: u64,
    me: NodeId,
    signer: Signer,
    view: u64,
    phase: Phase,
    in_view_change: bool,
    candidate: Option<Digest>,
    /// Value this node pre-prepared (or became locked on) per view.
    accepted: BTreeMap<u64, Digest>,
    leader_msgs: BTreeMap<u64, ConsensusMessage>,
    prepares: Tally,
    commits: Tally,
    commit_sent: BTreeSet<u64>,
    prepared: Option<PreparedCert>,
    view_changes: BTreeMap<u64, BTreeMap<NodeId, ConsensusMessage>>,
    new_view_sent: BTreeSet<u64>,
    decided: Option<(u64, Digest)>,
    commit_cert: Vec<ConsensusMessage>,
    replied: BTreeSet<(NodeId, u64)>,
    timer_deadline: Option<SimTime>,
    evidence: Vec<Evidence>,
}

impl ConsensusInstance {
    pub fn new(config: ConsensusConfig, seq: u64, signer: Signer) -> Self {
        let me = NodeId(signer.id().0);
        ConsensusInstance {
            config,
            seq,
            me,
            signer,
            view: 0,
            phase: Phase::Idle,
            in_view_change: false,
            candidate: None,
            accepted: BTreeMap::new(),
            leader_msgs: BTreeMap::new(),
            prepares: BTreeMap::new(),
            commits: BTreeMap::new(),
            commit_sent: BTreeSet::new(),
            prepared: None,
            view_changes: BTreeMap::new(),
            new_view_sent: BTreeSet::new(),
            decided: None,
            commit_cert: Vec::new(),
            replied: BTreeSet::new(),
            timer_deadline: None,
            evidence: Vec::new(),
        }
    }

    pub fn config(&self) -> &ConsensusConfig {
        &self.config
    }
    pub fn seq(&self) -> u64 {
        self.seq
    }
    pub fn me(&self) -> NodeId {
        self.me
    }
    pub fn view(&self) -> u64 {
        self.view
    }
    pub fn phase(&self) -> Phase {
        self.phase
    }
    pub fn in_view_change(&self) -> bool {
        self.in_view_change
    }
    pub fn decided(&self) -> Option<Digest> {
        self.decided.map(|(_, d)| d)
    }
    /// View in which the decided value was committed.
    pub fn decided_view(&self) -> Option<u64> {
        self.decided.map(|(v, _)| v)
    }
    pub fn timer_deadline(&self) -> Option<SimTime> {
        self.timer_deadline
    }
    pub fn evidence(&self) -> &[Evidence] {
        &self.evidence
    }
    pub fn prepared_cert(&self) -> Option<&PreparedCert> {
        self.prepared.as_ref()
    }
    /// Distinct senders of prepares for (view, value).
    pub fn prepare_tally(&self, view: u64, value: &Digest) -> usize {
        self.prepares.get(&(view, *value)).map_or(0, |m| m.len())
    }
    pub fn commit_tally(&self, view: u64, value: &Digest) -> usize {
        self.commits.get(&(view, *value)).map_or(0, |m| m.len())
    }
    /// The quorum of commits that justified the decision.
    pub fn commit_certificate(&self) -> &[ConsensusMessage] {
        &self.commit_cert
    }

    /// Advance the state machine. On `Err` the input was dropped; the
    /// instance itself is unchanged apart from recorded evidence.
    pub fn step(&mut self, now: SimTime, input: Input, ctx: &StepCtx<'_>) -> Result<StepOutput, ConsensusError> {
        let mut out = StepOutput::default();
        if self.timer_deadline.is_none() && self.decided.is_none() {
            self.set_timer(now, &mut out);
        }
        match input {
            Input::Propose(v) => {
                if self.candidate.is_none() {
                    self.candidate = Some(v);
                }
                if self.decided.is_none()
                    && self.view == 0
                    && self.me == self.config.leader(0)
                    && !self.leader_msgs.contains_key(&0)
                {
                    let msg = self.sign(MsgKind::PrePrepare, 0, v, Justification::None);
                    self.leader_msgs.insert(0, msg.clone());
                    out.outbox.push(Outgoing {
                        to: Destination::All,
                        msg,
                    });
                    self.on_proposal(0, v, ctx, &mut out);
                }
                self.try_new_view(now, ctx, &mut out);
            }
            Input::TimerFired => {
                if self.decided.is_none() && self.timer_deadline.is_some_and(|d| now >= d) {
                    let target = self.view + 1;
                    self.start_view_change(now, target, ctx, &mut out);
                }
            }
            Input::Msg(m) => self.on_message(now, m, ctx, &mut out)?,
        }
        Ok(out)
    }

    fn sign(&self, kind: MsgKind, view: u64, value: Digest, j: Justification) -> ConsensusMessage {
        ConsensusMessage::signed(self.config.group_id, kind, view, self.seq, value, j, &self.signer)
    }

    fn set_timer(&mut self, now: SimTime, out: &mut StepOutput) {
        let d = now.saturating_add(self.config.timeout_for(self.view));
        self.timer_deadline = Some(d);
        out.timer = Some(d);
    }

    fn reject(&mut self, kind: EvidenceKind, m: ConsensusMessage, err: ConsensusError) -> Result<(), ConsensusError> {
        self.evidence.push(Evidence {
            kind,
            sender: m.sender,
            messages: alloc::vec![m],
        });
        Err(err)
    }

    fn on_message(
        &mut self,
        now: SimTime,
        m: ConsensusMessage,
        ctx: &StepCtx<'_>,
        out: &mut StepOutput,
    ) -> Result<(), ConsensusError> {
        if m.group != self.config.group_id || m.seq != self.seq {
            return Err(ConsensusError::WrongInstance);
        }
        if !self.config.contains(m.sender) {
            return Err(ConsensusError::NotMember(m.sender));
        }
        if !m.authentic(ctx.registry) {
            let s = m.sender;
            return self.reject(EvidenceKind::AuthFailure, m, ConsensusError::AuthFailure(s));
        }
        if self.decided.is_some() {
            // Help stragglers: answer anything that shows the sender is still
            // working on this instance with our commit certificate.
            if matches!(
                m.kind,
                MsgKind::ViewChange | MsgKind::NewView | MsgKind::PrePrepare | MsgKind::Prepare
            ) && m.sender != self.me
                && self.replied.insert((m.sender, m.view))
            {
                for c in &self.commit_cert {
                    out.outbox.push(Outgoing {
                        to: Destination::Node(m.sender),
                        msg: c.clone(),
                    });
                }
            }
            return Ok(());
        }
        match m.kind {
            MsgKind::PrePrepare => {
                if m.view != 0 {
                    let s = m.sender;
                    return self.reject(
                        EvidenceKind::InvalidJustification,
                        m,
                        ConsensusError::InvalidJustification(s),
                    );
                }
                if m.sender != self.config.leader(0) {
                    return Err(ConsensusError::NotLeader(m.sender, 0));
                }
                if !self.record_leader_msg(&m)? {
                    return Ok(());
                }
                self.on_proposal(0, m.value_digest, ctx, out);
            }
            MsgKind::NewView => {
                if m.view == 0 {
                    let s = m.sender;
                    return self.reject(
                        EvidenceKind::InvalidJustification,
                        m,
                        ConsensusError::InvalidJustification(s),
                    );
                }
                if m.sender != self.config.leader(m.view) {
                    return Err(ConsensusError::NotLeader(m.sender, m.view));
                }
                if !self.valid_new_view(&m, ctx.registry) {
                    let s = m.sender;
                    return self.reject(
                        EvidenceKind::InvalidJustification,
                        m,
                        ConsensusError::InvalidJustification(s),
                    );
                }
                if !self.record_leader_msg(&m)? {
                    return Ok(());
                }
                if m.view >= self.view {
                    self.enter_view(now, m.view, out);
                    self.on_proposal(m.view, m.value_digest, ctx, out);
                }
            }
            MsgKind::Prepare => {
                self.prepares
                    .entry((m.view, m.value_digest))
                    .or_default()
                    .entry(m.sender)
                    .or_insert(m);
                self.progress(ctx, out);
            }
            MsgKind::Commit => {
                self.commits
                    .entry((m.view, m.value_digest))
                    .or_default()
                    .entry(m.sender)
                    .or_insert(m);
                self.progress(ctx, out);
            }
            MsgKind::ViewChange => {
                if m.view == 0 || !self.valid_view_change(&m, m.view, ctx.registry) {
                    let s = m.sender;
                    return self.reject(
                        EvidenceKind::InvalidJustification,
                        m,
                        ConsensusError::InvalidJustification(s),
                    );
                }
                self.view_changes
                    .entry(m.view)
                    .or_default()
                    .entry(m.sender)
                    .or_insert(m);
                self.try_join(now, ctx, out);
                self.try_new_view(now, ctx, out);
            }
        }
        Ok(())
    }

    /// Returns Ok(true) for a first leader message in a view, Ok(false) for
    /// an exact duplicate, and records equivocation otherwise.
    fn record_leader_msg(&mut self, m: &ConsensusMessage) -> Result<bool, ConsensusError> {
        match self.leader_msgs.get(&m.view) {
            None => {
                self.leader_msgs.insert(m.view, m.clone());
                Ok(true)
            }
            Some(prev) if prev.value_digest == m.value_digest => Ok(false),
            Some(prev) => {
                self.evidence.push(Evidence {
                    kind: EvidenceKind::Equivocation,
                    sender: m.sender,
                    messages: alloc::vec![prev.clone(), m.clone()],
                });
                Err(ConsensusError::Equivocation {
                    sender: m.sender,
                    view: m.view,
                })
            }
        }
    }

    fn valid_cert(&self, c: &PreparedCert, registry: &ShareRegistry) -> bool {
        let mut senders = BTreeSet::new();
        for p in &c.prepares {
            if p.kind != MsgKind::Prepare
                || p.group != self.config.group_id
                || p.seq != self.seq
                || p.view != c.view
                || p.value_digest != c.value
                || !self.config.contains(p.sender)
                || !p.authentic(registry)
            {
                return false;
            }
            senders.insert(p.sender);
        }
        senders.len() >= self.config.quorum()
    }

    fn valid_view_change(&self, m: &ConsensusMessage, view: u64, registry: &ShareRegistry) -> bool {
        if m.kind != MsgKind::ViewChange || m.view != view {
            return false;
        }
        match &m.justification {
            Justification::None => m.value_digest == Digest::ZERO,
            Justification::Prepared(c) => c.view < view && c.value == m.value_digest && self.valid_cert(c, registry),
            Justification::ViewChanges(_) => false,
        }
    }

    fn valid_new_view(&self, m: &ConsensusMessage, registry: &ShareRegistry) -> bool {
        let Justification::ViewChanges(vcs) = &m.justification else {
            return false;
        };
        let mut senders = BTreeSet::new();
        let mut best: Option<(u64, Digest)> = None;
        for vc in vcs {
            if vc.group != self.config.group_id
                || vc.seq != self.seq
                || !self.config.contains(vc.sender)
                || !vc.authentic(registry)
                || !self.valid_view_change(vc, m.view, registry)
            {
                return false;
            }
            senders.insert(vc.sender);
            if let Justification::Prepared(c) = &vc.justification {
                if best.is_none_or(|(v, _)| c.view > v) {
                    best = Some((c.view, c.value));
                }
            }
        }
        if senders.len() < self.config.quorum() {
            return false;
        }
        best.is_none_or(|(_, value)| value == m.value_digest)
    }

    fn enter_view(&mut self, now: SimTime, view: u64, out: &mut StepOutput) {
        self.view = view;
        self.in_view_change = false;
        self.phase = Phase::Idle;
        self.set_timer(now, out);
    }

    fn on_proposal(&mut self, view: u64, value: Digest, ctx: &StepCtx<'_>, out: &mut StepOutput) {
        if view != self.view || self.in_view_change || self.accepted.contains_key(&view) {
            return;
        }
        if !(ctx.validity)(&value) {
            return;
        }
        self.accepted.insert(view, value);
        self.phase = Phase::PrePrepared;
        let msg = self.sign(MsgKind::Prepare, view, value, Justification::None);
        self.prepares
            .entry((view, value))
            .or_default()
            .insert(self.me, msg.clone());
        out.outbox.push(Outgoing {
            to: Destination::All,
            msg,
        });
        self.progress(ctx, out);
    }

    fn progress(&mut self, _ctx: &StepCtx<'_>, out: &mut StepOutput) {
        if self.decided.is_some() {
            return;
        }
        let q = self.config.quorum();
        let view = self.view;
        if !self.in_view_change && !self.commit_sent.contains(&view) {
            let locked = self.accepted.get(&view).copied();
            let ready = self
                .prepares
                .range((view, Digest::ZERO)..=(view, Digest([0xff; 32])))
                .find(|((_, v), senders)| senders.len() >= q && locked.is_none_or(|l| l == *v))
                .map(|((_, v), senders)| (*v, senders.values().cloned().collect::<Vec<_>>()));
            if let Some((value, prepares)) = ready {
                self.accepted.insert(view, value);
                self.prepared = Some(PreparedCert { view, value, prepares });
                self.phase = Phase::Prepared;
                self.commit_sent.insert(view);
                let msg = self.sign(MsgKind::Commit, view, value, Justification::None);
                self.commits
                    .entry((view, value))
                    .or_default()
                    .insert(self.me, msg.clone());
                out.outbox.push(Outgoing {
                    to: Destination::All,
                    msg,
                });
            }
        }
        let done = self
            .commits
            .iter()
            .find(|(_, senders)| senders.len() >= q)
            .map(|((v, d), senders)| (*v, *d, senders.values().cloned().collect::<Vec<_>>()));
        if let Some((v, d, cert)) = done {
            self.decided = Some((v, d));
            self.commit_cert = cert;
            self.phase = Phase::Decided;
            self.timer_deadline = None;
            out.decision = Some(d);
        }
    }

    fn start_view_change(&mut self, now: SimTime, target: u64, ctx: &StepCtx<'_>, out: &mut StepOutput) {
        if target <= self.view && self.in_view_change {
            return;
        }
        self.view = target;
        self.in_view_change = true;
        self.phase = Phase::Idle;
        self.set_timer(now, out);
        let (value, j) = match &self.prepared {
            Some(c) => (c.value, Justification::Prepared(c.clone())),
            None => (Digest::ZERO, Justification::None),
        };
        let msg = self.sign(MsgKind::ViewChange, target, value, j);
        self.view_changes
            .entry(target)
            .or_default()
            .insert(self.me, msg.clone());
        out.outbox.push(Outgoing {
            to: Destination::All,
            msg,
        });
        self.try_new_view(now, ctx, out);
    }

    /// Join a view change once `f + 1` members are already ahead.
    fn try_join(&mut self, now: SimTime, ctx: &StepCtx<'_>, out: &mut StepOutput) {
        let mut ahead: BTreeMap<NodeId, u64> = BTreeMap::new();
        for (&v, senders) in self.view_changes.range(self.view + 1..) {
            for &s in senders.keys() {
                if s != self.me {
                    ahead.insert(s, v);
                }
            }
        }
        if ahead.len() > self.config.f {
            let mut views: Vec<u64> = ahead.values().copied().collect();
            views.sort_unstable_by(|a, b| b.cmp(a));
            // The (f+1)-th highest view is vouched for by at least one
            // correct member.
            let target = views[self.config.f];
            if target > self.view {
                self.start_view_change(now, target, ctx, out);
            }
        }
    }

    fn try_new_view(&mut self, now: SimTime, ctx: &StepCtx<'_>, out: &mut StepOutput) {
        let w = self.view;
        if w == 0 || self.decided.is_some() || self.config.leader(w) != self.me || self.new_view_sent.contains(&w) {
            return;
        }
        let Some(vcs) = self.view_changes.get(&w) else {
            return;
        };
        if vcs.len() < self.config.quorum() {
            return;
        }
        let best = vcs
            .values()
            .filter_map(|m| match &m.justification {
                Justification::Prepared(c) => Some((c.view, c.value)),
                _ => None,
            })
            .max_by_key(|(v, _)| *v);
        let value = match (best, self.candidate) {
            (Some((_, v)), _) => v,
            (None, Some(c)) => c,
            (None, None) => return,
        };
        let just = Justification::ViewChanges(vcs.values().cloned().collect());
        let msg = self.sign(MsgKind::NewView, w, value, just);
        self.new_view_sent.insert(w);
        self.leader_msgs.insert(w, msg.clone());
        out.outbox.push(Outgoing {
            to: Destination::All,
            msg,
        });
        self.enter_view(now, w, out);
        self.on_proposal(w, value, ctx, out);
    }
}

/// True iff, for every sequence number, all decided values are equal.
pub fn check_agreement<'a>(instances: impl IntoIterator<Item = &'a ConsensusInstance>) -> bool {
    check_decision_log(instances.into_iter().filter_map(|i| i.decided().map(|d| (i.seq(), d))))
}

/// Agreement over raw `(seq, decided value)` records.
pub fn check_decision_log(log: impl IntoIterator<Item = (u64, Digest)>) -> bool {
    let mut first: BTreeMap<u64, Digest> = BTreeMap::new();
    for (seq, d) in log {
        if *first.entry(seq).or_insert(d) != d {
            return false;
        }
    }
    true
}
