//! Ledger primitives: digests, canonical encoding, transactions and
//! per-shard account state.
//!
//! # Canonical encoding
//!
//! Every digest in the simulator is computed over a canonical byte layout:
//!
//! * integers are fixed-width big-endian (`u8`, `u32`, `u64`);
//! * digests are their 32 raw bytes;
//! * byte strings are a `u32` length followed by the bytes;
//! * lists are a `u32` element count followed by the elements in order;
//! * records are their fields in declaration order, prefixed by a one-byte
//!   object kind (see [`ObjectKind`]).
//!
//! The digest of an encoded object is `SHA-256(tag || bytes)` where `tag` is
//! the one-byte [`DomainTag`].

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;
use core::fmt;

use sha2::{Digest as _, Sha256};
use thiserror::Error;

/// Simulated time in integer microseconds.
pub type SimTime = u64;

/// One millisecond of simulated time.
pub const MILLIS: SimTime = 1_000;
/// One second of simulated time.
pub const SECONDS: SimTime = 1_000_000;

/// Token amount. Balances are never negative.
pub type Amount = u64;

/// A 32-byte hash value.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0; 32]);

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    /// First eight bytes as an integer; handy for seeding and short ids.
    pub fn prefix_u64(&self) -> u64 {
        let mut b = [0u8; 8];
        b.copy_from_slice(&self.0[..8]);
        u64::from_be_bytes(b)
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.0[..6] {
            write!(f, "{b:02x}")?;
        }
        f.write_str("..")
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

/// Domain separation tag prepended to every hashed payload.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum DomainTag {
    Leaf = 0,
    Node = 1,
    Tx = 2,
    Msg = 3,
    Share = 4,
}

/// Deterministic domain-separated SHA-256.
pub fn hash(tag: DomainTag, payload: &[u8]) -> Digest {
    let mut h = Sha256::new();
    h.update([tag as u8]);
    h.update(payload);
    Digest(h.finalize().into())
}

/// Hash of the concatenation of `parts`, without materialising it.
pub fn hash_parts(tag: DomainTag, parts: &[&[u8]]) -> Digest {
    let mut h = Sha256::new();
    h.update([tag as u8]);
    for p in parts {
        h.update(p);
    }
    Digest(h.finalize().into())
}

/// One-byte prefix identifying the record type inside a canonical encoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum ObjectKind {
    Transaction = 0x01,
    AccountKey = 0x02,
    AccountRecord = 0x03,
    ConsensusMessage = 0x04,
    Block = 0x05,
    Batch = 0x06,
    Gossip = 0x07,
    TraceRecord = 0x08,
    Vote = 0x09,
    ShareSeed = 0x0a,
}

/// Builder for the canonical byte layout.
#[derive(Clone, Debug, Default)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new(kind: ObjectKind) -> Self {
        let mut buf = Vec::with_capacity(64);
        buf.push(kind as u8);
        Encoder { buf }
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn bool(&mut self, v: bool) -> &mut Self {
        self.u8(v as u8)
    }

    pub fn digest(&mut self, d: &Digest) -> &mut Self {
        self.buf.extend_from_slice(&d.0);
        self
    }

    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.u32(b.len() as u32);
        self.buf.extend_from_slice(b);
        self
    }

    pub fn len_prefix(&mut self, n: usize) -> &mut Self {
        self.u32(n as u32)
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.buf
    }

    pub fn hash(&self, tag: DomainTag) -> Digest {
        hash(tag, &self.buf)
    }
}

/// Opaque account identifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AccountId(pub u64);

/// Shard identifier. New ids are allocated on split/merge and never reused.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ShardId(pub u32);

impl fmt::Display for ShardId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}", self.0)
    }
}

impl AccountId {
    /// Merkle key of this account.
    pub fn key_digest(&self) -> Digest {
        let mut e = Encoder::new(ObjectKind::AccountKey);
        e.u64(self.0);
        e.hash(DomainTag::Msg)
    }
}

/// Digest of the canonical account record `(id, balance, nonce)`; the
/// Merkle leaf value for that account.
pub fn account_record_digest(id: AccountId, balance: Amount, nonce: u64) -> Digest {
    let mut e = Encoder::new(ObjectKind::AccountRecord);
    e.u64(id.0).u64(balance).u64(nonce);
    e.hash(DomainTag::Msg)
}

/// Debit leg. `nonce` is the sender account's counter for this spend.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct InputLeg {
    pub shard: ShardId,
    pub account: AccountId,
    pub amount: Amount,
    pub nonce: u64,
}

/// Credit leg.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct OutputLeg {
    pub shard: ShardId,
    pub account: AccountId,
    pub amount: Amount,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LedgerError {
    #[error("transaction has no inputs or no outputs")]
    EmptyLegs,
    #[error("input total {inputs} does not match output total {outputs}")]
    Unbalanced { inputs: u128, outputs: u128 },
    #[error("account {0:?} is not mapped to any shard")]
    UnknownAccount(AccountId),
    #[error("account {account:?} holds {balance}, needs {needed}")]
    InsufficientBalance {
        account: AccountId,
        balance: Amount,
        needed: Amount,
    },
    #[error("nonce {nonce} already used by {account:?} (last applied {applied})")]
    NonceReplay {
        account: AccountId,
        nonce: u64,
        applied: u64,
    },
    #[error("nonce {nonce} skips ahead of {account:?} (last applied {applied})")]
    NonceGap {
        account: AccountId,
        nonce: u64,
        applied: u64,
    },
    #[error("balance overflow on {0:?}")]
    Overflow(AccountId),
}

/// A value transfer. `tx_id` commits to every other field.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Transaction {
    tx_id: Digest,
    pub inputs: Vec<InputLeg>,
    pub outputs: Vec<OutputLeg>,
    pub created_at: SimTime,
}

impl Transaction {
    pub fn new(inputs: Vec<InputLeg>, outputs: Vec<OutputLeg>, created_at: SimTime) -> Result<Self, LedgerError> {
        if inputs.is_empty() || outputs.is_empty() {
            return Err(LedgerError::EmptyLegs);
        }
        let total_in: u128 = inputs.iter().map(|l| l.amount as u128).sum();
        let total_out: u128 = outputs.iter().map(|l| l.amount as u128).sum();
        if total_in != total_out {
            return Err(LedgerError::Unbalanced {
                inputs: total_in,
                outputs: total_out,
            });
        }
        let tx_id = Self::compute_id(&inputs, &outputs, created_at);
        Ok(Transaction {
            tx_id,
            inputs,
            outputs,
            created_at,
        })
    }

    pub fn id(&self) -> Digest {
        self.tx_id
    }

    /// Canonical encoding of all fields except the id.
    pub fn encode(&self) -> Vec<u8> {
        Self::encoder(&self.inputs, &self.outputs, self.created_at).finish()
    }

    fn encoder(inputs: &[InputLeg], outputs: &[OutputLeg], created_at: SimTime) -> Encoder {
        let mut e = Encoder::new(ObjectKind::Transaction);
        e.u64(created_at);
        e.len_prefix(inputs.len());
        for l in inputs {
            e.u32(l.shard.0).u64(l.account.0).u64(l.amount).u64(l.nonce);
        }
        e.len_prefix(outputs.len());
        for l in outputs {
            e.u32(l.shard.0).u64(l.account.0).u64(l.amount);
        }
        e
    }

    fn compute_id(inputs: &[InputLeg], outputs: &[OutputLeg], created_at: SimTime) -> Digest {
        Self::encoder(inputs, outputs, created_at).hash(DomainTag::Tx)
    }

    /// True when `tx_id` still matches the fields (they are public and may
    /// have been tampered with).
    pub fn id_matches(&self) -> bool {
        Self::compute_id(&self.inputs, &self.outputs, self.created_at) == self.tx_id
    }

    pub fn total(&self) -> Amount {
        self.inputs.iter().map(|l| l.amount).sum()
    }

    /// Every account touched by the transaction.
    pub fn accounts(&self) -> impl Iterator<Item = AccountId> + '_ {
        self.inputs
            .iter()
            .map(|l| l.account)
            .chain(self.outputs.iter().map(|l| l.account))
    }

    /// Ledger entries this transaction applies in `shard`, debits first.
    pub fn entries_for(&self, shard: ShardId) -> Vec<Entry> {
        let debits = self.inputs.iter().filter(|l| l.shard == shard).map(|l| Entry::Debit {
            account: l.account,
            amount: l.amount,
            nonce: l.nonce,
        });
        let credits = self.outputs.iter().filter(|l| l.shard == shard).map(|l| Entry::Credit {
            account: l.account,
            amount: l.amount,
        });
        debits.chain(credits).collect()
    }

    pub fn input_shards(&self) -> BTreeSet<ShardId> {
        self.inputs.iter().map(|l| l.shard).collect()
    }

    pub fn output_shards(&self) -> BTreeSet<ShardId> {
        self.outputs.iter().map(|l| l.shard).collect()
    }
}

/// Lookup from account to its home shard.
pub trait ShardMap {
    fn home(&self, account: AccountId) -> Option<ShardId>;
}

impl ShardMap for BTreeMap<AccountId, ShardId> {
    fn home(&self, account: AccountId) -> Option<ShardId> {
        self.get(&account).copied()
    }
}

/// Account-to-shard directory with a per-shard index, kept in sync as
/// accounts move between shards.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Directory {
    home: BTreeMap<AccountId, ShardId>,
    by_shard: BTreeMap<ShardId, BTreeSet<AccountId>>,
}

impl Directory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn assign(&mut self, a: AccountId, s: ShardId) {
        if let Some(old) = self.home.insert(a, s) {
            if let Some(set) = self.by_shard.get_mut(&old) {
                set.remove(&a);
                if set.is_empty() {
                    self.by_shard.remove(&old);
                }
            }
        }
        self.by_shard.entry(s).or_default().insert(a);
    }

    pub fn len(&self) -> usize {
        self.home.len()
    }

    pub fn is_empty(&self) -> bool {
        self.home.is_empty()
    }

    pub fn shards(&self) -> impl Iterator<Item = ShardId> + '_ {
        self.by_shard.keys().copied()
    }

    pub fn shard_count(&self) -> usize {
        self.by_shard.len()
    }

    pub fn accounts_in(&self, s: ShardId) -> impl Iterator<Item = AccountId> + '_ {
        self.by_shard.get(&s).into_iter().flatten().copied()
    }

    pub fn count_in(&self, s: ShardId) -> usize {
        self.by_shard.get(&s).map_or(0, |x| x.len())
    }

    /// The `i`-th account (in id order) homed in `s`.
    pub fn nth_in(&self, s: ShardId, i: usize) -> Option<AccountId> {
        self.by_shard.get(&s).and_then(|x| x.iter().nth(i)).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (AccountId, ShardId)> + '_ {
        self.home.iter().map(|(a, s)| (*a, *s))
    }
}

impl ShardMap for Directory {
    fn home(&self, account: AccountId) -> Option<ShardId> {
        self.home.get(&account).copied()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TxClass {
    Intra(ShardId),
    Cross {
        inputs: BTreeSet<ShardId>,
        outputs: BTreeSet<ShardId>,
    },
}

impl TxClass {
    pub fn is_cross(&self) -> bool {
        matches!(self, TxClass::Cross { .. })
    }
}

/// Classify a transaction by the home shards of the accounts it touches.
pub fn classify(tx: &Transaction, map: &impl ShardMap) -> Result<TxClass, LedgerError> {
    let home = |a: AccountId| map.home(a).ok_or(LedgerError::UnknownAccount(a));
    let mut inputs = BTreeSet::new();
    for l in &tx.inputs {
        inputs.insert(home(l.account)?);
    }
    let mut outputs = BTreeSet::new();
    for l in &tx.outputs {
        outputs.insert(home(l.account)?);
    }
    if inputs.len() == 1 && inputs == outputs {
        let s = *inputs.iter().next().expect("non-empty");
        return Ok(TxClass::Intra(s));
    }
    Ok(TxClass::Cross { inputs, outputs })
}

/// A single signed balance change against one account.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Entry {
    Debit {
        account: AccountId,
        amount: Amount,
        nonce: u64,
    },
    Credit {
        account: AccountId,
        amount: Amount,
    },
}

impl Entry {
    pub fn account(&self) -> AccountId {
        match *self {
            Entry::Debit { account, .. } | Entry::Credit { account, .. } => account,
        }
    }
}

/// Account balances and replay counters held by one shard.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ShardState {
    balances: BTreeMap<AccountId, Amount>,
    applied_nonces: BTreeMap<AccountId, u64>,
    version: u64,
}

impl ShardState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_balances(balances: impl IntoIterator<Item = (AccountId, Amount)>) -> Self {
        ShardState {
            balances: balances.into_iter().collect(),
            applied_nonces: BTreeMap::new(),
            version: 0,
        }
    }

    pub fn balance(&self, a: AccountId) -> Amount {
        self.balances.get(&a).copied().unwrap_or(0)
    }

    pub fn nonce(&self, a: AccountId) -> u64 {
        self.applied_nonces.get(&a).copied().unwrap_or(0)
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn contains(&self, a: AccountId) -> bool {
        self.balances.contains_key(&a)
    }

    pub fn accounts(&self) -> impl Iterator<Item = AccountId> + '_ {
        self.balances.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.balances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.balances.is_empty()
    }

    pub fn total(&self) -> u128 {
        self.balances.values().map(|&b| b as u128).sum()
    }

    /// Leaf value for `a` in the shard's state tree.
    pub fn record_digest(&self, a: AccountId) -> Digest {
        account_record_digest(a, self.balance(a), self.nonce(a))
    }

    /// Check `entry` without mutating.
    pub fn check(&self, entry: &Entry, nonce_check: bool) -> Result<(), LedgerError> {
        match *entry {
            Entry::Debit { account, amount, nonce } => {
                if nonce_check {
                    let applied = self.nonce(account);
                    if nonce <= applied {
                        return Err(LedgerError::NonceReplay {
                            account,
                            nonce,
                            applied,
                        });
                    }
                    if nonce != applied + 1 {
                        return Err(LedgerError::NonceGap {
                            account,
                            nonce,
                            applied,
                        });
                    }
                }
                let balance = self.balance(account);
                if balance < amount {
                    return Err(LedgerError::InsufficientBalance {
                        account,
                        balance,
                        needed: amount,
                    });
                }
                Ok(())
            }
            Entry::Credit { account, amount } => self
                .balance(account)
                .checked_add(amount)
                .map(|_| ())
                .ok_or(LedgerError::Overflow(account)),
        }
    }

    /// Pure application: returns the successor state, leaving `self` intact.
    pub fn apply(&self, entry: &Entry, nonce_check: bool) -> Result<ShardState, LedgerError> {
        let mut next = self.clone();
        next.apply_in_place(entry, nonce_check)?;
        Ok(next)
    }

    /// Same contract as [`ShardState::apply`] but mutates; on error nothing
    /// changes.
    pub fn apply_in_place(&mut self, entry: &Entry, nonce_check: bool) -> Result<(), LedgerError> {
        self.check(entry, nonce_check)?;
        match *entry {
            Entry::Debit { account, amount, nonce } => {
                *self.balances.entry(account).or_insert(0) -= amount;
                if nonce_check {
                    self.applied_nonces.insert(account, nonce);
                }
            }
            Entry::Credit { account, amount } => {
                *self.balances.entry(account).or_insert(0) += amount;
            }
        }
        self.version += 1;
        Ok(())
    }

    /// Apply every entry or none.
    pub fn apply_all(&mut self, entries: &[Entry], nonce_check: bool) -> Result<(), LedgerError> {
        let mut scratch = self.clone();
        for e in entries {
            scratch.apply_in_place(e, nonce_check)?;
        }
        *self = scratch;
        Ok(())
    }

    /// Move an account (balance and nonce) out of this state.
    pub fn take_account(&mut self, a: AccountId) -> Option<(Amount, u64)> {
        let bal = self.balances.remove(&a)?;
        let nonce = self.applied_nonces.remove(&a).unwrap_or(0);
        self.version += 1;
        Some((bal, nonce))
    }

    pub fn insert_account(&mut self, a: AccountId, balance: Amount, nonce: u64) {
        self.balances.insert(a, balance);
        if nonce > 0 {
            self.applied_nonces.insert(a, nonce);
        }
        self.version += 1;
    }

    /// Rewind `a`'s nonce, used only when rolling back a debit.
    pub(crate) fn set_nonce(&mut self, a: AccountId, nonce: u64) {
        if nonce == 0 {
            self.applied_nonces.remove(&a);
        } else {
            self.applied_nonces.insert(a, nonce);
        }
        self.version += 1;
    }

    /// Apply `entries` in order, all or nothing, without cloning the whole
    /// state. Returns each entry's account nonce before it was applied.
    pub fn apply_logged(&mut self, entries: &[Entry], nonce_check: bool) -> Result<Vec<u64>, LedgerError> {
        let mut priors: Vec<u64> = Vec::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            let prior = self.nonce(e.account());
            if let Err(err) = self.apply_in_place(e, nonce_check) {
                for (done, &p) in entries[..i].iter().zip(&priors).rev() {
                    self.undo(done, p);
                }
                return Err(err);
            }
            priors.push(prior);
        }
        Ok(priors)
    }

    /// Invert one applied entry, restoring the account's prior nonce.
    pub(crate) fn undo(&mut self, entry: &Entry, prior_nonce: u64) {
        match *entry {
            Entry::Debit { account, amount, .. } => {
                *self.balances.entry(account).or_insert(0) += amount;
                self.set_nonce(account, prior_nonce);
            }
            Entry::Credit { account, amount } => {
                *self.balances.entry(account).or_insert(0) -= amount;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn a(n: u64) -> AccountId {
        AccountId(n)
    }
    fn s(n: u32) -> ShardId {
        ShardId(n)
    }

    fn transfer(from: (u32, u64), to: (u32, u64), amount: Amount, nonce: u64) -> Transaction {
        Transaction::new(
            vec![InputLeg {
                shard: s(from.0),
                account: a(from.1),
                amount,
                nonce,
            }],
            vec![OutputLeg {
                shard: s(to.0),
                account: a(to.1),
                amount,
            }],
            0,
        )
        .unwrap()
    }

    #[test]
    fn hash_is_deterministic_and_domain_separated() {
        let t = transfer((0, 1), (0, 2), 5, 1);
        assert_eq!(hash(DomainTag::Tx, &t.encode()), hash(DomainTag::Tx, &t.encode()));
        let b = b"same bytes";
        assert_ne!(hash(DomainTag::Leaf, b), hash(DomainTag::Node, b));
        let tags = [
            DomainTag::Leaf,
            DomainTag::Node,
            DomainTag::Tx,
            DomainTag::Msg,
            DomainTag::Share,
        ];
        for (i, x) in tags.iter().enumerate() {
            for y in &tags[i + 1..] {
                assert_ne!(hash(*x, b), hash(*y, b));
            }
        }
    }

    #[test]
    fn fixture_transactions_have_distinct_ids() {
        let t1 = transfer((1, 10), (2, 20), 40, 1);
        let t2 = transfer((1, 10), (2, 20), 40, 2);
        assert_ne!(hash(DomainTag::Tx, &t1.encode()), hash(DomainTag::Tx, &t2.encode()));
        assert_eq!(t1.id(), hash(DomainTag::Tx, &t1.encode()));
        assert!(t1.id_matches());
    }

    #[test]
    fn tx_id_tracks_fields() {
        let mut t = transfer((1, 10), (2, 20), 40, 1);
        t.outputs[0].account = a(99);
        assert!(!t.id_matches());
    }

    #[test]
    fn rejects_unbalanced_and_empty() {
        let e = Transaction::new(vec![], vec![], 0).unwrap_err();
        assert_eq!(e, LedgerError::EmptyLegs);
        let e = Transaction::new(
            vec![InputLeg {
                shard: s(0),
                account: a(1),
                amount: 5,
                nonce: 1,
            }],
            vec![OutputLeg {
                shard: s(0),
                account: a(2),
                amount: 4,
            }],
            0,
        )
        .unwrap_err();
        assert!(matches!(e, LedgerError::Unbalanced { .. }));
    }

    #[test]
    fn classify_cases() {
        let mut map = BTreeMap::new();
        for (acct, shard) in [(1, 3), (2, 3), (10, 1), (11, 2), (12, 3)] {
            map.insert(a(acct), s(shard));
        }
        let intra = transfer((3, 1), (3, 2), 5, 1);
        assert_eq!(classify(&intra, &map).unwrap(), TxClass::Intra(s(3)));

        let cross = Transaction::new(
            vec![
                InputLeg {
                    shard: s(1),
                    account: a(10),
                    amount: 5,
                    nonce: 1,
                },
                InputLeg {
                    shard: s(2),
                    account: a(11),
                    amount: 5,
                    nonce: 1,
                },
            ],
            vec![OutputLeg {
                shard: s(3),
                account: a(12),
                amount: 10,
            }],
            0,
        )
        .unwrap();
        assert_eq!(
            classify(&cross, &map).unwrap(),
            TxClass::Cross {
                inputs: [s(1), s(2)].into_iter().collect(),
                outputs: [s(3)].into_iter().collect(),
            }
        );

        let stray = transfer((3, 1), (3, 77), 5, 1);
        assert_eq!(classify(&stray, &map).unwrap_err(), LedgerError::UnknownAccount(a(77)));
    }

    #[test]
    fn apply_debit_and_guard() {
        let st = ShardState::with_balances([(a(1), 100)]);
        let next = st
            .apply(
                &Entry::Debit {
                    account: a(1),
                    amount: 40,
                    nonce: 1,
                },
                true,
            )
            .unwrap();
        assert_eq!(next.balance(a(1)), 60);
        assert_eq!(next.version(), st.version() + 1);
        assert_eq!(st.balance(a(1)), 100, "input state untouched");

        let poor = ShardState::with_balances([(a(1), 30)]);
        let err = poor
            .apply(
                &Entry::Debit {
                    account: a(1),
                    amount: 40,
                    nonce: 1,
                },
                true,
            )
            .unwrap_err();
        assert!(matches!(err, LedgerError::InsufficientBalance { .. }));
    }

    #[test]
    fn replayed_debit_is_refused() {
        let leg = Entry::Debit {
            account: a(1),
            amount: 10,
            nonce: 1,
        };
        let st = ShardState::with_balances([(a(1), 100)]);
        let once = st.apply(&leg, true).unwrap();
        let err = once.apply(&leg, true).unwrap_err();
        assert!(matches!(err, LedgerError::NonceReplay { .. }));
    }

    #[test]
    fn apply_all_is_atomic() {
        let mut st = ShardState::with_balances([(a(1), 10), (a(2), 0)]);
        let before = st.clone();
        let err = st.apply_all(
            &[
                Entry::Credit {
                    account: a(2),
                    amount: 5,
                },
                Entry::Debit {
                    account: a(1),
                    amount: 50,
                    nonce: 1,
                },
            ],
            true,
        );
        assert!(err.is_err());
        assert_eq!(st, before);
    }

    #[test]
    fn apply_logged_is_all_or_nothing() {
        let a = AccountId(1);
        let b = AccountId(2);
        let mut st = ShardState::with_balances([(a, 10), (b, 0)]);
        let before = st.clone();
        let entries = [
            Entry::Debit {
                account: a,
                amount: 6,
                nonce: 1,
            },
            Entry::Credit { account: b, amount: 6 },
            Entry::Debit {
                account: a,
                amount: 6,
                nonce: 2,
            },
        ];
        assert!(matches!(
            st.apply_logged(&entries, true),
            Err(LedgerError::InsufficientBalance { .. })
        ));
        assert_eq!(st.balance(a), before.balance(a));
        assert_eq!(st.balance(b), before.balance(b));
        assert_eq!(st.nonce(a), 0);
        assert_eq!(st.apply_logged(&entries[..2], true).unwrap(), vec![0, 0]);
        assert_eq!((st.balance(a), st.balance(b), st.nonce(a)), (4, 6, 1));
    }
}
