//! Seeded transaction generator: Poisson arrivals, Zipf-skewed senders and
//! a target cross-shard ratio.

use alloc::collections::BTreeMap;
use alloc::vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Zipf};

use crate::ledger::{
    AccountId, Amount, Directory, InputLeg, OutputLeg, ShardId, ShardMap, SimTime, Transaction, SECONDS,
};

#[derive(Clone, Debug, PartialEq)]
pub struct WorkloadSpec {
    /// Mean arrivals per sim-second.
    pub rate: f64,
    /// Probability that a generated transaction spans shards.
    pub cross_ratio: f64,
    pub account_count: u64,
    /// Zipf exponent for account popularity; 0 means uniform.
    pub zipf_exponent: f64,
    /// Stop generating after this sim-time (0 = no limit).
    pub duration: SimTime,
    /// Stop after this many transactions (0 = no limit).
    pub max_txs: u64,
    /// Fraction of cross-shard transactions with two input accounts.
    pub multi_input_ratio: f64,
    /// Amounts are uniform in `1..=max_amount`.
    pub max_amount: Amount,
    pub initial_balance: Amount,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            rate: 100.0,
            cross_ratio: 0.4,
            account_count: 1_000,
            zipf_exponent: 1.0,
            duration: 10 * SECONDS,
            max_txs: 0,
            multi_input_ratio: 0.0,
            max_amount: 100,
            initial_balance: 1_000_000,
            seed: 1,
        }
    }
}

/// Generator state. Tracks the next nonce per sender and a conservative
/// spendable balance (initial funds minus everything already spent, never
/// counting incoming credits) so every generated debit is fundable.
#[derive(Clone, Debug)]
pub struct WorkloadGen {
    spec: WorkloadSpec,
    rng: ChaCha8Rng,
    zipf: Option<Zipf<f64>>,
    arrivals: Option<Exp<f64>>,
    next_at: SimTime,
    generated: u64,
    next_nonce: BTreeMap<AccountId, u64>,
    spent: BTreeMap<AccountId, Amount>,
}

impl WorkloadGen {
    pub fn new(spec: WorkloadSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5745_4f52_4b4c_4f41);
        let zipf = (spec.zipf_exponent > 0.0 && spec.account_count > 1)
            .then(|| Zipf::new(spec.account_count as f64, spec.zipf_exponent).ok())
            .flatten();
        let arrivals = (spec.rate > 0.0).then(|| Exp::new(spec.rate).ok()).flatten();
        let first = arrivals.map(|d| secs_to_us(d.sample(&mut rng)));
        WorkloadGen {
            next_at: first.unwrap_or(SimTime::MAX),
            spec,
            rng,
            zipf,
            arrivals,
            generated: 0,
            next_nonce: BTreeMap::new(),
            spent: BTreeMap::new(),
        }
    }

    pub fn spec(&self) -> &WorkloadSpec {
        &self.spec
    }

    pub fn generated(&self) -> u64 {
        self.generated
    }

    pub fn exhausted(&self) -> bool {
        self.peek_time().is_none()
    }

    /// Arrival time of the next transaction, if any remain.
    pub fn peek_time(&self) -> Option<SimTime> {
        if self.arrivals.is_none() || (self.spec.max_txs > 0 && self.generated >= self.spec.max_txs) {
            return None;
        }
        if self.spec.duration > 0 && self.next_at > self.spec.duration {
            return None;
        }
        Some(self.next_at)
    }

    /// Nonce the next debit of `a` must carry, reserving it.
    pub fn take_nonce(&mut self, a: AccountId) -> u64 {
        let n = self.next_nonce.entry(a).or_insert(0);
        *n += 1;
        *n
    }

    /// Nonce most recently handed out for `a` (0 if none).
    pub fn last_nonce(&self, a: AccountId) -> u64 {
        self.next_nonce.get(&a).copied().unwrap_or(0)
    }

    fn spendable(&self, a: AccountId) -> Amount {
        self.spec
            .initial_balance
            .saturating_sub(self.spent.get(&a).copied().unwrap_or(0))
    }

    fn draw_account(&mut self) -> AccountId {
        match &self.zipf {
            Some(z) => {
                let r = z.sample(&mut self.rng) as u64;
                AccountId(r.clamp(1, self.spec.account_count) - 1)
            }
            None => AccountId(self.rng.random_range(0..self.spec.account_count.max(1))),
        }
    }

    fn draw_sender(&mut self, amount: Amount) -> Option<AccountId> {
        for _ in 0..64 {
            let a = self.draw_account();
            if self.spendable(a) >= amount {
                return Some(a);
            }
        }
        (0..self.spec.account_count)
            .map(AccountId)
            .find(|&a| self.spendable(a) >= amount)
    }

    fn uniform_in(&mut self, dir: &Directory, s: ShardId, avoid: AccountId) -> Option<AccountId> {
        let n = dir.count_in(s);
        if n == 0 {
            return None;
        }
        let a = dir.nth_in(s, self.rng.random_range(0..n))?;
        if a == avoid && n > 1 {
            return dir.accounts_in(s).find(|&x| x != avoid);
        }
        Some(a)
    }

    /// Receiver whose home satisfies `ok`, preferring the popularity
    /// distribution and falling back to a uniform pick.
    fn draw_receiver(
        &mut self,
        dir: &Directory,
        avoid: AccountId,
        ok: impl Fn(ShardId) -> bool,
        fallback_shard: impl Fn(&mut ChaCha8Rng) -> Option<ShardId>,
    ) -> Option<AccountId> {
        for _ in 0..64 {
            let a = self.draw_account();
            if a != avoid && dir.home(a).is_some_and(&ok) {
                return Some(a);
            }
        }
        let s = fallback_shard(&mut self.rng)?;
        self.uniform_in(dir, s, avoid)
    }

    /// Generate the transaction arriving at [`WorkloadGen::peek_time`].
    /// Accounts' shards are looked up in `dir`.
    pub fn next_tx(&mut self, dir: &Directory) -> Option<Transaction> {
        let at = self.peek_time()?;
        if let Some(d) = self.arrivals {
            self.next_at = at.saturating_add(secs_to_us(d.sample(&mut self.rng)).max(1));
        }
        self.generated += 1;
        let amount = self.rng.random_range(1..=self.spec.max_amount.max(1));
        let sender = self.draw_sender(amount)?;
        let home = dir.home(sender)?;
        let shards: alloc::vec::Vec<ShardId> = dir.shards().collect();
        let want_cross = shards.len() > 1 && self.rng.random::<f64>() < self.spec.cross_ratio;

        let mut inputs = vec![(sender, home, amount)];
        if want_cross && self.rng.random::<f64>() < self.spec.multi_input_ratio {
            let second_amount = self.rng.random_range(1..=self.spec.max_amount.max(1));
            if let Some(b) = self.draw_sender(second_amount) {
                if b != sender {
                    if let Some(bh) = dir.home(b) {
                        inputs.push((b, bh, second_amount));
                    }
                }
            }
        }
        let input_shards: alloc::vec::Vec<ShardId> = inputs.iter().map(|x| x.1).collect();
        let receiver = if want_cross {
            let others: alloc::vec::Vec<ShardId> =
                shards.iter().copied().filter(|s| !input_shards.contains(s)).collect();
            let pick = others.clone();
            self.draw_receiver(
                dir,
                sender,
                |s| !input_shards.contains(&s),
                move |rng| (!pick.is_empty()).then(|| pick[rng.random_range(0..pick.len())]),
            )
            .or_else(|| {
                // Every shard holds an input; a different shard still makes
                // the transaction cross-shard.
                let s = shards.iter().copied().find(|&s| s != home)?;
                dir.accounts_in(s).next()
            })?
        } else {
            self.draw_receiver(dir, sender, |s| s == home, move |_| Some(home))?
        };
        let out_shard = dir.home(receiver)?;
        let total: Amount = inputs.iter().map(|x| x.2).sum();
        let legs = inputs
            .iter()
            .map(|&(a, s, amt)| {
                *self.spent.entry(a).or_insert(0) += amt;
                InputLeg {
                    shard: s,
                    account: a,
                    amount: amt,
                    nonce: self.take_nonce(a),
                }
            })
            .collect();
        Transaction::new(
            legs,
            vec![OutputLeg {
                shard: out_shard,
                account: receiver,
                amount: total,
            }],
            at,
        )
        .ok()
    }
}

fn secs_to_us(x: f64) -> SimTime {
    let us = x * SECONDS as f64;
    if us.is_finite() && us > 0.0 {
        us as SimTime
    } else {
        0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::{classify, TxClass};

    fn directory(accounts: u64, shards: u32) -> Directory {
        let mut d = Directory::new();
        for a in 0..accounts {
            d.assign(AccountId(a), ShardId((a % shards as u64) as u32));
        }
        d
    }

    #[test]
    fn zero_cross_ratio_is_all_intra() {
        let dir = directory(200, 4);
        let mut g = WorkloadGen::new(WorkloadSpec {
            cross_ratio: 0.0,
            account_count: 200,
            max_txs: 2_000,
            duration: 0,
            ..WorkloadSpec::default()
        });
        let mut n = 0;
        while let Some(tx) = g.next_tx(&dir) {
            assert!(matches!(classify(&tx, &dir).unwrap(), TxClass::Intra(_)));
            n += 1;
        }
        assert_eq!(n, 2_000);
    }

    #[test]
    fn cross_fraction_concentrates() {
        let dir = directory(1_000, 8);
        let mut g = WorkloadGen::new(WorkloadSpec {
            cross_ratio: 0.8,
            max_txs: 10_000,
            duration: 0,
            ..WorkloadSpec::default()
        });
        let mut cross = 0;
        for _ in 0..10_000 {
            let tx = g.next_tx(&dir).unwrap();
            if classify(&tx, &dir).unwrap().is_cross() {
                cross += 1;
            }
        }
        // Binomial sd at p = 0.8, n = 10k is 40; ±200 is five sd.
        assert!((7_800..=8_200).contains(&cross), "cross = {cross}");
    }

    #[test]
    fn poisson_count_within_three_sigma() {
        let dir = directory(100, 2);
        let mut g = WorkloadGen::new(WorkloadSpec {
            rate: 100.0,
            duration: 10 * SECONDS,
            account_count: 100,
            ..WorkloadSpec::default()
        });
        let mut n = 0u64;
        while g.next_tx(&dir).is_some() {
            n += 1;
        }
        assert!((900..=1_100).contains(&n), "n = {n}");
    }

    #[test]
    fn nonces_are_sequential_and_amounts_funded() {
        let dir = directory(10, 2);
        let mut g = WorkloadGen::new(WorkloadSpec {
            account_count: 10,
            max_txs: 500,
            duration: 0,
            initial_balance: 1_000,
            ..WorkloadSpec::default()
        });
        let mut last: BTreeMap<AccountId, u64> = BTreeMap::new();
        let mut spent: BTreeMap<AccountId, u64> = BTreeMap::new();
        while let Some(tx) = g.next_tx(&dir) {
            assert!(tx.id_matches());
            for l in &tx.inputs {
                let prev = last.insert(l.account, l.nonce).unwrap_or(0);
                assert_eq!(l.nonce, prev + 1);
                *spent.entry(l.account).or_insert(0) += l.amount;
                assert!(spent[&l.account] <= 1_000);
                assert!((1..=100).contains(&l.amount));
            }
        }
    }

    #[test]
    fn multi_input_transactions_have_two_inputs() {
        let dir = directory(500, 4);
        let mut g = WorkloadGen::new(WorkloadSpec {
            cross_ratio: 1.0,
            multi_input_ratio: 1.0,
            account_count: 500,
            max_txs: 200,
            duration: 0,
            ..WorkloadSpec::default()
        });
        let mut multi = 0;
        while let Some(tx) = g.next_tx(&dir) {
            if tx.inputs.len() == 2 {
                multi += 1;
                assert_eq!(tx.total(), tx.inputs.iter().map(|l| l.amount).sum::<u64>());
            }
        }
        assert!(multi > 150);
    }

    #[test]
    fn same_seed_same_stream() {
        let dir = directory(100, 4);
        let spec = WorkloadSpec {
            account_count: 100,
            max_txs: 300,
            duration: 0,
            ..WorkloadSpec::default()
        };
        let mut a = WorkloadGen::new(spec.clone());
        let mut b = WorkloadGen::new(spec);
        for _ in 0..300 {
            assert_eq!(a.next_tx(&dir).unwrap().id(), b.next_tx(&dir).unwrap().id());
        }
    }
}
