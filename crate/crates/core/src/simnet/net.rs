//! Latency, loss and partition model with a global stabilisation time.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use rand::Rng;

use crate::ledger::{SimTime, MILLIS};

/// While active, messages between `side` and its complement are held and
/// delivered only once the partition heals.
#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    pub start: SimTime,
    pub end: SimTime,
    pub side: BTreeSet<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetModel {
    pub base_latency: SimTime,
    /// Uniform jitter half-width around `base_latency`.
    pub jitter: SimTime,
    /// Delivery bound after `gst`.
    pub delta: SimTime,
    pub gst: SimTime,
    /// Loss probability before `gst`.
    pub drop_rate: f64,
    /// Upper delay before `gst`.
    pub pre_gst_max_delay: SimTime,
    pub partitions: Vec<Partition>,
}

impl Default for NetModel {
    fn default() -> Self {
        NetModel {
            base_latency: 10 * MILLIS,
            jitter: 5 * MILLIS,
            delta: 50 * MILLIS,
            gst: 0,
            drop_rate: 0.0,
            pre_gst_max_delay: 200 * MILLIS,
            partitions: Vec::new(),
        }
    }
}

impl NetModel {
    /// Mean one-way latency after stabilisation.
    pub fn mean_latency(&self) -> SimTime {
        self.base_latency
    }

    /// Delivery time of a message sent at `now`, or `None` if it is lost.
    pub fn delivery(&self, rng: &mut impl Rng, from: u32, to: u32, now: SimTime) -> Option<SimTime> {
        let mut at = if now < self.gst {
            if self.drop_rate > 0.0 && rng.random::<f64>() < self.drop_rate {
                return None;
            }
            let lo = self.base_latency.saturating_sub(self.jitter);
            let hi = self.pre_gst_max_delay.max(lo);
            (now + rng.random_range(lo..=hi)).min(self.gst + self.delta)
        } else {
            now + self.stable_delay(rng)
        };
        for p in &self.partitions {
            if now < p.end && at > p.start && (p.side.contains(&from) != p.side.contains(&to)) {
                at = at.max(p.end + self.stable_delay(rng));
            }
        }
        Some(at)
    }

    /// Delay of a message sent after stabilisation; always within `delta`.
    pub fn stable_delay(&self, rng: &mut impl Rng) -> SimTime {
        let lo = self.base_latency.saturating_sub(self.jitter);
        let hi = self.base_latency + self.jitter;
        rng.random_range(lo..=hi).min(self.delta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn post_gst_delivery_is_bounded() {
        let net = NetModel {
            gst: 100 * MILLIS,
            drop_rate: 0.5,
            ..NetModel::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut dropped = 0;
        for i in 0..10_000u64 {
            let now = i * 37;
            match net.delivery(&mut rng, 0, 1, now) {
                Some(at) => {
                    assert!(at >= now);
                    assert!(at <= now.max(net.gst) + net.delta);
                }
                None => {
                    assert!(now < net.gst);
                    dropped += 1;
                }
            }
        }
        assert!(dropped > 0);
    }

    #[test]
    fn partition_holds_until_heal() {
        let net = NetModel {
            partitions: alloc::vec![Partition {
                start: 0,
                end: 1_000 * MILLIS,
                side: [0u32, 1].into_iter().collect(),
            }],
            ..NetModel::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(net.delivery(&mut rng, 0, 2, 5).unwrap() >= 1_000 * MILLIS);
        assert!(net.delivery(&mut rng, 0, 1, 5).unwrap() < 100 * MILLIS);
        assert!(net.delivery(&mut rng, 0, 2, 2_000 * MILLIS).unwrap() < 2_100 * MILLIS);
    }
}
