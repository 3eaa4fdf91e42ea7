//! Event queue ordered by `(fire_at, seq_no)`.

use alloc::collections::BTreeMap;

use crate::ledger::SimTime;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SimEvent<E> {
    pub fire_at: SimTime,
    pub seq_no: u64,
    pub payload: E,
}

/// Deterministic event queue. Events with equal `fire_at` pop in the order
/// they were scheduled.
#[derive(Clone, Debug)]
pub struct Scheduler<E> {
    now: SimTime,
    next_seq: u64,
    queue: BTreeMap<(SimTime, u64), E>,
}

impl<E> Default for Scheduler<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> Scheduler<E> {
    pub fn new() -> Self {
        Scheduler {
            now: 0,
            next_seq: 0,
            queue: BTreeMap::new(),
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    /// Schedule at an absolute time; times in the past fire "now".
    pub fn schedule(&mut self, at: SimTime, payload: E) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.insert((at.max(self.now), seq), payload);
        seq
    }

    pub fn schedule_in(&mut self, delay: SimTime, payload: E) -> u64 {
        self.schedule(self.now.saturating_add(delay), payload)
    }

    pub fn peek_time(&self) -> Option<SimTime> {
        self.queue.keys().next().map(|k| k.0)
    }

    /// Pop the next event and advance the clock to it.
    pub fn pop(&mut self) -> Option<SimEvent<E>> {
        let ((fire_at, seq_no), payload) = self.queue.pop_first()?;
        self.now = fire_at;
        Some(SimEvent {
            fire_at,
            seq_no,
            payload,
        })
    }

    /// Pop only if the next event fires at or before `until`.
    pub fn pop_until(&mut self, until: SimTime) -> Option<SimEvent<E>> {
        if self.peek_time()? > until {
            return None;
        }
        self.pop()
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    #[test]
    fn orders_by_time_then_insertion() {
        let mut s = Scheduler::new();
        s.schedule(5, 'c');
        s.schedule(1, 'a');
        s.schedule(5, 'd');
        s.schedule(1, 'b');
        let got: Vec<_> = core::iter::from_fn(|| s.pop().map(|e| e.payload)).collect();
        assert_eq!(got, ['a', 'b', 'c', 'd']);
        assert_eq!(s.now(), 5);
    }

    #[test]
    fn past_events_fire_now_and_until_bounds() {
        let mut s = Scheduler::new();
        s.schedule(10, 1);
        s.pop();
        s.schedule(3, 2);
        assert_eq!(s.pop().unwrap().fire_at, 10);
        s.schedule_in(7, 3);
        assert!(s.pop_until(16).is_none());
        assert_eq!(s.pop_until(17).unwrap().payload, 3);
    }
}
