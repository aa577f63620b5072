//! Single-threaded discrete-event engine.
//!
//! Events are totally ordered by `(fire_at, seq)` where `seq` is a global
//! insertion counter, so events scheduled for the same instant fire in the
//! order they were scheduled. Workers in the serving model are explicit state
//! machines: they sleep until an event (timer expiry, new queue entry, freed
//! memory, finished transfer) touches them and then re-evaluate.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashSet};

use thiserror::Error;

use crate::time::{SimDuration, SimTime};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum KernelError {
    #[error("negative delay of {0} ns")]
    NegativeDelay(i64),
    #[error("cannot schedule at {at} before current time {now}")]
    InPast { at: SimTime, now: SimTime },
}

/// Handle to a scheduled event, usable for cancellation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EventId(u64);

struct Entry<E> {
    fire_at: SimTime,
    seq: u64,
    payload: E,
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        self.fire_at == other.fire_at && self.seq == other.seq
    }
}

impl<E> Eq for Entry<E> {}

impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Entry<E> {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.fire_at, self.seq).cmp(&(other.fire_at, other.seq))
    }
}

/// Counters backing the no-lost-events invariant.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct QueueStats {
    pub scheduled: u64,
    pub dispatched: u64,
    pub cancelled: u64,
}

pub struct EventQueue<E> {
    heap: BinaryHeap<Reverse<Entry<E>>>,
    cancelled: HashSet<u64>,
    now: SimTime,
    next_seq: u64,
    stats: QueueStats,
    /// When the queue drains before the horizon, `run_until` moves the clock
    /// to the horizon if set, otherwise leaves it at the last event time.
    pub advance_to_horizon: bool,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        Self {
            heap: BinaryHeap::new(),
            cancelled: HashSet::new(),
            now: SimTime::ZERO,
            next_seq: 0,
            stats: QueueStats::default(),
            advance_to_horizon: true,
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn stats(&self) -> QueueStats {
        self.stats
    }

    /// Live events still waiting to fire.
    pub fn pending(&self) -> usize {
        self.heap.len() - self.cancelled.len()
    }

    pub fn schedule(&mut self, delay: SimDuration, payload: E) -> EventId {
        let at = self.now + delay;
        self.push(at, payload)
    }

    /// Signed-delay variant; rejects negative delays.
    pub fn schedule_ns(&mut self, delay_ns: i64, payload: E) -> Result<EventId, KernelError> {
        if delay_ns < 0 {
            return Err(KernelError::NegativeDelay(delay_ns));
        }
        Ok(self.schedule(SimDuration::from_nanos(delay_ns as u64), payload))
    }

    pub fn schedule_at(&mut self, at: SimTime, payload: E) -> Result<EventId, KernelError> {
        if at < self.now {
            return Err(KernelError::InPast { at, now: self.now });
        }
        Ok(self.push(at, payload))
    }

    fn push(&mut self, fire_at: SimTime, payload: E) -> EventId {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.stats.scheduled += 1;
        self.heap.push(Reverse(Entry {
            fire_at,
            seq,
            payload,
        }));
        EventId(seq)
    }

    /// Cancels a pending event. Returns false if it already fired, was
    /// already cancelled, or never existed.
    pub fn cancel(&mut self, id: EventId) -> bool {
        if id.0 >= self.next_seq || self.cancelled.contains(&id.0) {
            return false;
        }
        if !self.heap.iter().any(|Reverse(e)| e.seq == id.0) {
            return false;
        }
        self.cancelled.insert(id.0);
        self.stats.cancelled += 1;
        true
    }

    /// Pops the next live event with `fire_at <= horizon`, advancing the
    /// clock to its fire time.
    pub fn pop_until(&mut self, horizon: SimTime) -> Option<(SimTime, E)> {
        loop {
            let head = self.heap.peek()?;
            if head.0.fire_at > horizon {
                return None;
            }
            let Reverse(entry) = self.heap.pop()?;
            if !self.cancelled.is_empty() && self.cancelled.remove(&entry.seq) {
                continue;
            }
            debug_assert!(entry.fire_at >= self.now);
            self.now = entry.fire_at;
            self.stats.dispatched += 1;
            return Some((entry.fire_at, entry.payload));
        }
    }

    /// Dispatches every event with `fire_at <= horizon` in total order and
    /// returns the final clock value. The handler may schedule new events.
    pub fn run_until<F>(&mut self, horizon: SimTime, mut handler: F) -> SimTime
    where
        F: FnMut(&mut Self, E),
    {
        debug_assert!(horizon >= self.now);
        while let Some((_, payload)) = self.pop_until(horizon) {
            handler(self, payload);
        }
        if self.advance_to_horizon && horizon > self.now {
            self.now = horizon;
        }
        self.now
    }
}
