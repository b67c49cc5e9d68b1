use std::cmp::Reverse;
use std::collections::BinaryHeap;

use super::EngineError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scheduled<P> {
    pub time: u64,
    pub seq: u64,
    pub payload: P,
}

struct Entry<P>(Scheduled<P>);

impl<P> PartialEq for Entry<P> {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

impl<P> Eq for Entry<P> {}

impl<P> PartialOrd for Entry<P> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl<P> Ord for Entry<P> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.key().cmp(&other.key())
    }
}

impl<P> Entry<P> {
    fn key(&self) -> (u64, u64) {
        (self.0.time, self.0.seq)
    }
}

/// Min-queue ordered by `(time, seq)`; `seq` is assigned at schedule time.
pub struct EventQueue<P> {
    heap: BinaryHeap<Reverse<Entry<P>>>,
    next_seq: u64,
    clock: u64,
}

impl<P> Default for EventQueue<P> {
    fn default() -> Self {
        Self {
            heap: BinaryHeap::new(),
            next_seq: 0,
            clock: 0,
        }
    }
}

impl<P> EventQueue<P> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Time of the most recently dispatched event.
    pub fn now(&self) -> u64 {
        self.clock
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn schedule(&mut self, time: u64, payload: P) -> Result<u64, EngineError> {
        if time < self.clock {
            return Err(EngineError::TimeTravel {
                time,
                clock: self.clock,
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap
            .push(Reverse(Entry(Scheduled { time, seq, payload })));
        Ok(seq)
    }

    pub fn pop(&mut self) -> Option<Scheduled<P>> {
        let Reverse(Entry(event)) = self.heap.pop()?;
        self.clock = event.time;
        Some(event)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn first_scheduled_first_out() {
        let mut q = EventQueue::new();
        q.schedule(0, "a").unwrap();
        assert_eq!(q.pop().unwrap().payload, "a");
        assert!(q.pop().is_none());
    }

    #[test]
    fn equal_times_keep_schedule_order() {
        let mut q = EventQueue::new();
        q.schedule(5, 'x').unwrap();
        q.schedule(5, 'y').unwrap();
        q.schedule(3, 'z').unwrap();
        let order: Vec<char> = std::iter::from_fn(|| q.pop().map(|e| e.payload)).collect();
        assert_eq!(order, ['z', 'x', 'y']);
    }

    #[test]
    fn past_events_rejected() {
        let mut q = EventQueue::new();
        q.schedule(10, ()).unwrap();
        q.pop();
        assert!(matches!(
            q.schedule(9, ()),
            Err(EngineError::TimeTravel { time: 9, clock: 10 })
        ));
        assert!(q.schedule(10, ()).is_ok());
    }

    proptest! {
        #[test]
        fn dispatch_is_sorted(times in proptest::collection::vec(0u64..50, 0..100)) {
            let mut q = EventQueue::new();
            for t in &times {
                q.schedule(*t, ()).unwrap();
            }
            let mut last = (0, 0);
            let mut first = true;
            while let Some(e) = q.pop() {
                if !first {
                    prop_assert!((e.time, e.seq) > last);
                }
                first = false;
                last = (e.time, e.seq);
            }
        }
    }
}
