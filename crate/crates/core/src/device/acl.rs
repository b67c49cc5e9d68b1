use std::collections::{BTreeMap, VecDeque};

use crate::addrmap::PortId;

/// One 64-bit MMIO word per lockable region.
///
/// `0` means free; `port + 1` means held by `port`.
#[derive(Debug, Clone)]
pub struct LockRegisterFile {
    words: Vec<u64>,
}

impl LockRegisterFile {
    pub fn new(count: usize) -> Self {
        Self {
            words: vec![0; count],
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn get(&self, idx: usize) -> Option<u64> {
        self.words.get(idx).copied()
    }

    pub(crate) fn set(&mut self, idx: usize, value: u64) {
        self.words[idx] = value;
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    /// Bytes occupied by the register array.
    pub fn table_bytes(&self) -> u64 {
        self.words.len() as u64 * 8
    }
}

pub fn token(port: PortId) -> u64 {
    port as u64 + 1
}

pub fn holder_of(word: u64) -> Option<PortId> {
    word.checked_sub(1).map(|p| p as PortId)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Waiter {
    pub port: PortId,
    pub requested_at: u64,
    pub seq: u64,
}

/// Arrival-ordered waiters per region. The current holder lives in the
/// lock word, never here.
#[derive(Debug, Clone, Default)]
pub struct GrantQueue {
    waiters: BTreeMap<usize, VecDeque<Waiter>>,
    next_seq: u64,
}

impl GrantQueue {
    pub fn waiters(&self, region: usize) -> impl Iterator<Item = &Waiter> {
        self.waiters.get(&region).into_iter().flatten()
    }

    pub fn contains(&self, region: usize, port: PortId) -> bool {
        self.waiters(region).any(|w| w.port == port)
    }

    pub fn len(&self, region: usize) -> usize {
        self.waiters.get(&region).map_or(0, VecDeque::len)
    }

    /// Appends and returns the 1-based position.
    pub(crate) fn push(&mut self, region: usize, port: PortId, now: u64) -> usize {
        let seq = self.next_seq;
        self.next_seq += 1;
        let q = self.waiters.entry(region).or_default();
        debug_assert!(q
            .back()
            .is_none_or(|w| (w.requested_at, w.seq) < (now, seq)));
        q.push_back(Waiter {
            port,
            requested_at: now,
            seq,
        });
        q.len()
    }

    pub(crate) fn pop(&mut self, region: usize) -> Option<Waiter> {
        let q = self.waiters.get_mut(&region)?;
        let w = q.pop_front();
        if q.is_empty() {
            self.waiters.remove(&region);
        }
        w
    }

    pub(crate) fn remove(&mut self, region: usize, port: PortId) -> Option<Waiter> {
        let q = self.waiters.get_mut(&region)?;
        let pos = q.iter().position(|w| w.port == port)?;
        let w = q.remove(pos);
        if q.is_empty() {
            self.waiters.remove(&region);
        }
        w
    }

    /// Every non-empty queue, by region.
    pub fn pending(&self) -> impl Iterator<Item = (usize, &VecDeque<Waiter>)> {
        self.waiters.iter().map(|(r, q)| (*r, q))
    }
}
