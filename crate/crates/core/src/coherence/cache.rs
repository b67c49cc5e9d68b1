use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::addrmap::LINE_BYTES;

pub type LineData = [u8; LINE_BYTES as usize];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LineState {
    Shared,
    Modified,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CachedLine {
    pub state: LineState,
    pub data: LineData,
}

/// A host's view of HDM lines it currently caches, keyed by DPA line id.
///
/// Unbounded unless a capacity is given, in which case a full cache evicts a
/// uniformly random line using its own seeded generator.
#[derive(Debug, Clone)]
pub struct HostCache {
    lines: BTreeMap<u64, CachedLine>,
    capacity: Option<usize>,
    rng: ChaCha8Rng,
    evictions: u64,
}

impl Default for HostCache {
    fn default() -> Self {
        Self::unbounded()
    }
}

impl HostCache {
    pub fn unbounded() -> Self {
        Self {
            lines: BTreeMap::new(),
            capacity: None,
            rng: ChaCha8Rng::seed_from_u64(0),
            evictions: 0,
        }
    }

    pub fn bounded(capacity: usize, seed: u64) -> Self {
        assert!(capacity > 0, "cache capacity must be positive");
        Self {
            capacity: Some(capacity),
            rng: ChaCha8Rng::seed_from_u64(seed),
            ..Self::unbounded()
        }
    }

    pub fn get(&self, line: u64) -> Option<&CachedLine> {
        self.lines.get(&line)
    }

    pub fn contains(&self, line: u64) -> bool {
        self.lines.contains_key(&line)
    }

    pub fn state(&self, line: u64) -> Option<LineState> {
        self.lines.get(&line).map(|l| l.state)
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    pub fn evictions(&self) -> u64 {
        self.evictions
    }

    pub fn lines(&self) -> impl Iterator<Item = (u64, &CachedLine)> {
        self.lines.iter().map(|(k, v)| (*k, v))
    }

    pub fn insert(&mut self, line: u64, state: LineState, data: LineData) {
        if let Some(cap) = self.capacity {
            if !self.lines.contains_key(&line) && self.lines.len() >= cap {
                let victim = self.rng.gen_range(0..self.lines.len());
                let key = *self.lines.keys().nth(victim).expect("victim in range");
                self.lines.remove(&key);
                self.evictions += 1;
            }
        }
        self.lines.insert(line, CachedLine { state, data });
    }

    pub fn invalidate(&mut self, line: u64) -> bool {
        self.lines.remove(&line).is_some()
    }

    /// Drops every cached line with id in `[first, last)`; returns how many.
    pub fn invalidate_lines(&mut self, first: u64, last: u64) -> usize {
        let doomed: Vec<u64> = self.lines.range(first..last).map(|(k, _)| *k).collect();
        for k in &doomed {
            self.lines.remove(k);
        }
        doomed.len()
    }
}
