use std::collections::BTreeMap;

use crate::addrmap::PAGE_BYTES;

const PAGE: usize = PAGE_BYTES as usize;

/// Sparse byte store for host-managed device memory.
///
/// Pages are allocated on first write; a page that was never written reads
/// back as zeros. The set of allocated pages doubles as the dirty set used
/// when auditing zeroization.
#[derive(Debug, Clone, Default)]
pub struct HdmStore {
    capacity: u64,
    pages: BTreeMap<u64, Box<[u8; PAGE]>>,
}

impl HdmStore {
    pub fn new(capacity: u64) -> Self {
        Self {
            capacity,
            pages: BTreeMap::new(),
        }
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn read(&self, dpa: u64, buf: &mut [u8]) {
        self.for_each_chunk(dpa, buf.len(), |page, off, range| {
            match self.pages.get(&page) {
                Some(p) => buf[range.clone()].copy_from_slice(&p[off..off + range.len()]),
                None => buf[range].fill(0),
            }
        });
    }

    pub fn read_vec(&self, dpa: u64, len: usize) -> Vec<u8> {
        let mut out = vec![0; len];
        self.read(dpa, &mut out);
        out
    }

    pub fn write(&mut self, dpa: u64, data: &[u8]) {
        let mut chunks = Vec::new();
        self.for_each_chunk(dpa, data.len(), |page, off, range| {
            chunks.push((page, off, range))
        });
        for (page, off, range) in chunks {
            let p = self
                .pages
                .entry(page)
                .or_insert_with(|| Box::new([0; PAGE]));
            p[off..off + range.len()].copy_from_slice(&data[range]);
        }
    }

    pub fn read_u64(&self, dpa: u64) -> u64 {
        let mut b = [0u8; 8];
        self.read(dpa, &mut b);
        u64::from_le_bytes(b)
    }

    pub fn write_u64(&mut self, dpa: u64, value: u64) {
        self.write(dpa, &value.to_le_bytes());
    }

    /// Zeroes `[dpa, dpa + len)` and returns how many stored bytes were
    /// cleared. Untouched pages cost nothing and count zero.
    pub fn zero_range(&mut self, dpa: u64, len: u64) -> u64 {
        let end = dpa + len;
        let first = dpa / PAGE_BYTES;
        let last = end.div_ceil(PAGE_BYTES);
        let touched: Vec<u64> = self.pages.range(first..last).map(|(k, _)| *k).collect();
        let mut cleared = 0;
        for page in touched {
            let page_start = page * PAGE_BYTES;
            let lo = dpa.max(page_start);
            let hi = end.min(page_start + PAGE_BYTES);
            if lo == page_start && hi == page_start + PAGE_BYTES {
                self.pages.remove(&page);
            } else if let Some(p) = self.pages.get_mut(&page) {
                p[(lo - page_start) as usize..(hi - page_start) as usize].fill(0);
            }
            cleared += hi - lo;
        }
        cleared
    }

    /// Allocated (ever written, not since fully cleared) pages.
    pub fn dirty_pages(&self) -> impl Iterator<Item = u64> + '_ {
        self.pages.keys().copied()
    }

    /// Whether every byte of the range reads zero.
    pub fn is_zero(&self, dpa: u64, len: u64) -> bool {
        let end = dpa + len;
        self.pages
            .range(dpa / PAGE_BYTES..end.div_ceil(PAGE_BYTES))
            .all(|(page, bytes)| {
                let start = page * PAGE_BYTES;
                let lo = (dpa.max(start) - start) as usize;
                let hi = (end.min(start + PAGE_BYTES) - start) as usize;
                bytes[lo..hi].iter().all(|&b| b == 0)
            })
    }

    fn for_each_chunk(
        &self,
        dpa: u64,
        len: usize,
        mut f: impl FnMut(u64, usize, std::ops::Range<usize>),
    ) {
        let mut done = 0usize;
        while done < len {
            let addr = dpa + done as u64;
            let page = addr / PAGE_BYTES;
            let off = (addr % PAGE_BYTES) as usize;
            let n = (PAGE - off).min(len - done);
            f(page, off, done..done + n);
            done += n;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unwritten_reads_zero() {
        let hdm = HdmStore::new(1 << 30);
        assert_eq!(hdm.read_vec(0x1234, 64), vec![0; 64]);
        assert_eq!(hdm.dirty_pages().count(), 0);
    }

    #[test]
    fn write_spanning_pages() {
        let mut hdm = HdmStore::new(1 << 20);
        let data: Vec<u8> = (1..=32).collect();
        hdm.write(PAGE_BYTES - 16, &data);
        assert_eq!(hdm.read_vec(PAGE_BYTES - 16, 32), data);
        assert_eq!(hdm.dirty_pages().collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn zero_range_counts_only_stored_bytes() {
        let mut hdm = HdmStore::new(1 << 20);
        assert_eq!(hdm.zero_range(0, 8192), 0);

        hdm.write(100, &[0xab; 8]);
        hdm.write(PAGE_BYTES + 64, &[0xcd; 8]);
        // Whole first page plus the first 128 bytes of the second.
        assert_eq!(hdm.zero_range(0, PAGE_BYTES + 128), PAGE_BYTES + 128);
        assert!(hdm.is_zero(0, 2 * PAGE_BYTES));
        assert_eq!(hdm.dirty_pages().collect::<Vec<_>>(), vec![1]);
    }

    #[test]
    fn u64_words_are_little_endian() {
        let mut hdm = HdmStore::new(4096);
        hdm.write_u64(8, 0x0102);
        assert_eq!(hdm.read_vec(8, 2), vec![2, 1]);
        assert_eq!(hdm.read_u64(8), 0x0102);
    }
}
