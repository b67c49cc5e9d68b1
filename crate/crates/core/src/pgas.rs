//! OpenSHMEM-style symmetric heap over shared HDM.
//!
//! The heap starts with a reserved metadata area that every PE agrees on at
//! initialisation. Symmetric objects follow it and live once in device
//! memory: every PE addresses the same bytes, each through its own port's
//! remap table.
//!
//! Reserved area layout, one 64-bit word at the start of each 64B line:
//!
//! | line          | contents                                   |
//! |---------------|--------------------------------------------|
//! | 0             | barrier generation, layout version in bits 48..64 |
//! | 1 ..= n       | arrival flag of PE `line - 1`             |
//! | n + 1 ..      | advisory lock words                        |

use thiserror::Error;

use crate::addrmap::{AddrError, RemapTable, LINE_BYTES};

pub type PeId = usize;

pub const RESERVED_LAYOUT_VERSION: u64 = 1;
const VERSION_SHIFT: u32 = 48;
const GENERATION_MASK: u64 = (1 << VERSION_SHIFT) - 1;

/// Smallest reserved area for `num_pes` PEs.
pub const fn min_meta_bytes(num_pes: usize) -> u64 {
    LINE_BYTES * (num_pes as u64 + 2)
}

/// Generation word value carrying the layout version.
pub const fn stamp_generation(generation: u64) -> u64 {
    (RESERVED_LAYOUT_VERSION << VERSION_SHIFT) | (generation & GENERATION_MASK)
}

pub const fn generation_of(word: u64) -> u64 {
    word & GENERATION_MASK
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PgasError {
    #[error("reserved area of {got} bytes is below the {needed} bytes required")]
    HeapTooSmall { needed: u64, got: u64 },

    #[error("heap [{base:#x}, +{len:#x}) does not fit the {hdm_bytes:#x}-byte device")]
    HeapOutOfRange { base: u64, len: u64, hdm_bytes: u64 },

    #[error("allocation of {requested} bytes does not fit ({available} bytes left)")]
    OutOfHeap { requested: u64, available: u64 },

    #[error("PE {pe} allocation #{index} passed ({got_size}, {got_align}), others passed ({size}, {align})")]
    CollectiveMismatch {
        pe: PeId,
        index: usize,
        size: u64,
        align: u64,
        got_size: u64,
        got_align: u64,
    },

    #[error("alignment {0} is not a power of two")]
    BadAlignment(u64),

    #[error("PE {pe} out of range ({num_pes} PEs)")]
    InvalidPe { pe: PeId, num_pes: usize },

    #[error("symmetric object {0} does not exist for this PE")]
    UnknownObject(usize),

    #[error("access [{offset}, +{len}) outside object of {size} bytes")]
    OutOfBounds { offset: u64, len: u64, size: u64 },

    #[error("atomic offset {0} is not 8-byte aligned")]
    MisalignedAtomic(u64),

    #[error("atomic on software managed address {0:#x}")]
    SoftwareManagedAtomic(u64),

    #[error("PE {0} has not called init")]
    NotInitialized(PeId),

    #[error(transparent)]
    Unmapped(#[from] AddrError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PgasLayout {
    pub heap_base: u64,
    pub heap_bytes: u64,
    pub meta_bytes: u64,
}

/// A remotely accessible object, identical on every PE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SymmetricObject {
    pub id: usize,
    /// Bytes from the end of the reserved area.
    pub offset: u64,
    pub size: u64,
    pub alignment: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeWorld {
    num_pes: usize,
    layout: PgasLayout,
    bump_offset: u64,
    objects: Vec<SymmetricObject>,
    allocs_seen: Vec<usize>,
    initialized: Vec<bool>,
}

/// Builds the shared world description all PEs agree on. The caller is
/// responsible for clearing the reserved area in device memory; see
/// [`PeWorld::reserved_range`] and [`PeWorld::initial_reserved_words`].
pub fn shmem_init(
    num_pes: usize,
    layout: PgasLayout,
    hdm_bytes: u64,
) -> Result<PeWorld, PgasError> {
    let needed = min_meta_bytes(num_pes);
    if layout.meta_bytes < needed || layout.heap_bytes < layout.meta_bytes {
        return Err(PgasError::HeapTooSmall {
            needed,
            got: layout.meta_bytes.min(layout.heap_bytes),
        });
    }
    let fits = layout.heap_base.is_multiple_of(LINE_BYTES)
        && layout
            .heap_base
            .checked_add(layout.heap_bytes)
            .is_some_and(|end| end <= hdm_bytes);
    if !fits {
        return Err(PgasError::HeapOutOfRange {
            base: layout.heap_base,
            len: layout.heap_bytes,
            hdm_bytes,
        });
    }
    Ok(PeWorld {
        num_pes,
        layout,
        bump_offset: 0,
        objects: Vec::new(),
        allocs_seen: vec![0; num_pes],
        initialized: vec![false; num_pes],
    })
}

impl PeWorld {
    pub fn num_pes(&self) -> usize {
        self.num_pes
    }

    pub fn layout(&self) -> PgasLayout {
        self.layout
    }

    pub fn bump_offset(&self) -> u64 {
        self.bump_offset
    }

    fn check_pe(&self, pe: PeId) -> Result<(), PgasError> {
        if pe < self.num_pes {
            Ok(())
        } else {
            Err(PgasError::InvalidPe {
                pe,
                num_pes: self.num_pes,
            })
        }
    }

    /// Marks `pe` initialised; returns true for the first PE to arrive.
    pub fn mark_initialized(&mut self, pe: PeId) -> Result<bool, PgasError> {
        self.check_pe(pe)?;
        let first = !self.initialized.iter().any(|&b| b);
        self.initialized[pe] = true;
        Ok(first)
    }

    pub fn is_initialized(&self, pe: PeId) -> bool {
        self.initialized.get(pe).copied().unwrap_or(false)
    }

    pub fn ensure_initialized(&self, pe: PeId) -> Result<(), PgasError> {
        self.check_pe(pe)?;
        if self.is_initialized(pe) {
            Ok(())
        } else {
            Err(PgasError::NotInitialized(pe))
        }
    }

    /// DPA range of the reserved metadata area.
    pub fn reserved_range(&self) -> (u64, u64) {
        (self.layout.heap_base, self.layout.meta_bytes)
    }

    /// DPA range holding symmetric objects.
    pub fn data_range(&self) -> (u64, u64) {
        (
            self.layout.heap_base + self.layout.meta_bytes,
            self.layout.heap_bytes - self.layout.meta_bytes,
        )
    }

    pub fn generation_word_dpa(&self) -> u64 {
        self.layout.heap_base
    }

    pub fn arrival_flag_dpa(&self, pe: PeId) -> u64 {
        self.layout.heap_base + LINE_BYTES * (pe as u64 + 1)
    }

    pub fn lock_word_dpa(&self, idx: usize) -> Option<u64> {
        let dpa = self.layout.heap_base + LINE_BYTES * (self.num_pes as u64 + 1 + idx as u64);
        (dpa + 8 <= self.layout.heap_base + self.layout.meta_bytes).then_some(dpa)
    }

    /// Words to store after clearing the reserved area.
    pub fn initial_reserved_words(&self) -> Vec<(u64, u64)> {
        vec![(self.generation_word_dpa(), stamp_generation(0))]
    }

    /// One PE's part of a collective allocation. The first PE to reach the
    /// k-th allocation performs it; every other PE must pass the same
    /// arguments and receives the same object.
    pub fn shmalloc_on(
        &mut self,
        pe: PeId,
        size: u64,
        alignment: u64,
    ) -> Result<SymmetricObject, PgasError> {
        self.check_pe(pe)?;
        if !alignment.is_power_of_two() {
            return Err(PgasError::BadAlignment(alignment));
        }
        let index = self.allocs_seen[pe];
        let obj = match self.objects.get(index) {
            Some(existing) => {
                if existing.size != size || existing.alignment != alignment {
                    return Err(PgasError::CollectiveMismatch {
                        pe,
                        index,
                        size: existing.size,
                        align: existing.alignment,
                        got_size: size,
                        got_align: alignment,
                    });
                }
                *existing
            }
            None => {
                let offset = self.bump_offset.next_multiple_of(alignment);
                let capacity = self.data_range().1;
                if size == 0 || offset.checked_add(size).is_none_or(|end| end > capacity) {
                    return Err(PgasError::OutOfHeap {
                        requested: size,
                        available: capacity.saturating_sub(self.bump_offset),
                    });
                }
                let obj = SymmetricObject {
                    id: index,
                    offset,
                    size,
                    alignment,
                };
                self.bump_offset = offset + size;
                self.objects.push(obj);
                obj
            }
        };
        self.allocs_seen[pe] += 1;
        Ok(obj)
    }

    /// Collective allocation performed on behalf of every PE at once.
    pub fn shmalloc(&mut self, size: u64, alignment: u64) -> Result<SymmetricObject, PgasError> {
        let mut obj = None;
        for pe in 0..self.num_pes {
            obj = Some(self.shmalloc_on(pe, size, alignment)?);
        }
        obj.ok_or(PgasError::InvalidPe { pe: 0, num_pes: 0 })
    }

    /// Objects `pe` has allocated so far, in allocation order.
    pub fn alloc_log(&self, pe: PeId) -> &[SymmetricObject] {
        &self.objects[..self.allocs_seen.get(pe).copied().unwrap_or(0)]
    }

    pub fn object(&self, pe: PeId, id: usize) -> Result<SymmetricObject, PgasError> {
        self.check_pe(pe)?;
        self.alloc_log(pe)
            .get(id)
            .copied()
            .ok_or(PgasError::UnknownObject(id))
    }

    pub fn object_dpa(&self, obj: &SymmetricObject) -> u64 {
        self.data_range().0 + obj.offset
    }

    /// DPA of `[offset, offset + len)` inside `obj`.
    pub fn element_dpa(
        &self,
        obj: &SymmetricObject,
        offset: u64,
        len: u64,
    ) -> Result<u64, PgasError> {
        if offset.checked_add(len).is_none_or(|end| end > obj.size) {
            return Err(PgasError::OutOfBounds {
                offset,
                len,
                size: obj.size,
            });
        }
        Ok(self.object_dpa(obj) + offset)
    }

    pub fn atomic_word_dpa(&self, obj: &SymmetricObject, offset: u64) -> Result<u64, PgasError> {
        if !offset.is_multiple_of(8) {
            return Err(PgasError::MisalignedAtomic(offset));
        }
        self.element_dpa(obj, offset, 8)
    }

    /// Address of `obj` in `pe`'s host physical address space.
    pub fn remote_address(
        &self,
        obj: &SymmetricObject,
        pe: PeId,
        tables: &[RemapTable],
    ) -> Result<u64, PgasError> {
        self.check_pe(pe)?;
        let table = tables.get(pe).ok_or(PgasError::InvalidPe {
            pe,
            num_pes: tables.len(),
        })?;
        Ok(table.dpa_to_hpa(self.object_dpa(obj))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn layout(meta: u64) -> PgasLayout {
        PgasLayout {
            heap_base: 0,
            heap_bytes: 1 << 20,
            meta_bytes: meta,
        }
    }

    #[test]
    fn init_checks_reserved_size() {
        let w = shmem_init(2, layout(1024), 1 << 30).unwrap();
        assert_eq!(w.bump_offset(), 0);
        assert_eq!(
            shmem_init(2, layout(192), 1 << 30),
            Err(PgasError::HeapTooSmall {
                needed: 256,
                got: 192
            })
        );
        assert_eq!(min_meta_bytes(8), 64 * (8 + 2));
        assert!(shmem_init(8, layout(640), 1 << 30).is_ok());
        assert!(shmem_init(8, layout(639), 1 << 30).is_err());
        assert!(matches!(
            shmem_init(2, layout(1024), 1 << 19),
            Err(PgasError::HeapOutOfRange { .. })
        ));
    }

    #[test]
    fn bump_allocation() {
        let mut w = shmem_init(2, layout(1024), 1 << 30).unwrap();
        assert_eq!(w.shmalloc(32, 64).unwrap().offset, 0);
        // round_up(32, 64) = 64
        assert_eq!(w.shmalloc(64, 64).unwrap().offset, 64);
        assert_eq!(w.bump_offset(), 128);
        assert!(matches!(
            w.shmalloc(1 << 20, 64),
            Err(PgasError::OutOfHeap { .. })
        ));
    }

    #[test]
    fn collective_mismatch_detected() {
        let mut w = shmem_init(2, layout(1024), 1 << 30).unwrap();
        w.shmalloc_on(0, 32, 64).unwrap();
        assert!(matches!(
            w.shmalloc_on(1, 48, 64),
            Err(PgasError::CollectiveMismatch {
                pe: 1,
                index: 0,
                ..
            })
        ));
        assert_eq!(w.shmalloc_on(1, 32, 64).unwrap().offset, 0);
    }

    #[test]
    fn remote_address_per_port() {
        let mut w = shmem_init(2, layout(1024), 1 << 30).unwrap();
        let obj = w.shmalloc(64, 64).unwrap();
        let tables = vec![
            RemapTable::identity(0, 1 << 30).unwrap(),
            RemapTable::build(1, [(0x1000_0000, 0x0, 1 << 20)]).unwrap(),
        ];
        assert_eq!(w.remote_address(&obj, 0, &tables).unwrap(), 1024);
        assert_eq!(w.remote_address(&obj, 1, &tables).unwrap(), 0x1000_0400);
        assert!(matches!(
            w.remote_address(&obj, 2, &tables),
            Err(PgasError::InvalidPe { pe: 2, .. })
        ));
    }

    #[test]
    fn bounds_and_alignment() {
        let mut w = shmem_init(2, layout(1024), 1 << 30).unwrap();
        let obj = w.shmalloc(16, 64).unwrap();
        assert!(w.element_dpa(&obj, 8, 8).is_ok());
        assert!(matches!(
            w.element_dpa(&obj, 9, 8),
            Err(PgasError::OutOfBounds { .. })
        ));
        assert_eq!(
            w.atomic_word_dpa(&obj, 4),
            Err(PgasError::MisalignedAtomic(4))
        );
    }

    #[test]
    fn reserved_layout() {
        let w = shmem_init(4, layout(1024), 1 << 30).unwrap();
        assert_eq!(w.generation_word_dpa(), 0);
        assert_eq!(w.arrival_flag_dpa(3), 4 * 64);
        assert_eq!(w.lock_word_dpa(0), Some(5 * 64));
        assert_eq!(w.lock_word_dpa(11), None);
        assert_eq!(generation_of(stamp_generation(9)), 9);
        assert_eq!(stamp_generation(0) >> 48, RESERVED_LAYOUT_VERSION);
    }

    proptest! {
        #[test]
        fn allocations_are_symmetric_and_disjoint(
            reqs in proptest::collection::vec((1u64..300, 0u32..8), 1..20),
            pes in 1usize..5,
        ) {
            let mut w = shmem_init(pes, layout(min_meta_bytes(pes)), 1 << 30).unwrap();
            let mut objs = Vec::new();
            for (size, a) in reqs {
                match w.shmalloc(size, 1 << a) {
                    Ok(o) => objs.push(o),
                    Err(PgasError::OutOfHeap { .. }) => break,
                    Err(e) => panic!("{e}"),
                }
            }
            for pe in 1..pes {
                prop_assert_eq!(w.alloc_log(pe), w.alloc_log(0));
            }
            for pair in objs.windows(2) {
                prop_assert!(pair[0].offset + pair[0].size <= pair[1].offset);
            }
            for o in &objs {
                prop_assert_eq!(o.offset % o.alignment, 0);
            }
        }
    }
}
