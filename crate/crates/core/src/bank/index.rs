//! Open-addressing key index for one n-gram order.
//!
//! Each slot packs a 32-bit fingerprint (high half of the key hash) with
//! `rank + 1` of the key in the order's sorted key array; zero marks an empty
//! slot. Capacity is a power of two at least twice the key count, so probe
//! sequences stay short regardless of how many keys are stored.

use crate::hash::hash_ids;

const INDEX_SEED: u64 = 0x6D65_6D67_7261_6674;

#[derive(Debug, Clone)]
pub(crate) struct KeyIndex {
    slots: Vec<u64>,
    mask: usize,
    seed: u64,
}

impl KeyIndex {
    /// Index `keys`, a flat array of `keys.len() / order` tuples. Keys must be
    /// distinct.
    pub(crate) fn build(order: usize, keys: &[u32]) -> Self {
        let count = keys.len() / order;
        assert!(count < u32::MAX as usize, "too many keys for a 32-bit rank");
        let cap = (count * 2).next_power_of_two().max(8);
        let mut index = KeyIndex {
            slots: vec![0; cap],
            mask: cap - 1,
            seed: INDEX_SEED ^ order as u64,
        };
        for (rank, key) in keys.chunks_exact(order).enumerate() {
            let h = hash_ids(index.seed, key);
            let tag = (h >> 32) << 32;
            let mut pos = h as usize & index.mask;
            while index.slots[pos] != 0 {
                pos = (pos + 1) & index.mask;
            }
            index.slots[pos] = tag | (rank as u64 + 1);
        }
        index
    }

    #[inline]
    pub(crate) fn slot_for(&self, ids: &[u32]) -> (u64, usize) {
        let h = hash_ids(self.seed, ids);
        ((h >> 32) << 32, h as usize & self.mask)
    }

    /// Rank of `ids` in `keys`, if present.
    #[inline]
    pub(crate) fn find(&self, ids: &[u32], keys: &[u32]) -> Option<u32> {
        let (tag, pos) = self.slot_for(ids);
        self.find_from(tag, pos, ids, keys)
    }

    /// [`find`](Self::find) with the hash already computed by `slot_for`.
    #[inline]
    pub(crate) fn find_from(&self, tag: u64, mut pos: usize, ids: &[u32], keys: &[u32]) -> Option<u32> {
        let order = ids.len();
        loop {
            let slot = self.slots[pos];
            if slot == 0 {
                return None;
            }
            if slot & 0xFFFF_FFFF_0000_0000 == tag {
                let rank = (slot as u32 - 1) as usize;
                if &keys[rank * order..(rank + 1) * order] == ids {
                    return Some(rank as u32);
                }
            }
            pos = (pos + 1) & self.mask;
        }
    }

    /// Hint the cache about the slot at `pos`.
    #[inline]
    pub(crate) fn prefetch(&self, pos: usize) {
        prefetch_read(&self.slots[pos]);
    }

    pub(crate) fn memory_bytes(&self) -> usize {
        self.slots.len() * std::mem::size_of::<u64>()
    }
}

#[inline(always)]
fn prefetch_read<T>(p: &T) {
    #[cfg(target_arch = "x86_64")]
    // SAFETY: prefetch is a hint and never faults; `p` is a valid reference.
    unsafe {
        use std::arch::x86_64::{_mm_prefetch, _MM_HINT_T0};
        _mm_prefetch(p as *const T as *const i8, _MM_HINT_T0);
    }
    #[cfg(not(target_arch = "x86_64"))]
    let _ = p;
}
