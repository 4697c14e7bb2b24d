//! Recursive compressed position map and the PLB that caches map blocks.
//!
//! A block's position is never stored. It is recomputed as
//! `prf(block, counter)` from the block's effective counter, which lives either
//! in the on-chip final map or in a PosMap block one hierarchy up. PosMap
//! blocks are ordinary unified blocks: they are sealed under their own
//! counter, cached in the PLB, and relocated through the stash when dirty.

use std::collections::{BTreeMap, HashMap};

use crate::controller::{Controller, StashEntry};
use crate::crypto::TagMismatch;
use crate::error::{Error, Result};
use crate::params::{BlockPayload, CounterHome, PhysicalPos, UnifiedAddr};

/// Group counter plus one narrow individual counter per child block.
///
/// Encoded as the group counter (`u64` LE) followed by the individual
/// counters packed `width` bits each, least significant bit first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PosMapBlock {
    pub group_counter: u64,
    pub individual_counters: Vec<u32>,
    width: u32,
}

/// Result of incrementing one child's counter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bump {
    pub counter: u64,
    /// Set when the narrow counter overflowed: every other child's slot and
    /// its effective counter before the group counter moved.
    pub relocated: Option<Vec<(usize, u64)>>,
}

impl PosMapBlock {
    pub fn new(scale: usize, width: u32) -> Self {
        Self { group_counter: 0, individual_counters: vec![0; scale], width }
    }

    pub fn decode(bytes: &[u8], scale: usize, width: u32) -> Self {
        let group_counter = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        let individual_counters = (0..scale).map(|j| read_bits(&bytes[8..], j * width as usize, width)).collect();
        Self { group_counter, individual_counters, width }
    }

    pub fn encode_into(&self, bytes: &mut [u8]) {
        bytes[..8].copy_from_slice(&self.group_counter.to_le_bytes());
        for (j, &c) in self.individual_counters.iter().enumerate() {
            write_bits(&mut bytes[8..], j * self.width as usize, self.width, c);
        }
    }

    fn max_individual(&self) -> u32 {
        ((1u64 << self.width) - 1) as u32
    }

    pub fn effective(&self, j: usize) -> u64 {
        (self.group_counter << self.width) | self.individual_counters[j] as u64
    }

    /// Increments child `j`. On narrow-counter overflow the group counter
    /// moves up and all individual counters restart at zero, which changes
    /// the implied position of every sibling.
    pub fn bump(&mut self, j: usize) -> Bump {
        if self.individual_counters[j] < self.max_individual() {
            self.individual_counters[j] += 1;
            return Bump { counter: self.effective(j), relocated: None };
        }
        let before: Vec<(usize, u64)> = (0..self.individual_counters.len())
            .filter(|&k| k != j)
            .map(|k| (k, self.effective(k)))
            .collect();
        self.group_counter += 1;
        self.individual_counters.iter_mut().for_each(|c| *c = 0);
        Bump { counter: self.effective(j), relocated: Some(before) }
    }
}

fn read_bits(bytes: &[u8], start: usize, width: u32) -> u32 {
    let mut v = 0u32;
    for i in 0..width as usize {
        let bit = start + i;
        if bytes[bit / 8] >> (bit % 8) & 1 == 1 {
            v |= 1 << i;
        }
    }
    v
}

fn write_bits(bytes: &mut [u8], start: usize, width: u32, value: u32) {
    for i in 0..width as usize {
        let bit = start + i;
        let mask = 1u8 << (bit % 8);
        if value >> i & 1 == 1 {
            bytes[bit / 8] |= mask;
        } else {
            bytes[bit / 8] &= !mask;
        }
    }
}

/// What a PLB line caches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PlbKey {
    /// A unified map block (OccMap or PosMap), by flat index.
    Block(u64),
    /// A fixed-location inverse-map block of the baseline scheme.
    Inverse(u64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlbLine {
    pub payload: Vec<u8>,
    pub dirty: bool,
    /// Slot the line was fetched from.
    pub pos: Option<PhysicalPos>,
}

/// Fully associative LRU cache of map blocks, one block per line.
#[derive(Debug)]
pub struct Plb {
    capacity: usize,
    lines: HashMap<PlbKey, (PlbLine, u64)>,
    lru: BTreeMap<u64, PlbKey>,
    clock: u64,
    pub hits: u64,
    pub misses: u64,
    pub dirty_evictions: u64,
    pub clean_evictions: u64,
}

impl Plb {
    pub fn new(capacity_lines: usize) -> Self {
        assert!(capacity_lines > 0);
        Self {
            capacity: capacity_lines,
            lines: HashMap::with_capacity(capacity_lines + 1),
            lru: BTreeMap::new(),
            clock: 0,
            hits: 0,
            misses: 0,
            dirty_evictions: 0,
            clean_evictions: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    pub fn contains(&self, key: &PlbKey) -> bool {
        self.lines.contains_key(key)
    }

    fn touch(&mut self, key: PlbKey) {
        self.clock += 1;
        let (_, stamp) = self.lines.get_mut(&key).unwrap();
        self.lru.remove(stamp);
        *stamp = self.clock;
        self.lru.insert(self.clock, key);
    }

    /// Counted lookup: a hit promotes the line to most recently used.
    pub fn access(&mut self, key: &PlbKey) -> Option<&mut PlbLine> {
        if self.lines.contains_key(key) {
            self.hits += 1;
            self.touch(*key);
            self.lines.get_mut(key).map(|(l, _)| l)
        } else {
            self.misses += 1;
            None
        }
    }

    /// Uncounted lookup that leaves the LRU order alone.
    pub fn peek(&self, key: &PlbKey) -> Option<&PlbLine> {
        self.lines.get(key).map(|(l, _)| l)
    }

    pub fn peek_mut(&mut self, key: &PlbKey) -> Option<&mut PlbLine> {
        self.lines.get_mut(key).map(|(l, _)| l)
    }

    /// Inserts a line as most recently used. If that overflows the cache, the
    /// least recently used line is removed; it is returned only if dirty.
    pub fn install(&mut self, key: PlbKey, line: PlbLine) -> Option<(PlbKey, PlbLine)> {
        debug_assert!(!self.lines.contains_key(&key));
        self.clock += 1;
        self.lines.insert(key, (line, self.clock));
        self.lru.insert(self.clock, key);
        if self.lines.len() > self.capacity {
            self.evict_victim()
        } else {
            None
        }
    }

    /// Removes the least recently used line. Clean victims are dropped since
    /// memory already holds a valid copy; dirty ones are handed back.
    pub fn evict_victim(&mut self) -> Option<(PlbKey, PlbLine)> {
        let (_, key) = self.lru.pop_first()?;
        let (line, _) = self.lines.remove(&key).unwrap();
        if line.dirty {
            self.dirty_evictions += 1;
            Some((key, line))
        } else {
            self.clean_evictions += 1;
            None
        }
    }

    pub fn dirty_lines(&self) -> usize {
        self.lines.values().filter(|(l, _)| l.dirty).count()
    }

    pub fn hit_rate(&self) -> f64 {
        let n = self.hits + self.misses;
        if n == 0 {
            0.0
        } else {
            self.hits as f64 / n as f64
        }
    }
}

impl Controller {
    pub(crate) fn position(&self, flat: u64, counter: u64) -> PhysicalPos {
        PhysicalPos(self.crypto.prf_position(flat, counter, self.layout.physical_slots))
    }

    pub(crate) fn counter_of(&mut self, flat: u64) -> Result<u64> {
        match self.layout.counter_home(flat) {
            CounterHome::OnChip(i) => Ok(self.onchip[i]),
            CounterHome::Block { block, slot } => {
                let (scale, width) = (self.layout.posmap_scale as usize, self.params.counter_bits);
                self.with_block(PlbKey::Block(block), false, |bytes| {
                    PosMapBlock::decode(bytes, scale, width).effective(slot)
                })
            }
        }
    }

    /// Current `(position, counter)` of a logical block, walking the PosMap
    /// hierarchies top-down through the PLB. Only ever reads DRAM.
    pub fn resolve(&mut self, addr: UnifiedAddr) -> Result<(PhysicalPos, u64)> {
        let flat = self.layout.flat(addr)?;
        let c = self.counter_of(flat)?;
        Ok((self.position(flat, c), c))
    }

    /// Increments a block's effective counter and returns the new value.
    /// Marks the containing PosMap block dirty.
    pub(crate) fn bump_counter(&mut self, flat: u64) -> Result<u64> {
        match self.layout.counter_home(flat) {
            CounterHome::OnChip(i) => {
                self.onchip[i] += 1;
                Ok(self.onchip[i])
            }
            CounterHome::Block { block, slot } => {
                let (scale, width) = (self.layout.posmap_scale as usize, self.params.counter_bits);
                let bump = self.with_block(PlbKey::Block(block), true, |bytes| {
                    let mut pm = PosMapBlock::decode(bytes, scale, width);
                    let b = pm.bump(slot);
                    pm.encode_into(bytes);
                    b
                })?;
                if let Some(siblings) = bump.relocated {
                    self.stats.counter_overflows += 1;
                    let children = self.layout.children(block);
                    for (k, old) in siblings {
                        let child = children.start + k as u64;
                        if child < children.end {
                            self.orphan_sibling(child, old)?;
                        }
                    }
                }
                Ok(bump.counter)
            }
        }
    }

    /// After a group-counter overflow a sibling's counter no longer points at
    /// the slot holding it. Pull it on chip so it gets re-evicted.
    fn orphan_sibling(&mut self, flat: u64, old_counter: u64) -> Result<()> {
        self.recent_positions.remove(&flat);
        let pos = self.position(flat, old_counter);
        // a lazily unset old slot must come from the counter before the jump
        if let Some(e) = self.in_flight.as_mut().filter(|e| e.addr == flat) {
            e.old_pos.get_or_insert(pos);
            return Ok(());
        }
        if let Some(e) = self.stash.get_mut(flat) {
            e.old_pos.get_or_insert(pos);
            return Ok(());
        }
        if let Some(line) = self.plb.peek_mut(&PlbKey::Block(flat)) {
            line.dirty = true;
            return Ok(());
        }
        let sealed = self.dram.read(pos)?;
        let payload = self
            .crypto
            .open(&sealed, flat, old_counter)
            .map_err(|TagMismatch| Error::Integrity { pos: pos.0 })?;
        self.stash.push_internal(StashEntry {
            addr: flat,
            old_pos: Some(pos),
            payload: BlockPayload::from_bytes(payload, self.params.block_bytes)?,
            attempts: 0,
        });
        self.note_stash_size();
        Ok(())
    }

    /// Runs `f` on the authoritative copy of a map block: the in-flight
    /// eviction entry, a stash entry, a PLB line, or (on a miss) a freshly
    /// fetched and verified copy installed into the PLB.
    pub(crate) fn with_block<R>(&mut self, key: PlbKey, write: bool, f: impl FnOnce(&mut [u8]) -> R) -> Result<R> {
        if let PlbKey::Block(flat) = key {
            if let Some(e) = self.in_flight.as_mut().filter(|e| e.addr == flat) {
                return Ok(f(e.payload.as_mut_bytes()));
            }
            if let Some(e) = self.stash.get_mut(flat) {
                return Ok(f(e.payload.as_mut_bytes()));
            }
        }
        if let Some(line) = self.plb.access(&key) {
            line.dirty |= write;
            return Ok(f(&mut line.payload));
        }
        let (payload, pos) = match key {
            PlbKey::Block(flat) => {
                let c = self.counter_of(flat)?;
                let pos = self.position(flat, c);
                let sealed = self.dram.read(pos)?;
                let p = self.crypto.open(&sealed, flat, c).map_err(|TagMismatch| Error::Integrity { pos: pos.0 })?;
                (p, pos)
            }
            PlbKey::Inverse(i) => self.fetch_inverse(i)?,
        };
        let mut line = PlbLine { payload, dirty: write, pos: Some(pos) };
        let out = f(&mut line.payload);
        self.plb_install(key, line)?;
        Ok(out)
    }

    pub(crate) fn plb_install(&mut self, key: PlbKey, line: PlbLine) -> Result<()> {
        if let Some((vkey, victim)) = self.plb.install(key, line) {
            match vkey {
                PlbKey::Block(flat) => {
                    self.stash.push_internal(StashEntry {
                        addr: flat,
                        old_pos: victim.pos,
                        payload: BlockPayload::from_bytes(victim.payload, self.params.block_bytes)?,
                        attempts: 0,
                    });
                    self.note_stash_size();
                }
                PlbKey::Inverse(i) => self.writeback_inverse(i, victim.payload)?,
            }
        }
        Ok(())
    }

    /// Side-effect-free copy of a map block for audits: no PLB fill, no
    /// stash change, no DRAM accounting.
    pub(crate) fn peek_block(&self, flat: u64) -> Result<Vec<u8>> {
        if let Some(e) = self.in_flight.as_ref().filter(|e| e.addr == flat) {
            return Ok(e.payload.as_bytes().to_vec());
        }
        if let Some(e) = self.stash.get(flat) {
            return Ok(e.payload.as_bytes().to_vec());
        }
        if let Some(line) = self.plb.peek(&PlbKey::Block(flat)) {
            return Ok(line.payload.clone());
        }
        let c = self.peek_counter(flat)?;
        let pos = self.position(flat, c);
        let sealed = self.dram.peek(pos)?;
        self.crypto.open(&sealed, flat, c).map_err(|TagMismatch| Error::Integrity { pos: pos.0 })
    }

    pub(crate) fn peek_counter(&self, flat: u64) -> Result<u64> {
        match self.layout.counter_home(flat) {
            CounterHome::OnChip(i) => Ok(self.onchip[i]),
            CounterHome::Block { block, slot } => {
                let bytes = self.peek_block(block)?;
                Ok(PosMapBlock::decode(&bytes, self.layout.posmap_scale as usize, self.params.counter_bits)
                    .effective(slot))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn narrow_overflow_moves_group_counter() {
        let mut b = PosMapBlock::new(4, 2);
        b.individual_counters[1] = 2;
        for k in 1..=3 {
            let r = b.bump(0);
            assert_eq!(r.counter, k);
            assert!(r.relocated.is_none());
        }
        let r = b.bump(0);
        assert_eq!(r.counter, 4);
        assert_eq!(b.group_counter, 1);
        assert_eq!(b.individual_counters, vec![0; 4]);
        assert_eq!(r.relocated.unwrap(), vec![(1, 2), (2, 0), (3, 0)]);
        // every sibling's effective counter went up
        for k in 1..4 {
            assert_eq!(b.effective(k), 4);
        }
    }

    #[test]
    fn k_bumps_give_counter_k() {
        let mut b = PosMapBlock::new(32, 14);
        for k in 1..=100 {
            assert_eq!(b.bump(5).counter, k);
        }
        assert_eq!(b.effective(4), 0);
    }

    proptest! {
        #[test]
        fn codec_round_trip(group in any::<u32>(), width in 1u32..=16, raw in proptest::collection::vec(any::<u32>(), 2..40)) {
            let scale = raw.len();
            prop_assume!(64 + scale * width as usize <= 8 * 128);
            let mask = ((1u64 << width) - 1) as u32;
            let blk = PosMapBlock {
                group_counter: group as u64,
                individual_counters: raw.iter().map(|c| c & mask).collect(),
                width,
            };
            let mut bytes = vec![0xFFu8; 128];
            blk.encode_into(&mut bytes);
            prop_assert_eq!(PosMapBlock::decode(&bytes, scale, width), blk);
        }

        #[test]
        fn counters_never_decrease(width in 1u32..=4, bumps in proptest::collection::vec(0usize..4, 1..200)) {
            let mut b = PosMapBlock::new(4, width);
            let mut last: Vec<u64> = (0..4).map(|k| b.effective(k)).collect();
            for j in bumps {
                let r = b.bump(j);
                prop_assert_eq!(r.counter, last[j] + 1);
                for k in 0..4 {
                    prop_assert!(b.effective(k) >= last[k]);
                    last[k] = b.effective(k);
                }
            }
        }
    }

    fn line(dirty: bool) -> PlbLine {
        PlbLine { payload: vec![0; 4], dirty, pos: None }
    }

    #[test]
    fn lru_eviction() {
        let mut p = Plb::new(2);
        assert!(p.install(PlbKey::Block(1), line(false)).is_none());
        assert!(p.install(PlbKey::Block(2), line(true)).is_none());
        assert!(p.access(&PlbKey::Block(1)).is_some());
        // 2 is now LRU and dirty
        let v = p.install(PlbKey::Block(3), line(false)).unwrap();
        assert_eq!(v.0, PlbKey::Block(2));
        assert_eq!(p.len(), 2);
        // 1 is LRU and clean: dropped silently
        assert!(p.install(PlbKey::Block(4), line(false)).is_none());
        assert!(!p.contains(&PlbKey::Block(1)));
        assert_eq!((p.dirty_evictions, p.clean_evictions), (1, 1));
    }

    #[test]
    fn hit_miss_accounting() {
        let mut p = Plb::new(4);
        assert!(p.access(&PlbKey::Inverse(0)).is_none());
        p.install(PlbKey::Inverse(0), line(false));
        assert!(p.access(&PlbKey::Inverse(0)).is_some());
        assert!(p.peek(&PlbKey::Inverse(0)).is_some());
        assert_eq!((p.hits, p.misses), (1, 1));
        assert_eq!(p.hit_rate(), 0.5);
    }

    #[test]
    fn exactly_one_eviction_past_capacity() {
        let mut p = Plb::new(8);
        for k in 0..8 {
            assert!(p.install(PlbKey::Block(k), line(true)).is_none());
        }
        assert_eq!(p.install(PlbKey::Block(8), line(true)).map(|v| v.0), Some(PlbKey::Block(0)));
        assert_eq!(p.len(), 8);
        assert_eq!(p.dirty_lines(), 8);
    }
}
