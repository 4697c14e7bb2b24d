//! Inverse-position-map baseline. Each physical slot has an entry naming
//! the logical block last placed there. The map lives in a fixed DRAM region
//! after the `P` data slots and is updated in place, never relocated. A slot
//! is occupied iff its entry names a block whose forward position is that
//! same slot.

use crate::controller::Controller;
use crate::crypto::TagMismatch;
use crate::error::{Error, Result};
use crate::params::PhysicalPos;
use crate::posmap::PlbKey;

/// Entries per inverse block when each entry takes `ceil(log2 n_total)` bits.
pub fn inverse_entries_per_block(block_bytes: usize, n_total: u64) -> u64 {
    8 * block_bytes as u64 / bits_for(n_total.max(2) - 1).max(1) as u64
}

/// Bits needed to write `v` in binary.
fn bits_for(v: u64) -> u32 {
    64 - v.leading_zeros()
}

/// Geometry and on-chip counters of the inverse region.
#[derive(Debug, Clone)]
pub struct InverseMap {
    /// Bits per entry. One value above the largest block id is reserved as
    /// the invalid marker.
    pub width: u32,
    pub per_block: u64,
    pub blocks: u64,
    /// First DRAM slot of the region.
    pub base: u64,
    pub counters: Vec<u64>,
}

impl InverseMap {
    pub fn new(block_bytes: usize, physical_slots: u64, n_total: u64) -> Self {
        let width = bits_for(n_total);
        let per_block = 8 * block_bytes as u64 / width as u64;
        let blocks = physical_slots.div_ceil(per_block);
        Self { width, per_block, blocks, base: physical_slots, counters: vec![0; blocks as usize] }
    }

    pub fn invalid(&self) -> u64 {
        (1u64 << self.width) - 1
    }

    /// Inverse block and entry index covering `pos`.
    pub fn locate(&self, pos: PhysicalPos) -> (u64, usize) {
        (pos.0 / self.per_block, (pos.0 % self.per_block) as usize)
    }

    /// Block id the inverse blocks are sealed under, disjoint from unified
    /// indices and the filler id.
    pub fn seal_id(&self, i: u64) -> u64 {
        u64::MAX - 1 - i
    }

    pub fn get(&self, bytes: &[u8], j: usize) -> Option<u64> {
        let start = j * self.width as usize;
        let mut v = 0u64;
        for k in 0..self.width as usize {
            let bit = start + k;
            if bytes[bit / 8] >> (bit % 8) & 1 == 1 {
                v |= 1 << k;
            }
        }
        (v != self.invalid()).then_some(v)
    }

    pub fn set(&self, bytes: &mut [u8], j: usize, value: Option<u64>) {
        let v = value.unwrap_or(self.invalid());
        let start = j * self.width as usize;
        for k in 0..self.width as usize {
            let bit = start + k;
            let mask = 1u8 << (bit % 8);
            if v >> k & 1 == 1 {
                bytes[bit / 8] |= mask;
            } else {
                bytes[bit / 8] &= !mask;
            }
        }
    }
}

impl Controller {
    fn inv(&self) -> &InverseMap {
        self.inverse.as_ref().expect("inverse map present in baseline scheme")
    }

    pub(crate) fn initialize_inverse(&mut self, occupied: &[bool], slot_of: &[u64]) -> Result<()> {
        let map = self.inv().clone();
        let bb = self.params.block_bytes;
        let mut blocks = vec![vec![0u8; bb]; map.blocks as usize];
        for b in blocks.iter_mut() {
            for j in 0..map.per_block as usize {
                map.set(b, j, None);
            }
        }
        for (flat, &s) in slot_of.iter().enumerate() {
            debug_assert!(occupied[s as usize]);
            let (i, j) = map.locate(PhysicalPos(s));
            map.set(&mut blocks[i as usize], j, Some(flat as u64));
        }
        for (i, b) in blocks.iter().enumerate() {
            let sealed = self.crypto.seal(map.seal_id(i as u64), 0, b);
            self.dram.write(PhysicalPos(map.base + i as u64), &sealed)?;
        }
        Ok(())
    }

    pub(crate) fn fetch_inverse(&mut self, i: u64) -> Result<(Vec<u8>, PhysicalPos)> {
        let (id, ctr, pos) = {
            let m = self.inv();
            (m.seal_id(i), m.counters[i as usize], PhysicalPos(m.base + i))
        };
        let sealed = self.dram.read(pos)?;
        let payload = self.crypto.open(&sealed, id, ctr).map_err(|TagMismatch| Error::Integrity { pos: pos.0 })?;
        Ok((payload, pos))
    }

    /// Writes a dirty inverse block back to its fixed slot under the next
    /// on-chip counter.
    pub(crate) fn writeback_inverse(&mut self, i: u64, payload: Vec<u8>) -> Result<()> {
        let (id, ctr, pos) = {
            let m = self.inverse.as_mut().expect("inverse map present in baseline scheme");
            m.counters[i as usize] += 1;
            (m.seal_id(i), m.counters[i as usize], PhysicalPos(m.base + i))
        };
        let sealed = self.crypto.seal(id, ctr, &payload);
        self.dram.write(pos, &sealed)?;
        self.stats.inverse_writebacks += 1;
        Ok(())
    }

    fn inverse_entry(&mut self, pos: PhysicalPos) -> Result<Option<u64>> {
        let map = self.inv().clone();
        let (i, j) = map.locate(pos);
        self.with_block(PlbKey::Inverse(i), false, |b| map.get(b, j))
    }

    fn set_inverse_entry(&mut self, pos: PhysicalPos, value: Option<u64>) -> Result<()> {
        let map = self.inv().clone();
        let (i, j) = map.locate(pos);
        self.with_block(PlbKey::Inverse(i), true, |b| map.set(b, j, value))
    }

    /// Dual lookup: the slot is occupied iff its inverse entry names a block
    /// whose forward mapping still points here.
    pub fn hive_collision_check(&mut self, pos: PhysicalPos) -> Result<bool> {
        let Some(owner) = self.inverse_entry(pos)? else { return Ok(false) };
        let c = self.counter_of(owner)?;
        Ok(self.position(owner, c) == pos)
    }

    /// Bookkeeping after block `flat` moves from `old` into `new`.
    pub(crate) fn hive_record_move(&mut self, flat: u64, old: Option<PhysicalPos>, new: PhysicalPos) -> Result<()> {
        self.set_inverse_entry(new, Some(flat))?;
        if let Some(old) = old.filter(|&o| o != new) {
            // the old slot may already have been taken over by another block
            if self.inverse_entry(old)? == Some(flat) {
                self.set_inverse_entry(old, None)?;
            }
        }
        Ok(())
    }

    /// Inverse entry of a slot without side effects.
    pub fn peek_inverse(&self, pos: PhysicalPos) -> Result<Option<u64>> {
        let map = self.inv();
        let (i, j) = map.locate(pos);
        if let Some(line) = self.plb.peek(&PlbKey::Inverse(i)) {
            return Ok(map.get(&line.payload, j));
        }
        let at = PhysicalPos(map.base + i);
        let sealed = self.dram.peek(at)?;
        let bytes = self
            .crypto
            .open(&sealed, map.seal_id(i), map.counters[i as usize])
            .map_err(|TagMismatch| Error::Integrity { pos: at.0 })?;
        Ok(map.get(&bytes, j))
    }
}
