//! Occupancy map: one bit per physical slot, stored in ordinary unified
//! blocks at the end of hierarchy 0.
//!
//! Bit `k` of byte `j` in OccMap block `i` covers slot `i * 8B + 8j + k`.

use crate::controller::Controller;
use crate::error::{Error, Result};
use crate::params::{PhysicalPos, Region, UnifiedAddr};
use crate::posmap::PlbKey;

/// Which OccMap block and bit hold the occupancy of one slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OccBitLocator {
    pub occ_block: UnifiedAddr,
    pub bit_offset: u64,
}

/// Maps a slot to its occupancy bit for the given block size and slot count.
pub fn locate(pos: PhysicalPos, block_bytes: usize, physical_slots: u64) -> Result<OccBitLocator> {
    if pos.0 >= physical_slots {
        return Err(Error::OutOfRange { pos: pos.0, len: physical_slots });
    }
    let scale = 8 * block_bytes as u64;
    Ok(OccBitLocator {
        occ_block: UnifiedAddr { region: Region::OccMap, index: pos.0 / scale },
        bit_offset: pos.0 % scale,
    })
}

pub(crate) fn get_bit(bytes: &[u8], bit: u64) -> bool {
    bytes[(bit / 8) as usize] >> (bit % 8) & 1 == 1
}

pub(crate) fn set_bit(bytes: &mut [u8], bit: u64, value: bool) {
    let mask = 1u8 << (bit % 8);
    if value {
        bytes[(bit / 8) as usize] |= mask;
    } else {
        bytes[(bit / 8) as usize] &= !mask;
    }
}

impl Controller {
    fn occ_key(&self, pos: PhysicalPos) -> Result<(PlbKey, u64)> {
        let loc = locate(pos, self.params.block_bytes, self.layout.physical_slots)?;
        Ok((PlbKey::Block(self.layout.flat(loc.occ_block)?), loc.bit_offset))
    }

    /// Reads a slot's occupancy bit through the PLB. Never writes DRAM.
    pub fn is_occupied(&mut self, pos: PhysicalPos) -> Result<bool> {
        let (key, bit) = self.occ_key(pos)?;
        self.with_block(key, false, |b| get_bit(b, bit))
    }

    /// Updates a slot's occupancy bit. The OccMap block becomes dirty and is
    /// relocated when it eventually leaves the PLB. If the block is the one
    /// currently being evicted, the update lands in its in-flight payload.
    pub fn set_occupied(&mut self, pos: PhysicalPos, value: bool) -> Result<()> {
        let (key, bit) = self.occ_key(pos)?;
        self.with_block(key, true, |b| set_bit(b, bit, value))
    }

    /// Number of occupied bits across the whole map. Audit only: no PLB or
    /// stash side effects and no DRAM accounting.
    pub fn occupied_count(&self) -> Result<u64> {
        let mut n = 0;
        for flat in self.layout.occmap_range() {
            let bytes = self.peek_block(flat)?;
            n += bytes.iter().map(|b| b.count_ones() as u64).sum::<u64>();
        }
        Ok(n)
    }

    /// Occupancy bit of a slot without side effects.
    pub fn peek_occupied(&self, pos: PhysicalPos) -> Result<bool> {
        let loc = locate(pos, self.params.block_bytes, self.layout.physical_slots)?;
        let bytes = self.peek_block(self.layout.flat(loc.occ_block)?)?;
        Ok(get_bit(&bytes, loc.bit_offset))
    }
}
