//! Parameter set, unified logical address space and block geometry.
//!
//! The unified logical space is laid out as `[Data | OccMap | H1 | H2 | ...]`.
//! Data and OccMap blocks together form hierarchy 0; hierarchy `i + 1` holds
//! the compressed counters of hierarchy `i`, `posmap_scale` entries per block.
//! Recursion stops at the first hierarchy small enough for its counters to be
//! kept on chip.

use std::fmt;
use std::ops::Range;

use serde::Serialize;

use crate::error::{Error, Result};

/// Geometry and policy knobs for one ORAM instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OramParams {
    /// Bytes per block.
    pub block_bytes: usize,
    /// Logical data blocks (working set / block size).
    pub data_blocks: u64,
    /// Physical block slots (capacity / block size). Must be a power of two.
    pub physical_slots: u64,
    /// Counters per position-map block.
    pub posmap_scale: u32,
    /// Largest hierarchy whose counters may be held on chip.
    pub onchip_entries: u64,
    pub plb_bytes: usize,
    pub stash_capacity: usize,
    /// Background eviction stops once the stash is at or below this size.
    pub stash_low_watermark: usize,
    /// Cycles between ORAM accesses in periodic mode; 0 means aperiodic.
    pub period: u64,
    pub rng_seed: u64,
    /// Width of the per-block individual counters in a compressed PosMap block.
    pub counter_bits: u32,
    /// Flat DRAM latency charged per access.
    pub dram_latency: u64,
}

impl Default for OramParams {
    fn default() -> Self {
        Self {
            block_bytes: 128,
            data_blocks: 1 << 15,
            physical_slots: 1 << 16,
            posmap_scale: 32,
            onchip_entries: 4096,
            plb_bytes: 32 * 1024,
            stash_capacity: 100,
            stash_low_watermark: 50,
            period: 0,
            rng_seed: 0,
            counter_bits: 14,
            dram_latency: 100,
        }
    }
}

const GROUP_COUNTER_BITS: usize = 64;

impl OramParams {
    /// Checks the per-field invariants. Capacity against the derived layout is
    /// checked by [`layout`].
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !self.physical_slots.is_power_of_two() {
            return fail(format!("physical_slots {} is not a power of two", self.physical_slots));
        }
        if self.block_bytes < 32 {
            return fail(format!("block_bytes {} < 32", self.block_bytes));
        }
        if self.posmap_scale < 2 {
            return fail(format!("posmap_scale {} < 2", self.posmap_scale));
        }
        if self.counter_bits == 0 || self.counter_bits > 32 {
            return fail(format!("counter_bits {} not in 1..=32", self.counter_bits));
        }
        let needed = GROUP_COUNTER_BITS + self.posmap_scale as usize * self.counter_bits as usize;
        if needed > 8 * self.block_bytes {
            return fail(format!(
                "posmap block needs {needed} bits but a block holds {}",
                8 * self.block_bytes
            ));
        }
        if self.onchip_entries == 0 {
            return fail("onchip_entries must be positive".into());
        }
        if self.data_blocks == 0 {
            return fail("data_blocks must be positive".into());
        }
        if self.stash_capacity == 0 {
            return fail("stash_capacity must be positive".into());
        }
        if self.stash_low_watermark >= self.stash_capacity {
            return fail(format!(
                "stash_low_watermark {} must be below stash_capacity {}",
                self.stash_low_watermark, self.stash_capacity
            ));
        }
        if self.plb_bytes < self.block_bytes {
            return fail(format!("plb_bytes {} smaller than one block", self.plb_bytes));
        }
        Ok(())
    }

    pub fn plb_lines(&self) -> usize {
        self.plb_bytes / self.block_bytes
    }

    /// Bits per byte times bytes per block: slots covered by one OccMap block.
    pub fn occmap_scaling_factor(&self) -> u64 {
        8 * self.block_bytes as u64
    }

    /// Picks `data_blocks` so that the Flat layout (data, OccMap and PosMap
    /// hierarchies) occupies as close to `num/den` of the physical slots as
    /// possible without exceeding it.
    pub fn with_utilization(mut self, num: u64, den: u64) -> Result<Self> {
        let target = self.physical_slots * num / den;
        let total_for = |p: &OramParams, n: u64| {
            let mut q = p.clone();
            q.data_blocks = n;
            level_sizes(&q, true).iter().sum::<u64>()
        };
        // total(n) is nondecreasing in n, so binary search the largest n that fits.
        let (mut lo, mut hi) = (1u64, target.max(1));
        if total_for(&self, lo) > target {
            return Err(Error::Config(format!(
                "utilization {num}/{den} leaves no room for data blocks"
            )));
        }
        while lo < hi {
            let mid = lo + (hi - lo + 1) / 2;
            if total_for(&self, mid) <= target {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
        self.data_blocks = lo;
        Ok(self)
    }

    /// Applies one `key=value` setting. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::Config(format!("bad value `{value}` for `{key}`"));
        let int = || parse_size(value).ok_or_else(bad);
        match key {
            "block_bytes" => self.block_bytes = int()? as usize,
            "data_blocks" => self.data_blocks = int()?,
            "physical_slots" => self.physical_slots = int()?,
            "posmap_scale" => self.posmap_scale = int()? as u32,
            "onchip_entries" => self.onchip_entries = int()?,
            "plb_bytes" => self.plb_bytes = int()? as usize,
            "stash_capacity" => self.stash_capacity = int()? as usize,
            "stash_low_watermark" => self.stash_low_watermark = int()? as usize,
            "period" => self.period = int()?,
            "rng_seed" => self.rng_seed = int()?,
            "counter_bits" => self.counter_bits = int()? as u32,
            "dram_latency" => self.dram_latency = int()?,
            "capacity_bytes" => self.physical_slots = int()? / self.block_bytes as u64,
            "working_set_bytes" => self.data_blocks = int()? / self.block_bytes as u64,
            _ => return Err(Error::Config(format!("unknown parameter `{key}`"))),
        }
        Ok(())
    }

    /// Parses a plain `key=value` config file body on top of `self`.
    /// Blank lines and `#` comments are ignored. Settings apply in file order,
    /// so `block_bytes` should precede the byte-sized keys that depend on it.
    pub fn apply_config(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                column: 1,
                message: format!("expected key=value, got `{line}`"),
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }
}

/// Parses a `0x` integer, or a decimal one with an optional K/M/G (binary)
/// suffix and trailing `B`.
pub fn parse_size(s: &str) -> Option<u64> {
    let s = s.trim();
    let lower = s.to_ascii_lowercase();
    if let Some(hex) = lower.strip_prefix("0x") {
        return u64::from_str_radix(hex, 16).ok();
    }
    let trimmed = lower.strip_suffix('b').unwrap_or(&lower);
    let (digits, mult) = match trimmed.chars().last()? {
        'k' => (&trimmed[..trimmed.len() - 1], 1u64 << 10),
        'm' => (&trimmed[..trimmed.len() - 1], 1 << 20),
        'g' => (&trimmed[..trimmed.len() - 1], 1 << 30),
        _ => (trimmed, 1),
    };
    digits.parse::<u64>().ok()?.checked_mul(mult)
}

fn level_sizes(params: &OramParams, with_occmap: bool) -> Vec<u64> {
    let occ = if with_occmap {
        params.physical_slots.div_ceil(params.occmap_scaling_factor())
    } else {
        0
    };
    let mut sizes = vec![params.data_blocks + occ];
    while *sizes.last().unwrap() > params.onchip_entries {
        let prev = *sizes.last().unwrap();
        sizes.push(prev.div_ceil(params.posmap_scale as u64));
    }
    sizes
}

/// Which part of the unified logical space a block belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Region {
    Data,
    OccMap,
    /// PosMap hierarchy `level`, always at least 1.
    PosMap(u32),
}

/// A logical block identity: region plus index within the region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct UnifiedAddr {
    pub region: Region,
    pub index: u64,
}

impl UnifiedAddr {
    pub fn data(index: u64) -> Self {
        Self { region: Region::Data, index }
    }
}

impl fmt::Display for UnifiedAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.region {
            Region::Data => write!(f, "D{}", self.index),
            Region::OccMap => write!(f, "O{}", self.index),
            Region::PosMap(l) => write!(f, "H{l}.{}", self.index),
        }
    }
}

/// A physical slot index in `[0, P)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct PhysicalPos(pub u64);

/// Exactly `block_bytes` bytes of plaintext.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BlockPayload(Vec<u8>);

impl BlockPayload {
    pub fn zeroed(block_bytes: usize) -> Self {
        Self(vec![0; block_bytes])
    }

    pub fn from_bytes(bytes: Vec<u8>, block_bytes: usize) -> Result<Self> {
        if bytes.len() != block_bytes {
            return Err(Error::Config(format!(
                "payload is {} bytes, block size is {block_bytes}",
                bytes.len()
            )));
        }
        Ok(Self(bytes))
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn as_mut_bytes(&mut self) -> &mut [u8] {
        &mut self.0
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.0
    }
}

/// Where the counter of a block is kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CounterHome {
    /// Entry in the on-chip final position map.
    OnChip(usize),
    /// Entry `slot` of the PosMap block with flat index `block`.
    Block { block: u64, slot: usize },
}

/// Region sizes and hierarchy structure derived from [`OramParams`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AddressLayout {
    pub block_bytes: usize,
    pub physical_slots: u64,
    pub data_blocks: u64,
    pub occmap_blocks: u64,
    pub posmap_scale: u64,
    /// Block count per hierarchy; `levels[0]` is data plus OccMap.
    levels: Vec<u64>,
    offsets: Vec<u64>,
}

/// Layout of a Flat ORAM instance (OccMap blocks appended to hierarchy 0).
pub fn layout(params: &OramParams) -> Result<AddressLayout> {
    AddressLayout::build(params, true)
}

/// Layout without an OccMap region, used by the inverse-map baseline.
pub fn hive_layout(params: &OramParams) -> Result<AddressLayout> {
    AddressLayout::build(params, false)
}

impl AddressLayout {
    fn build(params: &OramParams, with_occmap: bool) -> Result<Self> {
        params.validate()?;
        let levels = level_sizes(params, with_occmap);
        let mut offsets = Vec::with_capacity(levels.len());
        let mut acc = 0u64;
        for &s in &levels {
            offsets.push(acc);
            acc += s;
        }
        if acc >= params.physical_slots {
            return Err(Error::Config(format!(
                "{acc} logical blocks do not fit below utilization 1 in {} slots",
                params.physical_slots
            )));
        }
        Ok(Self {
            block_bytes: params.block_bytes,
            physical_slots: params.physical_slots,
            data_blocks: params.data_blocks,
            occmap_blocks: levels[0] - params.data_blocks,
            posmap_scale: params.posmap_scale as u64,
            levels,
            offsets,
        })
    }

    /// Hierarchies in DRAM, data hierarchy included. The on-chip map holds
    /// the counters of the last one.
    pub fn hierarchy_count(&self) -> usize {
        self.levels.len()
    }

    pub fn level_sizes(&self) -> &[u64] {
        &self.levels
    }

    pub fn total_blocks(&self) -> u64 {
        self.levels.iter().sum()
    }

    /// Entries held by the on-chip final position map.
    pub fn onchip_len(&self) -> usize {
        *self.levels.last().unwrap() as usize
    }

    pub fn top_level(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn utilization(&self) -> f64 {
        self.total_blocks() as f64 / self.physical_slots as f64
    }

    pub fn level_range(&self, level: usize) -> Range<u64> {
        self.offsets[level]..self.offsets[level] + self.levels[level]
    }

    pub fn occmap_range(&self) -> Range<u64> {
        self.data_blocks..self.data_blocks + self.occmap_blocks
    }

    pub fn level_of(&self, flat: u64) -> usize {
        debug_assert!(flat < self.total_blocks());
        self.offsets.partition_point(|&o| o <= flat) - 1
    }

    pub fn flat(&self, addr: UnifiedAddr) -> Result<u64> {
        let (base, size) = match addr.region {
            Region::Data => (0, self.data_blocks),
            Region::OccMap => (self.data_blocks, self.occmap_blocks),
            Region::PosMap(l) if l >= 1 && (l as usize) < self.levels.len() => {
                (self.offsets[l as usize], self.levels[l as usize])
            }
            Region::PosMap(_) => (0, 0),
        };
        if addr.index >= size {
            return Err(Error::AddressOutOfRange { addr: addr.index, limit: size });
        }
        Ok(base + addr.index)
    }

    pub fn unified(&self, flat: u64) -> UnifiedAddr {
        if flat < self.data_blocks {
            return UnifiedAddr::data(flat);
        }
        if flat < self.data_blocks + self.occmap_blocks {
            return UnifiedAddr { region: Region::OccMap, index: flat - self.data_blocks };
        }
        let level = self.level_of(flat);
        UnifiedAddr { region: Region::PosMap(level as u32), index: flat - self.offsets[level] }
    }

    pub fn is_map_block(&self, flat: u64) -> bool {
        flat >= self.data_blocks
    }

    pub fn counter_home(&self, flat: u64) -> CounterHome {
        let level = self.level_of(flat);
        let local = flat - self.offsets[level];
        if level == self.top_level() {
            CounterHome::OnChip(local as usize)
        } else {
            CounterHome::Block {
                block: self.offsets[level + 1] + local / self.posmap_scale,
                slot: (local % self.posmap_scale) as usize,
            }
        }
    }

    /// Flat indices whose counters live in PosMap block `parent`.
    pub fn children(&self, parent: u64) -> Range<u64> {
        let level = self.level_of(parent);
        debug_assert!(level >= 1);
        let local = parent - self.offsets[level];
        let below = self.level_range(level - 1);
        let start = below.start + local * self.posmap_scale;
        start..(start + self.posmap_scale).min(below.end)
    }
}
