//! The write-only ORAM engine: initialization, read, write, stash eviction
//! with occupancy-map collision avoidance, background eviction and the
//! periodic variant. The inverse-map baseline shares this engine and swaps
//! only the collision check and the move bookkeeping (see `hive`).

use std::collections::{BTreeMap, HashMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use crate::crypto::{BlockCrypto, KeyMaterial, SealedBlock, TagMismatch, DUMMY_BLOCK};
use crate::error::{Error, Result};
use crate::hive::InverseMap;
use crate::memory::Dram;
use crate::occmap;
use crate::params::{
    hive_layout, layout, AddressLayout, BlockPayload, CounterHome, OramParams, PhysicalPos, Region, UnifiedAddr,
};
use crate::posmap::{Plb, PlbKey, PosMapBlock};

/// Which collision-avoidance structure the engine uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// Occupancy bitmap stored as unified blocks.
    Flat,
    /// Inverse position map at a fixed DRAM region.
    Hive,
}

/// A dirty block waiting for a random slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StashEntry {
    /// Flat unified index.
    pub addr: u64,
    /// Slot still holding the block's previous copy. `None` means not yet
    /// looked up; it is then derived from the unchanged counter.
    pub old_pos: Option<PhysicalPos>,
    pub payload: BlockPayload,
    /// Eviction attempts spent on this entry so far.
    pub attempts: u32,
}

/// Stash with per-address uniqueness. Internally generated entries (dirty
/// map blocks, relocated siblings) drain before external ones.
#[derive(Debug, Default)]
pub struct Stash {
    entries: HashMap<u64, (StashEntry, bool)>,
    internal: VecDeque<u64>,
    external: VecDeque<u64>,
}

impl Stash {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, addr: u64) -> bool {
        self.entries.contains_key(&addr)
    }

    pub fn get(&self, addr: u64) -> Option<&StashEntry> {
        self.entries.get(&addr).map(|(e, _)| e)
    }

    pub fn get_mut(&mut self, addr: u64) -> Option<&mut StashEntry> {
        self.entries.get_mut(&addr).map(|(e, _)| e)
    }

    pub fn internal_len(&self) -> usize {
        self.internal.len()
    }

    pub(crate) fn push_internal(&mut self, entry: StashEntry) {
        debug_assert!(!self.contains(entry.addr));
        self.internal.push_back(entry.addr);
        self.entries.insert(entry.addr, (entry, true));
    }

    /// Adds an external write. An existing entry for the address keeps its
    /// queue place and old position and takes the new payload.
    pub(crate) fn push_external(&mut self, entry: StashEntry) {
        if let Some((e, _)) = self.entries.get_mut(&entry.addr) {
            e.payload = entry.payload;
            return;
        }
        self.external.push_back(entry.addr);
        self.entries.insert(entry.addr, (entry, false));
    }

    fn pop_next(&mut self) -> Option<(StashEntry, bool)> {
        let addr = self.internal.pop_front().or_else(|| self.external.pop_front())?;
        self.entries.remove(&addr)
    }

    fn requeue_front(&mut self, entry: StashEntry, internal: bool) {
        if internal {
            self.internal.push_front(entry.addr);
        } else {
            self.external.push_front(entry.addr);
        }
        self.entries.insert(entry.addr, (entry, internal));
    }

    pub fn addrs(&self) -> impl Iterator<Item = u64> + '_ {
        self.entries.keys().copied()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ControllerStats {
    pub requests: u64,
    pub reads: u64,
    pub writes: u64,
    /// Blocks placed in a vacant slot.
    pub evictions: u64,
    pub eviction_attempts: u64,
    pub collisions: u64,
    pub background_eviction_events: u64,
    pub background_evictions: u64,
    /// Largest stash size seen by an external request.
    pub stash_peak: usize,
    /// Largest stash size at any point, avalanche overshoot included.
    pub stash_peak_internal: usize,
    /// Attempts per completed eviction.
    pub attempts_histogram: BTreeMap<u32, u64>,
    /// Periodic-mode decoy rewrites (read and idle ticks).
    pub decoy_writes: u64,
    pub inverse_writebacks: u64,
    pub counter_overflows: u64,
    pub init_attempts: u64,
    pub ticks: u64,
}

/// One external request for the periodic engine.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Request {
    Read(u64),
    Write(u64, BlockPayload),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TickOutcome {
    Read(BlockPayload),
    Written,
    Idle,
    /// Background eviction owned the tick; the request was not served.
    Deferred(Option<Request>),
}

pub struct Controller {
    pub(crate) params: OramParams,
    pub(crate) scheme: Scheme,
    pub(crate) layout: AddressLayout,
    pub(crate) crypto: BlockCrypto,
    pub(crate) dram: Dram,
    pub(crate) onchip: Vec<u64>,
    pub(crate) plb: Plb,
    pub(crate) stash: Stash,
    pub(crate) in_flight: Option<StashEntry>,
    /// Positions returned by reads, consulted when the block is written.
    pub(crate) recent_positions: HashMap<u64, PhysicalPos>,
    pub(crate) inverse: Option<InverseMap>,
    pub(crate) stats: ControllerStats,
    rng: ChaCha20Rng,
    bg_active: bool,
    bg_steps: u64,
}

fn integrity(pos: PhysicalPos) -> impl Fn(TagMismatch) -> Error {
    move |_| Error::Integrity { pos: pos.0 }
}

impl Controller {
    /// Builds the layout, places every logical block in a vacant slot and
    /// fills DRAM. Slots left unassigned hold sealed filler blocks so that
    /// every slot can be decoy-rewritten.
    pub fn new(params: OramParams, scheme: Scheme) -> Result<Self> {
        let layout = match scheme {
            Scheme::Flat => layout(&params)?,
            Scheme::Hive => hive_layout(&params)?,
        };
        let keys = KeyMaterial::derive(params.rng_seed);
        let crypto = BlockCrypto::new(keys, params.rng_seed);
        let p = layout.physical_slots;
        let inverse = match scheme {
            Scheme::Flat => None,
            Scheme::Hive => Some(InverseMap::new(params.block_bytes, p, layout.total_blocks())),
        };
        let extra = inverse.as_ref().map_or(0, |m| m.blocks);
        let dram = Dram::new(p + extra, SealedBlock::encoded_len(params.block_bytes), params.dram_latency);
        let mut c = Self {
            plb: Plb::new(params.plb_lines()),
            rng: ChaCha20Rng::seed_from_u64(params.rng_seed ^ 0x7469_636b),
            onchip: vec![0; layout.onchip_len()],
            params,
            scheme,
            layout,
            crypto,
            dram,
            stash: Stash::default(),
            in_flight: None,
            recent_positions: HashMap::new(),
            inverse,
            stats: ControllerStats::default(),
            bg_active: false,
            bg_steps: 0,
        };
        c.initialize()?;
        Ok(c)
    }

    fn initialize(&mut self) -> Result<()> {
        let total = self.layout.total_blocks();
        let p = self.layout.physical_slots;
        let width = self.params.counter_bits;
        let mut counters = vec![0u64; total as usize];
        let mut slot_of = vec![0u64; total as usize];
        let mut occupied = vec![false; p as usize];
        let mut attempts = 0u64;
        let limit = 1000 * p + 1_000_000;
        let top = self.layout.top_level();

        for flat in self.layout.level_range(top) {
            let mut c = 0u64;
            loop {
                attempts += 1;
                let s = self.crypto.prf_position(flat, c, p);
                if !occupied[s as usize] {
                    occupied[s as usize] = true;
                    counters[flat as usize] = c;
                    slot_of[flat as usize] = s;
                    break;
                }
                c += 1;
                if attempts > limit {
                    return Err(Error::Config("initialization did not terminate".into()));
                }
            }
        }
        // Children of one PosMap block share its group counter; if any child
        // runs out of individual counter values the whole group retries.
        for level in (0..top).rev() {
            for parent in self.layout.level_range(level + 1) {
                let children = self.layout.children(parent);
                let mut g = 0u64;
                'group: loop {
                    let mut placed = Vec::with_capacity(children.clone().count());
                    for child in children.clone() {
                        let mut ok = false;
                        for ind in 0..1u64 << width {
                            attempts += 1;
                            let c = g << width | ind;
                            let s = self.crypto.prf_position(child, c, p);
                            if !occupied[s as usize] {
                                occupied[s as usize] = true;
                                placed.push(s);
                                counters[child as usize] = c;
                                slot_of[child as usize] = s;
                                ok = true;
                                break;
                            }
                        }
                        if attempts > limit {
                            return Err(Error::Config("initialization did not terminate".into()));
                        }
                        if !ok {
                            placed.iter().for_each(|&s| occupied[s as usize] = false);
                            g += 1;
                            continue 'group;
                        }
                    }
                    break;
                }
            }
        }
        self.stats.init_attempts = attempts;
        for (i, flat) in self.layout.level_range(top).enumerate() {
            self.onchip[i] = counters[flat as usize];
        }

        let bb = self.params.block_bytes;
        let scale = self.layout.posmap_scale as usize;
        let mask = (1u64 << width) - 1;
        for flat in 0..total {
            let mut payload = vec![0u8; bb];
            match self.layout.unified(flat).region {
                Region::Data => {}
                Region::OccMap => {
                    let base = (flat - self.layout.data_blocks) * 8 * bb as u64;
                    for k in 0..8 * bb as u64 {
                        if base + k < p && occupied[(base + k) as usize] {
                            occmap::set_bit(&mut payload, k, true);
                        }
                    }
                }
                Region::PosMap(_) => {
                    let children = self.layout.children(flat);
                    let mut pm = PosMapBlock::new(scale, width);
                    pm.group_counter = counters[children.start as usize] >> width;
                    for (j, child) in children.enumerate() {
                        pm.individual_counters[j] = (counters[child as usize] & mask) as u32;
                    }
                    pm.encode_into(&mut payload);
                }
            }
            let sealed = self.crypto.seal(flat, counters[flat as usize], &payload);
            self.dram.write(PhysicalPos(slot_of[flat as usize]), &sealed)?;
        }
        let zeros = vec![0u8; bb];
        for s in 0..p {
            if !occupied[s as usize] {
                let sealed = self.crypto.seal(DUMMY_BLOCK, 0, &zeros);
                self.dram.write(PhysicalPos(s), &sealed)?;
            }
        }
        if self.inverse.is_some() {
            self.initialize_inverse(&occupied, &slot_of)?;
        }
        self.dram.reset_stats();
        Ok(())
    }

    pub fn params(&self) -> &OramParams {
        &self.params
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn layout(&self) -> &AddressLayout {
        &self.layout
    }

    pub fn stats(&self) -> &ControllerStats {
        &self.stats
    }

    pub fn dram(&self) -> &Dram {
        &self.dram
    }

    /// Adversary access to memory (snapshots, tampering).
    pub fn dram_mut(&mut self) -> &mut Dram {
        &mut self.dram
    }

    pub fn plb(&self) -> &Plb {
        &self.plb
    }

    pub fn stash_len(&self) -> usize {
        self.stash.len()
    }

    pub fn in_background(&self) -> bool {
        self.bg_active
    }

    pub(crate) fn note_stash_size(&mut self) {
        self.stats.stash_peak_internal = self.stats.stash_peak_internal.max(self.stash.len());
    }

    fn note_external(&mut self) {
        self.note_stash_size();
        self.stats.stash_peak = self.stats.stash_peak.max(self.stash.len());
    }

    /// Runs background eviction if the stash is full, so that no external
    /// request ever sees more than `stash_capacity` entries. `read` and
    /// `write` call this first; callers attributing DRAM traffic may call it
    /// separately.
    pub fn admit(&mut self) -> Result<()> {
        if self.stash.len() >= self.params.stash_capacity {
            self.background_evict()?;
        }
        Ok(())
    }

    /// Reads a data block. Never writes DRAM.
    pub fn read(&mut self, index: u64) -> Result<BlockPayload> {
        self.admit()?;
        self.stats.requests += 1;
        self.stats.reads += 1;
        self.note_external();
        self.read_inner(index)
    }

    fn read_inner(&mut self, index: u64) -> Result<BlockPayload> {
        let addr = UnifiedAddr::data(index);
        let flat = self.layout.flat(addr)?;
        if let Some(e) = self.stash.get(flat) {
            return Ok(e.payload.clone());
        }
        let (pos, c) = self.resolve(addr)?;
        let sealed = self.dram.read(pos)?;
        let payload = self.crypto.open(&sealed, flat, c).map_err(integrity(pos))?;
        self.recent_positions.insert(flat, pos);
        BlockPayload::from_bytes(payload, self.params.block_bytes)
    }

    /// Queues a data block for eviction. No DRAM traffic.
    pub fn write(&mut self, index: u64, payload: BlockPayload) -> Result<()> {
        self.admit()?;
        self.stats.requests += 1;
        self.stats.writes += 1;
        self.write_inner(index, payload)?;
        self.note_external();
        Ok(())
    }

    fn write_inner(&mut self, index: u64, payload: BlockPayload) -> Result<()> {
        let flat = self.layout.flat(UnifiedAddr::data(index))?;
        if payload.as_bytes().len() != self.params.block_bytes {
            return Err(Error::Config("payload size differs from block size".into()));
        }
        let old_pos = self.recent_positions.remove(&flat);
        self.stash.push_external(StashEntry { addr: flat, old_pos, payload, attempts: 0 });
        Ok(())
    }

    /// One eviction attempt on the stash head, if any. Returns whether a
    /// block was placed. Used to model the controller working through the
    /// stash between requests.
    pub fn service(&mut self) -> Result<bool> {
        if self.stash.is_empty() {
            return Ok(false);
        }
        self.attempt_step()
    }


    fn attempt_step(&mut self) -> Result<bool> {
        let (entry, internal) = self.stash.pop_next().expect("stash not empty");
        self.in_flight = Some(entry);
        match self.attempt()? {
            Some(_) => Ok(true),
            None => {
                let e = self.in_flight.take().unwrap();
                self.stash.requeue_front(e, internal);
                Ok(false)
            }
        }
    }

    /// Pops one entry and retries until it lands in a vacant slot. Returns
    /// the attempts it took, or 0 if the stash was empty.
    pub fn evict_one(&mut self) -> Result<u32> {
        let Some((entry, _)) = self.stash.pop_next() else { return Ok(0) };
        let already = entry.attempts;
        self.in_flight = Some(entry);
        loop {
            if let Some(n) = self.attempt()? {
                return Ok(n - already);
            }
            if self.in_flight.as_ref().unwrap().attempts > 1_000_000 {
                return Err(Error::StashDiverged { evictions: self.stats.evictions, stash: self.stash.len() });
            }
        }
    }

    /// One eviction attempt on the in-flight entry: bump its counter, check
    /// the candidate slot, then either rewrite the resident block in place
    /// or move in. Exactly one randomly placed DRAM write either way.
    /// Returns the entry's total attempts once it is placed.
    fn attempt(&mut self) -> Result<Option<u32>> {
        let flat = self.in_flight.as_ref().unwrap().addr;
        if self.in_flight.as_ref().unwrap().old_pos.is_none() {
            let c = self.counter_of(flat)?;
            let pos = self.position(flat, c);
            self.in_flight.as_mut().unwrap().old_pos = Some(pos);
        }
        let c = self.bump_counter(flat)?;
        self.stats.eviction_attempts += 1;
        self.in_flight.as_mut().unwrap().attempts += 1;
        let s_new = self.position(flat, c);
        let occupied = match self.scheme {
            Scheme::Flat => self.is_occupied(s_new)?,
            Scheme::Hive => self.hive_collision_check(s_new)?,
        };
        if occupied {
            self.stats.collisions += 1;
            self.rewrite_in_place(s_new)?;
            return Ok(None);
        }
        let old = self.in_flight.as_ref().unwrap().old_pos;
        match self.scheme {
            Scheme::Flat => {
                self.set_occupied(s_new, true)?;
                if let Some(old) = old.filter(|&o| o != s_new) {
                    self.set_occupied(old, false)?;
                }
            }
            Scheme::Hive => self.hive_record_move(flat, old, s_new)?,
        }
        // the map updates above may have landed in the in-flight payload
        let e = self.in_flight.take().unwrap();
        let sealed = self.crypto.seal(flat, c, e.payload.as_bytes());
        self.dram.write(s_new, &sealed)?;
        self.stats.evictions += 1;
        *self.stats.attempts_histogram.entry(e.attempts).or_default() += 1;
        Ok(Some(e.attempts))
    }

    /// Reads whatever block sits at `pos`, checks its tag and writes it back
    /// to the same slot under a fresh nonce. Counter and position unchanged.
    fn rewrite_in_place(&mut self, pos: PhysicalPos) -> Result<()> {
        let sealed = self.dram.read(pos)?;
        let fresh = self.crypto.reseal(&sealed).map_err(integrity(pos))?;
        self.dram.write(pos, &fresh)
    }

    /// Periodic-mode cover traffic: rewrite slot `pos` in place.
    pub fn decoy_rewrite(&mut self, pos: PhysicalPos) -> Result<()> {
        if pos.0 >= self.layout.physical_slots {
            return Err(Error::OutOfRange { pos: pos.0, len: self.layout.physical_slots });
        }
        self.rewrite_in_place(pos)?;
        self.stats.decoy_writes += 1;
        Ok(())
    }

    fn uniform_slot(&mut self) -> PhysicalPos {
        PhysicalPos(self.rng.random_range(0..self.layout.physical_slots))
    }

    fn divergence_limit(&self) -> u64 {
        64 * self.layout.total_blocks() + 10_000
    }

    /// Suspends external requests and evicts until the stash is at the low
    /// watermark. No-op below capacity.
    pub fn background_evict(&mut self) -> Result<()> {
        if self.stash.len() < self.params.stash_capacity {
            return Ok(());
        }
        self.stats.background_eviction_events += 1;
        let mut n = 0u64;
        while self.stash.len() > self.params.stash_low_watermark {
            self.evict_one()?;
            self.stats.background_evictions += 1;
            n += 1;
            if n > self.divergence_limit() {
                return Err(Error::StashDiverged { evictions: n, stash: self.stash.len() });
            }
        }
        Ok(())
    }

    /// Evicts until the stash is empty. Dirty PLB lines stay cached; they
    /// are the authoritative copies of their blocks.
    pub fn drain(&mut self) -> Result<()> {
        let mut n = 0u64;
        while !self.stash.is_empty() {
            self.evict_one()?;
            n += 1;
            if n > self.divergence_limit() {
                return Err(Error::StashDiverged { evictions: n, stash: self.stash.len() });
            }
        }
        Ok(())
    }

    /// One period of the periodic engine. Every tick issues exactly one
    /// DRAM write at a uniformly random slot (plus inverse-region writebacks
    /// in the baseline scheme):
    /// - read: the real read, then an in-place rewrite of a uniform slot;
    /// - write: the block is queued and one eviction attempt is made;
    /// - idle: an eviction attempt if the stash is non-empty, else a decoy.
    ///
    /// While background eviction is active each tick is an eviction attempt
    /// and the request is handed back unserved.
    pub fn tick_periodic(&mut self, request: Option<Request>) -> Result<TickOutcome> {
        self.stats.ticks += 1;
        if !self.bg_active && self.stash.len() >= self.params.stash_capacity {
            self.bg_active = true;
            self.bg_steps = 0;
            self.stats.background_eviction_events += 1;
        }
        if self.bg_active {
            if self.attempt_step()? {
                self.stats.background_evictions += 1;
            }
            self.bg_steps += 1;
            if self.stash.len() <= self.params.stash_low_watermark {
                self.bg_active = false;
            } else if self.bg_steps > 64 * self.divergence_limit() {
                return Err(Error::StashDiverged { evictions: self.bg_steps, stash: self.stash.len() });
            }
            return Ok(TickOutcome::Deferred(request));
        }
        match request {
            Some(Request::Read(index)) => {
                self.stats.requests += 1;
                self.stats.reads += 1;
                self.note_external();
                let payload = self.read_inner(index)?;
                let s = self.uniform_slot();
                self.decoy_rewrite(s)?;
                Ok(TickOutcome::Read(payload))
            }
            Some(Request::Write(index, payload)) => {
                self.stats.requests += 1;
                self.stats.writes += 1;
                self.write_inner(index, payload)?;
                self.note_external();
                self.attempt_step()?;
                Ok(TickOutcome::Written)
            }
            None => {
                if self.stash.is_empty() {
                    let s = self.uniform_slot();
                    self.decoy_rewrite(s)?;
                } else {
                    self.attempt_step()?;
                }
                Ok(TickOutcome::Idle)
            }
        }
    }

    /// Slot holding the current DRAM copy of every logical block, without
    /// side effects. Stash entries report their old slot.
    pub fn live_positions(&self) -> Result<Vec<PhysicalPos>> {
        (0..self.layout.total_blocks())
            .map(|flat| {
                if let Some(e) = self.stash.get(flat) {
                    if let Some(p) = e.old_pos {
                        return Ok(p);
                    }
                }
                if let Some(line) = self.plb.peek(&PlbKey::Block(flat)) {
                    if let Some(p) = line.pos {
                        return Ok(p);
                    }
                }
                Ok(self.position(flat, self.peek_counter(flat)?))
            })
            .collect()
    }

    /// Quiescent consistency audit: with an empty stash, no two blocks share
    /// a slot and the collision structure marks exactly the live slots.
    pub fn check_consistency(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("consistency: {m}")));
        if !self.stash.is_empty() {
            return fail("stash not empty".into());
        }
        let mut live: Vec<(u64, PhysicalPos)> = (0..).zip(self.live_positions()?).collect();
        if self.scheme == Scheme::Hive {
            // a PLB line orphaned by an overflow no longer owns its old slot:
            // the inverse check reads it as vacant and may hand it out
            live.retain(|&(flat, p)| match self.plb.peek(&PlbKey::Block(flat)) {
                Some(_) => self.peek_counter(flat).is_ok_and(|c| self.position(flat, c) == p),
                None => true,
            });
        }
        let mut owner: HashMap<u64, u64> = HashMap::with_capacity(live.len());
        for &(flat, p) in &live {
            if let Some(other) = owner.insert(p.0, flat) {
                return fail(format!("blocks {other} and {flat} share slot {}", p.0));
            }
        }
        match self.scheme {
            Scheme::Flat => {
                for &(flat, p) in &live {
                    if !self.peek_occupied(p)? {
                        return fail(format!("slot {} of block {flat} marked vacant", p.0));
                    }
                }
                let n = self.occupied_count()?;
                if n != live.len() as u64 {
                    return fail(format!("{n} occupied bits for {} live blocks", live.len()));
                }
            }
            Scheme::Hive => {
                for &(flat, p) in &live {
                    if self.peek_inverse(p)? != Some(flat) {
                        return fail(format!("inverse entry of slot {} is not block {flat}", p.0));
                    }
                }
            }
        }
        Ok(())
    }

    /// Effective counter of a data block, for monotonicity checks.
    pub fn peek_data_counter(&self, index: u64) -> Result<u64> {
        self.peek_counter(self.layout.flat(UnifiedAddr::data(index))?)
    }

    pub fn counter_home(&self, index: u64) -> Result<CounterHome> {
        Ok(self.layout.counter_home(self.layout.flat(UnifiedAddr::data(index))?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::diff;

    fn small(seed: u64) -> OramParams {
        OramParams {
            physical_slots: 1 << 10,
            plb_bytes: 4096,
            stash_capacity: 16,
            stash_low_watermark: 8,
            rng_seed: seed,
            ..OramParams::default()
        }
        .with_utilization(1, 2)
        .unwrap()
    }

    fn payload(v: u8) -> BlockPayload {
        BlockPayload::from_bytes(vec![v; 128], 128).unwrap()
    }

    #[test]
    fn init_fills_every_slot_and_marks_live_blocks() {
        for scheme in [Scheme::Flat, Scheme::Hive] {
            let c = Controller::new(small(1), scheme).unwrap();
            assert!((0..1024).all(|s| c.dram().is_written(PhysicalPos(s))));
            assert_eq!(c.dram().stats().writes, 0);
            c.check_consistency().unwrap();
        }
        let c = Controller::new(small(1), Scheme::Flat).unwrap();
        assert_eq!(c.occupied_count().unwrap(), c.layout().total_blocks());
    }

    #[test]
    fn rejects_overfull() {
        let p = OramParams { data_blocks: 1024, physical_slots: 1024, ..OramParams::default() };
        assert!(matches!(Controller::new(p, Scheme::Flat), Err(Error::Config(_))));
    }

    #[test]
    fn read_after_init_is_zero_and_leaves_no_trace() {
        let mut c = Controller::new(small(2), Scheme::Flat).unwrap();
        let before = c.dram().snapshot();
        for a in 0..c.params().data_blocks {
            assert_eq!(c.read(a).unwrap(), BlockPayload::zeroed(128));
        }
        assert!(diff(&before, &c.dram().snapshot()).unwrap().is_empty());
        assert_eq!(c.dram().stats().writes, 0);
    }

    #[test]
    fn write_only_enqueues() {
        let mut c = Controller::new(small(3), Scheme::Flat).unwrap();
        c.write(5, payload(1)).unwrap();
        c.write(5, payload(2)).unwrap();
        assert_eq!(c.stash_len(), 1);
        assert_eq!(c.dram().stats().writes, 0);
        assert_eq!(c.read(5).unwrap(), payload(2));
        c.drain().unwrap();
        assert_eq!(c.read(5).unwrap(), payload(2));
        c.check_consistency().unwrap();
    }

    #[test]
    fn one_write_per_attempt() {
        let mut c = Controller::new(small(4), Scheme::Flat).unwrap();
        for a in 0..300 {
            c.write(a % 200, payload(a as u8)).unwrap();
            c.service().unwrap();
        }
        c.drain().unwrap();
        let s = c.stats();
        assert_eq!(c.dram().stats().writes, s.eviction_attempts + s.decoy_writes);
        assert!(s.collisions <= s.eviction_attempts);
        assert_eq!(s.attempts_histogram.values().sum::<u64>(), s.evictions);
        assert_eq!(
            s.attempts_histogram.iter().map(|(k, v)| *k as u64 * v).sum::<u64>(),
            s.eviction_attempts
        );
        c.check_consistency().unwrap();
    }

    #[test]
    fn background_eviction_trigger_and_bound() {
        let mut c = Controller::new(small(5), Scheme::Flat).unwrap();
        for a in 0..16 {
            c.write(a, payload(1)).unwrap();
        }
        assert_eq!(c.stats().background_eviction_events, 0);
        c.write(16, payload(1)).unwrap();
        assert_eq!(c.stats().background_eviction_events, 1);
        assert!(c.stats().background_evictions >= 8);
        assert!(c.stats().stash_peak <= 16);
    }

    #[test]
    fn below_capacity_background_is_noop() {
        let mut c = Controller::new(small(5), Scheme::Flat).unwrap();
        c.write(0, payload(1)).unwrap();
        c.background_evict().unwrap();
        assert_eq!(c.stats().background_eviction_events, 0);
        assert_eq!(c.stash_len(), 1);
    }

    #[test]
    fn periodic_ticks_write_once() {
        let mut p = small(6);
        p.period = 100;
        let mut c = Controller::new(p, Scheme::Flat).unwrap();
        let reqs = [Some(Request::Read(3)), Some(Request::Write(4, payload(9))), None, None, Some(Request::Read(4))];
        for r in reqs.into_iter().cycle().take(500) {
            let before = c.dram().snapshot();
            let w = c.dram().stats().writes;
            c.tick_periodic(r).unwrap();
            assert_eq!(c.dram().stats().writes, w + 1);
            assert_eq!(diff(&before, &c.dram().snapshot()).unwrap().len(), 1);
        }
        assert_eq!(c.stats().ticks, 500);
    }

    #[test]
    fn tampered_slot_is_detected() {
        let mut c = Controller::new(small(7), Scheme::Flat).unwrap();
        let target = c.live_positions().unwrap()[3];
        c.dram_mut().tamper(target, 77).unwrap();
        assert_eq!(c.read(3), Err(Error::Integrity { pos: target.0 }));
    }

    #[test]
    fn functional_round_trip_both_schemes() {
        for scheme in [Scheme::Flat, Scheme::Hive] {
            let mut c = Controller::new(small(8), scheme).unwrap();
            let n = c.params().data_blocks;
            let mut oracle = vec![0u8; n as usize];
            let mut rng = ChaCha20Rng::seed_from_u64(8);
            for i in 0..3000u32 {
                let a = rng.random_range(0..n);
                if rng.random_bool(0.5) {
                    let v = (i % 251) as u8 + 1;
                    c.write(a, payload(v)).unwrap();
                    oracle[a as usize] = v;
                } else {
                    assert_eq!(c.read(a).unwrap(), payload(oracle[a as usize]));
                }
                c.service().unwrap();
            }
            c.drain().unwrap();
            c.check_consistency().unwrap();
            for a in 0..n {
                assert_eq!(c.read(a).unwrap(), payload(oracle[a as usize]), "{scheme:?} {a}");
            }
        }
    }
}
