//! Simulated untrusted DRAM with access accounting and adversary
//! instrumentation (snapshots, diffs, bit flips).

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;
use std::io::{Read, Write};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::Serialize;

use crate::crypto::{SealedBlock, NONCE_BYTES, TAG_BYTES};
use crate::error::{Error, Result};
use crate::params::PhysicalPos;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct DramStats {
    pub reads: u64,
    pub writes: u64,
}

/// `P` fixed-size sealed slots stored contiguously.
pub struct Dram {
    id: u64,
    slot_bytes: usize,
    bytes: Vec<u8>,
    written: Vec<bool>,
    fingerprints: Vec<u64>,
    stats: DramStats,
    latency: u64,
    clock: u64,
    strict: bool,
    write_log: Option<Vec<u64>>,
}

/// Adversary's capture of memory: one fingerprint per slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Snapshot {
    dram_id: u64,
    fingerprints: Vec<u64>,
}

fn fingerprint(raw: &[u8]) -> u64 {
    let mut h = DefaultHasher::new();
    h.write(raw);
    // 0 is reserved for vacant slots
    h.finish() | 1
}

impl Dram {
    /// A strict DRAM of `slots` vacant slots, each holding one sealed block.
    pub fn new(slots: u64, slot_bytes: usize, latency: u64) -> Self {
        Self {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            slot_bytes,
            bytes: vec![0; slots as usize * slot_bytes],
            written: vec![false; slots as usize],
            fingerprints: vec![0; slots as usize],
            stats: DramStats::default(),
            latency,
            clock: 0,
            strict: true,
            write_log: None,
        }
    }

    /// In lenient mode reading a never-written slot returns an all-zero record
    /// instead of failing.
    pub fn set_strict(&mut self, strict: bool) {
        self.strict = strict;
    }

    pub fn len(&self) -> u64 {
        self.written.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.written.is_empty()
    }

    pub fn slot_bytes(&self) -> usize {
        self.slot_bytes
    }

    pub fn stats(&self) -> DramStats {
        self.stats
    }

    /// Simulated cycles spent on DRAM accesses so far.
    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn latency(&self) -> u64 {
        self.latency
    }

    /// Zeroes counters and clock, e.g. after initialization.
    pub fn reset_stats(&mut self) {
        self.stats = DramStats::default();
        self.clock = 0;
    }

    fn check(&self, pos: PhysicalPos) -> Result<usize> {
        if pos.0 >= self.len() {
            return Err(Error::OutOfRange { pos: pos.0, len: self.len() });
        }
        Ok(pos.0 as usize)
    }

    fn raw(&self, i: usize) -> &[u8] {
        &self.bytes[i * self.slot_bytes..(i + 1) * self.slot_bytes]
    }

    pub fn is_written(&self, pos: PhysicalPos) -> bool {
        self.written.get(pos.0 as usize).copied().unwrap_or(false)
    }

    pub fn read(&mut self, pos: PhysicalPos) -> Result<SealedBlock> {
        let i = self.check(pos)?;
        if !self.written[i] && self.strict {
            return Err(Error::ReadUninitialized(pos.0));
        }
        self.stats.reads += 1;
        self.clock += self.latency;
        Ok(SealedBlock::decode(self.raw(i)))
    }

    /// Reads without touching the access counters or clock. For audits only.
    pub fn peek(&self, pos: PhysicalPos) -> Result<SealedBlock> {
        let i = self.check(pos)?;
        if !self.written[i] && self.strict {
            return Err(Error::ReadUninitialized(pos.0));
        }
        Ok(SealedBlock::decode(self.raw(i)))
    }

    pub fn write(&mut self, pos: PhysicalPos, sealed: &SealedBlock) -> Result<()> {
        let i = self.check(pos)?;
        let range = i * self.slot_bytes..(i + 1) * self.slot_bytes;
        sealed.encode_into(&mut self.bytes[range]);
        self.written[i] = true;
        self.fingerprints[i] = fingerprint(self.raw(i));
        self.stats.writes += 1;
        self.clock += self.latency;
        if let Some(log) = &mut self.write_log {
            log.push(pos.0);
        }
        Ok(())
    }

    /// Starts recording the target of every subsequent write.
    pub fn start_write_log(&mut self) {
        self.write_log = Some(Vec::new());
    }

    /// Returns the recorded write targets and keeps recording.
    pub fn take_write_log(&mut self) -> Vec<u64> {
        self.write_log.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot { dram_id: self.id, fingerprints: self.fingerprints.clone() }
    }

    /// Flips one bit of a written slot's raw bytes.
    pub fn tamper(&mut self, pos: PhysicalPos, bit_index: usize) -> Result<()> {
        let i = self.check(pos)?;
        if !self.written[i] {
            return Err(Error::ReadUninitialized(pos.0));
        }
        let bits = self.slot_bytes * 8;
        if bit_index >= bits {
            return Err(Error::OutOfRange { pos: bit_index as u64, len: bits as u64 });
        }
        self.bytes[i * self.slot_bytes + bit_index / 8] ^= 1 << (bit_index % 8);
        self.fingerprints[i] = fingerprint(self.raw(i));
        Ok(())
    }

    /// Writes every slot as `u32 LE body length | nonce | tag | body`. Vacant
    /// slots are a bare zero length.
    pub fn dump<W: Write>(&self, mut out: W) -> Result<()> {
        let body_len = (self.slot_bytes - NONCE_BYTES - TAG_BYTES) as u32;
        for i in 0..self.written.len() {
            if self.written[i] {
                out.write_all(&body_len.to_le_bytes())?;
                out.write_all(self.raw(i))?;
            } else {
                out.write_all(&0u32.to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Reads a dump produced by [`Dram::dump`] into a fresh instance.
    pub fn load_dump<R: Read>(mut input: R, slots: u64, latency: u64) -> Result<Self> {
        let mut slot_bytes = None;
        let mut records: Vec<Option<Vec<u8>>> = Vec::with_capacity(slots as usize);
        for _ in 0..slots {
            let mut len = [0u8; 4];
            input.read_exact(&mut len)?;
            let body = u32::from_le_bytes(len) as usize;
            if body == 0 {
                records.push(None);
                continue;
            }
            let sb = NONCE_BYTES + TAG_BYTES + body;
            if *slot_bytes.get_or_insert(sb) != sb {
                return Err(Error::Io("inconsistent record sizes in dump".into()));
            }
            let mut rec = vec![0; sb];
            input.read_exact(&mut rec)?;
            records.push(Some(rec));
        }
        let mut d = Dram::new(slots, slot_bytes.unwrap_or(NONCE_BYTES + TAG_BYTES), latency);
        for (i, rec) in records.into_iter().enumerate() {
            if let Some(rec) = rec {
                d.write(PhysicalPos(i as u64), &SealedBlock::decode(&rec))?;
            }
        }
        d.reset_stats();
        Ok(d)
    }
}

/// Slots whose raw bytes differ between two captures of the same DRAM.
pub fn diff(before: &Snapshot, after: &Snapshot) -> Result<Vec<PhysicalPos>> {
    if before.dram_id != after.dram_id {
        return Err(Error::SnapshotMismatch);
    }
    Ok(before
        .fingerprints
        .iter()
        .zip(&after.fingerprints)
        .enumerate()
        .filter(|(_, (a, b))| a != b)
        .map(|(i, _)| PhysicalPos(i as u64))
        .collect())
}
