//! Request traces: a small text format and seeded generators.
//!
//! Format: one op per line, `R <index>` or `W <index>`, index decimal or
//! `0x` hex. Blank lines and `#` comments are ignored.

use std::fmt;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Read,
    Write,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TraceOp {
    pub kind: OpKind,
    pub addr: u64,
}

impl TraceOp {
    pub fn read(addr: u64) -> Self {
        Self { kind: OpKind::Read, addr }
    }

    pub fn write(addr: u64) -> Self {
        Self { kind: OpKind::Write, addr }
    }
}

impl fmt::Display for TraceOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let k = match self.kind {
            OpKind::Read => 'R',
            OpKind::Write => 'W',
        };
        write!(f, "{k} {}", self.addr)
    }
}

fn parse_index(s: &str) -> Option<u64> {
    match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(hex, 16).ok(),
        None => s.parse().ok(),
    }
}

pub fn parse_trace(text: &str) -> Result<Vec<TraceOp>> {
    let mut ops = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("");
        let mut parts = line.split_whitespace();
        let Some(kind) = parts.next() else { continue };
        let col = |needle: &str| raw.find(needle).map_or(1, |c| c + 1);
        let err = |column, message: String| Error::Parse { line: i + 1, column, message };
        let kind = match kind {
            "R" | "r" => OpKind::Read,
            "W" | "w" => OpKind::Write,
            other => return Err(err(col(other), format!("unknown op `{other}`"))),
        };
        let Some(idx) = parts.next() else {
            return Err(err(line.trim_end().len() + 1, "missing index".into()));
        };
        let addr = parse_index(idx).ok_or_else(|| err(col(idx), format!("bad index `{idx}`")))?;
        if let Some(extra) = parts.next() {
            return Err(err(col(extra), format!("unexpected `{extra}`")));
        }
        ops.push(TraceOp { kind, addr });
    }
    Ok(ops)
}

pub fn format_trace(ops: &[TraceOp]) -> String {
    ops.iter().map(|op| format!("{op}\n")).collect()
}

/// Trace generators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceKind {
    /// Independent uniform addresses, reads and writes mixed.
    Uniform,
    /// Writes to 0, 1, 2, ... wrapping at the block count.
    Sequential,
    /// Zipf-distributed addresses.
    Zipf,
    /// Write order of a Montgomery ladder over a random key of `len` bits.
    Montgomery,
    /// Writes cycling over a small fixed set of addresses.
    Hammer,
}

impl FromStr for TraceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "uniform" => Self::Uniform,
            "sequential" => Self::Sequential,
            "zipf" => Self::Zipf,
            "montgomery" => Self::Montgomery,
            "hammer" => Self::Hammer,
            _ => return Err(Error::BadKind(s.to_string())),
        })
    }
}

/// Generator knobs beyond kind, length and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct GenOptions {
    /// Logical data blocks addresses are drawn from.
    pub blocks: u64,
    /// Fraction of writes for uniform and zipf traces.
    pub write_fraction: f64,
    pub zipf_exponent: f64,
    /// Distinct addresses a hammer trace cycles over.
    pub hammer_span: u64,
    /// Addresses of the two ladder registers.
    pub r0: u64,
    pub r1: u64,
}

impl Default for GenOptions {
    fn default() -> Self {
        Self { blocks: 1 << 15, write_fraction: 0.5, zipf_exponent: 1.0, hammer_span: 1, r0: 0, r1: 1 }
    }
}

/// Deterministic for a fixed seed.
pub fn gen_trace(kind: TraceKind, len: usize, seed: u64, opts: &GenOptions) -> Result<Vec<TraceOp>> {
    if opts.blocks == 0 {
        return Err(Error::Config("trace needs at least one block".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mixed = |rng: &mut ChaCha20Rng, addr: u64| {
        if rng.random_bool(opts.write_fraction.clamp(0.0, 1.0)) {
            TraceOp::write(addr)
        } else {
            TraceOp::read(addr)
        }
    };
    Ok(match kind {
        TraceKind::Uniform => (0..len)
            .map(|_| {
                let a = rng.random_range(0..opts.blocks);
                mixed(&mut rng, a)
            })
            .collect(),
        TraceKind::Zipf if opts.zipf_exponent == 0.0 => {
            return gen_trace(TraceKind::Uniform, len, seed, opts);
        }
        TraceKind::Zipf => {
            let weights = (1..=opts.blocks).map(|k| (k as f64).powf(-opts.zipf_exponent));
            let dist = WeightedIndex::new(weights).map_err(|e| Error::Config(e.to_string()))?;
            (0..len)
                .map(|_| {
                    let a = dist.sample(&mut rng) as u64;
                    mixed(&mut rng, a)
                })
                .collect()
        }
        TraceKind::Sequential => (0..len as u64).map(|i| TraceOp::write(i % opts.blocks)).collect(),
        TraceKind::Hammer => {
            let span = opts.hammer_span.clamp(1, opts.blocks);
            (0..len as u64).map(|i| TraceOp::write(i % span)).collect()
        }
        TraceKind::Montgomery => {
            let key: Vec<bool> = (0..len).map(|_| rng.random()).collect();
            montgomery_trace(&key, opts.r0, opts.r1)
        }
    })
}

/// Writes issued by a Montgomery ladder, most significant bit first. For a
/// 0 bit R1 is written before R0; for a 1 bit the order is reversed.
pub fn montgomery_trace(key: &[bool], r0: u64, r1: u64) -> Vec<TraceOp> {
    key.iter()
        .flat_map(|&bit| {
            if bit {
                [TraceOp::write(r0), TraceOp::write(r1)]
            } else {
                [TraceOp::write(r1), TraceOp::write(r0)]
            }
        })
        .collect()
}

/// The key a seeded montgomery trace was generated from.
pub fn montgomery_key(bits: usize, seed: u64) -> Vec<bool> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..bits).map(|_| rng.random()).collect()
}
