//! Snapshot adversary against a Montgomery ladder's write order.
//!
//! The attacker captures memory before and after every write the victim
//! makes and knows which slots held the two ladder registers at the start.
//! For each key bit it looks at the pair of diffs and decides which
//! register was written first.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::Result;
use crate::harness::{request_payload, Engine, SchemeKind};
use crate::memory::diff;
use crate::params::{OramParams, PhysicalPos};
use crate::trace::{montgomery_key, montgomery_trace};

/// Decodes key bits from per-write diffs, two writes per bit. A bit is 1
/// when R0's slot changes in the first diff of its pair, 0 when R1's does.
/// Otherwise the decoder falls back to comparing the smallest changed slot
/// in each diff, which is as good as a coin flip.
pub fn montgomery_decode(diffs: &[Vec<PhysicalPos>], slot_r0: PhysicalPos, slot_r1: PhysicalPos) -> Vec<bool> {
    diffs
        .chunks(2)
        .map(|pair| {
            let (d1, d2) = (&pair[0], pair.get(1).map(Vec::as_slice).unwrap_or(&[]));
            let first_r0 = d1.contains(&slot_r0) || d2.contains(&slot_r1);
            let first_r1 = d1.contains(&slot_r1) || d2.contains(&slot_r0);
            match (first_r0, first_r1) {
                (true, false) => true,
                (false, true) => false,
                _ => d1.iter().min() < d2.iter().min(),
            }
        })
        .collect()
}

pub fn accuracy(recovered: &[bool], key: &[bool]) -> f64 {
    if key.is_empty() {
        return 1.0;
    }
    let ok = recovered.iter().zip(key).filter(|(a, b)| a == b).count();
    ok as f64 / key.len() as f64
}

/// Runs the victim's write sequence for `key` on a fresh engine and returns
/// the decoder's recovered bits.
pub fn attack_once(params: &OramParams, scheme: SchemeKind, key: &[bool]) -> Result<Vec<bool>> {
    let (r0, r1) = (0u64, 1u64);
    let mut engine = Engine::new(params, scheme)?;
    let (slot_r0, slot_r1) = match &mut engine {
        Engine::Oram(c) => {
            let live = c.live_positions()?;
            (live[r0 as usize], live[r1 as usize])
        }
        Engine::Plain(_) => (PhysicalPos(r0), PhysicalPos(r1)),
    };
    let mut diffs = Vec::with_capacity(2 * key.len());
    for (i, op) in montgomery_trace(key, r0, r1).iter().enumerate() {
        let before = engine.dram().snapshot();
        engine.write(op.addr, request_payload(i as u64, params.block_bytes))?;
        engine.service()?;
        diffs.push(diff(&before, &engine.dram().snapshot())?);
    }
    Ok(montgomery_decode(&diffs, slot_r0, slot_r1))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackReport {
    pub scheme: SchemeKind,
    pub key_bits: usize,
    pub trials: usize,
    pub mean_accuracy: f64,
    pub min_accuracy: f64,
    pub max_accuracy: f64,
    pub accuracies: Vec<f64>,
}

/// `trials` independent random keys, each on its own engine. Trial `t` uses
/// key seed `seed + t` and engine seed `params.rng_seed + t`.
pub fn montgomery_attack(params: &OramParams, scheme: SchemeKind, key_bits: usize, trials: usize, seed: u64) -> Result<AttackReport> {
    let accuracies = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let key = montgomery_key(key_bits, seed.wrapping_add(t));
            let mut p = params.clone();
            p.rng_seed = params.rng_seed.wrapping_add(t);
            Ok(accuracy(&attack_once(&p, scheme, &key)?, &key))
        })
        .collect::<Result<Vec<f64>>>()?;
    let n = accuracies.len().max(1) as f64;
    Ok(AttackReport {
        scheme,
        key_bits,
        trials,
        mean_accuracy: accuracies.iter().sum::<f64>() / n,
        min_accuracy: accuracies.iter().copied().fold(f64::INFINITY, f64::min),
        max_accuracy: accuracies.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        accuracies,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> OramParams {
        OramParams { physical_slots: 1 << 10, plb_bytes: 4096, stash_capacity: 16, stash_low_watermark: 8, ..OramParams::default() }
            .with_utilization(1, 2)
            .unwrap()
    }

    #[test]
    fn decoder_on_clean_diffs() {
        let (a, b) = (PhysicalPos(0), PhysicalPos(1));
        let diffs = vec![vec![b], vec![a], vec![a], vec![b]];
        assert_eq!(montgomery_decode(&diffs, a, b), vec![false, true]);
    }

    #[test]
    fn plain_memory_leaks_every_bit() {
        let key = montgomery_key(128, 11);
        let got = attack_once(&params(), SchemeKind::Dram, &key).unwrap();
        assert_eq!(got, key);
        let zeros = vec![false; 64];
        assert_eq!(attack_once(&params(), SchemeKind::Dram, &zeros).unwrap(), zeros);
    }

    #[test]
    fn oram_is_near_chance() {
        let r = montgomery_attack(&params(), SchemeKind::Flat, 256, 8, 1).unwrap();
        assert!((r.mean_accuracy - 0.5).abs() < 0.1, "{}", r.mean_accuracy);
    }
}
