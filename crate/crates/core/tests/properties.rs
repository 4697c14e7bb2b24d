use std::collections::{BTreeSet, HashMap};

use proptest::prelude::*;

use flatoram::crypto::{BlockCrypto, KeyMaterial};
use flatoram::harness::request_payload;
use flatoram::memory::{diff, Dram};
use flatoram::params::{layout, OramParams, PhysicalPos};
use flatoram::{Controller, Scheme};

#[derive(Debug, Clone)]
enum Op {
    Read(u64),
    Write(u64),
    Service,
}

fn ops(blocks: u64, max: usize) -> impl Strategy<Value = Vec<Op>> {
    proptest::collection::vec(
        prop_oneof![
            3 => (0..blocks).prop_map(Op::Read),
            4 => (0..blocks).prop_map(Op::Write),
            2 => Just(Op::Service),
        ],
        1..max,
    )
}

/// 256 slots at half utilization; narrow counters and a small PLB push
/// overflow and dirty-victim paths. Fewer lines than the OccMap plus the top
/// PosMap level makes the map-block avalanche outrun background eviction.
fn tiny(seed: u64, counter_bits: u32, plb_lines: usize) -> OramParams {
    OramParams {
        physical_slots: 1 << 8,
        posmap_scale: 8,
        onchip_entries: 4,
        counter_bits,
        plb_bytes: 128 * plb_lines,
        stash_capacity: 6,
        stash_low_watermark: 3,
        rng_seed: seed,
        ..OramParams::default()
    }
    .with_utilization(1, 2)
    .unwrap()
}

fn scheme() -> impl Strategy<Value = Scheme> {
    prop_oneof![Just(Scheme::Flat), Just(Scheme::Hive)]
}

const BLOCKS: u64 = 100;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn reads_return_last_write(seed in any::<u64>(), bits in 2u32..=14, lines in 4usize..10, s in scheme(), ops in ops(BLOCKS, 300)) {
        let p = tiny(seed, bits, lines);
        prop_assume!(p.data_blocks >= BLOCKS);
        let mut c = Controller::new(p.clone(), s).unwrap();
        let mut oracle: HashMap<u64, Vec<u8>> = HashMap::new();
        for (i, op) in ops.iter().enumerate() {
            match *op {
                Op::Read(a) => {
                    let want = oracle.get(&a).cloned().unwrap_or_else(|| vec![0; p.block_bytes]);
                    prop_assert_eq!(c.read(a).unwrap().into_bytes(), want);
                }
                Op::Write(a) => {
                    let v = request_payload(i as u64, p.block_bytes);
                    oracle.insert(a, v.as_bytes().to_vec());
                    c.write(a, v).unwrap();
                }
                Op::Service => {
                    c.service().unwrap();
                }
            }
            prop_assert!(c.stats().stash_peak <= p.stash_capacity);
        }
        c.drain().unwrap();
        c.check_consistency().unwrap();
        for (a, v) in &oracle {
            prop_assert_eq!(&c.read(*a).unwrap().into_bytes(), v);
        }
    }

    #[test]
    fn schemes_agree(seed in any::<u64>(), ops in ops(BLOCKS, 200)) {
        let p = tiny(seed, 14, 4);
        let mut flat = Controller::new(p.clone(), Scheme::Flat).unwrap();
        let mut hive = Controller::new(p.clone(), Scheme::Hive).unwrap();
        for (i, op) in ops.iter().enumerate() {
            match *op {
                Op::Read(a) => prop_assert_eq!(flat.read(a).unwrap(), hive.read(a).unwrap()),
                Op::Write(a) => {
                    flat.write(a, request_payload(i as u64, p.block_bytes)).unwrap();
                    hive.write(a, request_payload(i as u64, p.block_bytes)).unwrap();
                }
                Op::Service => {
                    flat.service().unwrap();
                    hive.service().unwrap();
                }
            }
        }
    }

    #[test]
    fn reads_never_write_and_counters_only_grow(seed in any::<u64>(), lines in 4usize..10, ops in ops(BLOCKS, 300)) {
        let p = tiny(seed, 3, lines);
        let mut c = Controller::new(p.clone(), Scheme::Flat).unwrap();
        c.dram_mut().start_write_log();
        let mut last: Vec<u64> = (0..p.data_blocks).map(|a| c.peek_data_counter(a).unwrap()).collect();
        for (i, op) in ops.iter().enumerate() {
            // room is made first so background eviction is not charged to the read
            c.admit().unwrap();
            c.dram_mut().take_write_log();
            for (a, prev) in last.iter_mut().enumerate() {
                let now = c.peek_data_counter(a as u64).unwrap();
                prop_assert!(now >= *prev);
                *prev = now;
            }
            match *op {
                Op::Read(a) => {
                    c.read(a).unwrap();
                    prop_assert!(c.dram_mut().take_write_log().is_empty());
                    prop_assert_eq!(c.peek_data_counter(a).unwrap(), last[a as usize]);
                }
                Op::Write(a) => c.write(a, request_payload(i as u64, p.block_bytes)).unwrap(),
                Op::Service => {
                    c.service().unwrap();
                }
            }
            for (a, prev) in last.iter_mut().enumerate() {
                let now = c.peek_data_counter(a as u64).unwrap();
                prop_assert!(now >= *prev);
                *prev = now;
            }
        }
    }

    #[test]
    fn one_write_per_attempt(seed in any::<u64>(), s in scheme(), lines in 4usize..10, ops in ops(BLOCKS, 300)) {
        let p = tiny(seed, 4, lines);
        let mut c = Controller::new(p.clone(), s).unwrap();
        for (i, op) in ops.iter().enumerate() {
            match *op {
                Op::Read(a) => {
                    c.read(a).unwrap();
                }
                Op::Write(a) => c.write(a, request_payload(i as u64, p.block_bytes)).unwrap(),
                Op::Service => {
                    c.service().unwrap();
                }
            }
        }
        c.drain().unwrap();
        let st = c.stats();
        prop_assert_eq!(c.dram().stats().writes, st.eviction_attempts + st.decoy_writes + st.inverse_writebacks);
        prop_assert!(st.collisions <= st.eviction_attempts);
        prop_assert_eq!(st.attempts_histogram.iter().map(|(k, v)| *k as u64 * v).sum::<u64>(), st.eviction_attempts);
    }

    #[test]
    fn diff_is_exactly_the_written_slots(writes in proptest::collection::vec((0u64..64, any::<u8>()), 0..40)) {
        let mut crypto = BlockCrypto::new(KeyMaterial::derive(1), 2);
        let mut d = Dram::new(64, flatoram::crypto::SealedBlock::encoded_len(32), 1);
        for i in 0..64 {
            d.write(PhysicalPos(i), &crypto.seal(i, 0, &[0; 32])).unwrap();
        }
        let before = d.snapshot();
        let mut targets = BTreeSet::new();
        for (pos, byte) in writes {
            d.write(PhysicalPos(pos), &crypto.seal(pos, 1, &[byte; 32])).unwrap();
            targets.insert(PhysicalPos(pos));
        }
        let got: BTreeSet<PhysicalPos> = diff(&before, &d.snapshot()).unwrap().into_iter().collect();
        prop_assert_eq!(got, targets);
    }

    #[test]
    fn seal_open_round_trip(id in any::<u64>(), ctr in any::<u64>(), payload in proptest::collection::vec(any::<u8>(), 32..=32), other in any::<u64>()) {
        let mut crypto = BlockCrypto::new(KeyMaterial::derive(7), 3);
        let s = crypto.seal(id, ctr, &payload);
        prop_assert_eq!(crypto.open(&s, id, ctr).unwrap(), payload);
        prop_assume!(other != ctr);
        prop_assert!(crypto.open(&s, id, other).is_err());
    }

    #[test]
    fn layout_is_pure_and_sums(log_p in 8u32..20, num in 1u64..4, scale in 2u32..64, onchip in 1u64..5000) {
        let base = OramParams { physical_slots: 1 << log_p, posmap_scale: scale, onchip_entries: onchip, ..OramParams::default() };
        prop_assume!(base.validate().is_ok());
        let Ok(p) = base.with_utilization(num, 4) else { return Ok(()) };
        let a = layout(&p).unwrap();
        prop_assert_eq!(&a, &layout(&p).unwrap());
        prop_assert_eq!(a.level_sizes().iter().sum::<u64>(), a.total_blocks());
        prop_assert!(a.total_blocks() <= p.physical_slots);
    }
}

#[test]
fn occmap_block_relocating_within_its_own_coverage() {
    // one OccMap block covers all 1024 slots, so every move of it flips
    // bits inside itself; a small PLB forces it out again and again
    let p = OramParams {
        physical_slots: 1 << 10,
        posmap_scale: 8,
        onchip_entries: 16,
        plb_bytes: 4 * 128,
        stash_capacity: 8,
        stash_low_watermark: 4,
        ..OramParams::default()
    }
    .with_utilization(1, 2)
    .unwrap();
    let mut c = Controller::new(p.clone(), Scheme::Flat).unwrap();
    let occ = p.data_blocks as usize;
    let start = c.live_positions().unwrap()[occ];
    let mut moves = 0;
    let mut seen = start;
    for i in 0..3000u64 {
        c.write((i * 37) % p.data_blocks, request_payload(i, p.block_bytes)).unwrap();
        // reads walk other PosMap blocks and push the OccMap line out
        for k in 0..6 {
            c.read((i * 131 + k * 67) % p.data_blocks).unwrap();
        }
        c.service().unwrap();
        if i % 50 == 49 {
            c.drain().unwrap();
            c.check_consistency().unwrap();
            let now = c.live_positions().unwrap()[occ];
            moves += (now != seen) as u32;
            seen = now;
        }
    }
    assert!(moves > 5, "OccMap block moved only {moves} times");
}
