//! Trace replay, metrics and parameter sweeps.

use std::collections::BTreeMap;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::controller::{Controller, Request, Scheme, TickOutcome};
use crate::crypto::SealedBlock;
use crate::error::{Error, Result};
use crate::memory::{Dram, DramStats};
use crate::params::{BlockPayload, OramParams, PhysicalPos};
use crate::stats::{chi_square_uniform, ChiSquare};
use crate::trace::{OpKind, TraceOp};

/// Engine selected for a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeKind {
    Flat,
    Hive,
    /// Insecure pass-through: block `a` always lives in slot `a`.
    Dram,
}

impl FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flat" => Ok(Self::Flat),
            "hive" => Ok(Self::Hive),
            "dram" => Ok(Self::Dram),
            _ => Err(Error::Config(format!("unknown scheme `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Requests are served as they arrive; the controller makes one eviction
    /// attempt after each.
    Direct,
    /// One ORAM operation per period.
    Periodic,
}

/// Insecure baseline memory: one DRAM access per request, no maps.
pub struct PlainMemory {
    dram: Dram,
    block_bytes: usize,
    requests: u64,
}

impl PlainMemory {
    pub fn new(params: &OramParams) -> Result<Self> {
        params.validate()?;
        let slot_bytes = SealedBlock::encoded_len(params.block_bytes);
        let mut dram = Dram::new(params.data_blocks, slot_bytes, params.dram_latency);
        let zero = vec![0u8; slot_bytes];
        let blank = SealedBlock::decode(&zero);
        for a in 0..params.data_blocks {
            dram.write(PhysicalPos(a), &blank)?;
        }
        dram.reset_stats();
        Ok(Self { dram, block_bytes: params.block_bytes, requests: 0 })
    }

    pub fn read(&mut self, index: u64) -> Result<BlockPayload> {
        self.requests += 1;
        let s = self.dram.read(PhysicalPos(index))?;
        BlockPayload::from_bytes(s.body[s.body.len() - self.block_bytes..].to_vec(), self.block_bytes)
    }

    pub fn write(&mut self, index: u64, payload: BlockPayload) -> Result<()> {
        self.requests += 1;
        let mut raw = vec![0u8; self.dram.slot_bytes()];
        let off = raw.len() - self.block_bytes;
        raw[off..].copy_from_slice(payload.as_bytes());
        self.dram.write(PhysicalPos(index), &SealedBlock::decode(&raw))
    }

    pub fn dram(&self) -> &Dram {
        &self.dram
    }

    pub fn dram_mut(&mut self) -> &mut Dram {
        &mut self.dram
    }
}

/// Either engine behind one interface.
pub enum Engine {
    Oram(Box<Controller>),
    Plain(PlainMemory),
}

impl Engine {
    pub fn new(params: &OramParams, scheme: SchemeKind) -> Result<Self> {
        Ok(match scheme {
            SchemeKind::Flat => Engine::Oram(Box::new(Controller::new(params.clone(), Scheme::Flat)?)),
            SchemeKind::Hive => Engine::Oram(Box::new(Controller::new(params.clone(), Scheme::Hive)?)),
            SchemeKind::Dram => Engine::Plain(PlainMemory::new(params)?),
        })
    }

    pub fn read(&mut self, index: u64) -> Result<BlockPayload> {
        match self {
            Engine::Oram(c) => c.read(index),
            Engine::Plain(m) => m.read(index),
        }
    }

    pub fn write(&mut self, index: u64, payload: BlockPayload) -> Result<()> {
        match self {
            Engine::Oram(c) => c.write(index, payload),
            Engine::Plain(m) => m.write(index, payload),
        }
    }

    /// Makes room in the stash before a request.
    pub fn admit(&mut self) -> Result<()> {
        if let Engine::Oram(c) = self {
            c.admit()?;
        }
        Ok(())
    }

    /// Work the controller does between requests in direct mode.
    pub fn service(&mut self) -> Result<()> {
        if let Engine::Oram(c) = self {
            c.service()?;
        }
        Ok(())
    }

    pub fn dram(&self) -> &Dram {
        match self {
            Engine::Oram(c) => c.dram(),
            Engine::Plain(m) => m.dram(),
        }
    }

    pub fn dram_mut(&mut self) -> &mut Dram {
        match self {
            Engine::Oram(c) => c.dram_mut(),
            Engine::Plain(m) => m.dram_mut(),
        }
    }

    /// Slots writes may target uniformly; the baseline's inverse region and
    /// anything beyond is excluded.
    pub fn random_region(&self) -> u64 {
        match self {
            Engine::Oram(c) => c.layout().physical_slots,
            Engine::Plain(m) => m.dram.len(),
        }
    }
}

/// Payload written by the `i`th request of a run: distinct per request.
pub fn request_payload(i: u64, block_bytes: usize) -> BlockPayload {
    let mut b = vec![0u8; block_bytes];
    let n = 8.min(block_bytes);
    b[..n].copy_from_slice(&(i + 1).to_le_bytes()[..n]);
    BlockPayload::from_bytes(b, block_bytes).expect("sized to block")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    /// Writes inside the random region, excluding initialization.
    pub write_samples: usize,
    pub uniformity: Option<ChiSquare>,
    /// DRAM writes issued while serving read requests in direct mode.
    pub writes_during_reads: u64,
    /// Quiescent consistency after draining the stash.
    pub consistent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub scheme: SchemeKind,
    pub mode: Mode,
    pub params: OramParams,
    pub requests: u64,
    pub reads: u64,
    pub writes: u64,
    pub dram_reads: u64,
    pub dram_writes: u64,
    pub accesses_per_request: f64,
    pub plb_hits: u64,
    pub plb_misses: u64,
    pub plb_hit_rate: f64,
    pub stash_peak: usize,
    pub stash_peak_internal: usize,
    pub background_eviction_events: u64,
    pub evictions: u64,
    pub eviction_attempts: u64,
    pub collisions: u64,
    pub collision_rate: f64,
    pub mean_attempts: f64,
    pub attempts_histogram: BTreeMap<u32, u64>,
    pub decoy_writes: u64,
    pub inverse_writebacks: u64,
    pub counter_overflows: u64,
    pub init_attempts: u64,
    pub simulated_cycles: u64,
    pub ticks: u64,
    /// Periodic mode: number of ticks whose snapshot diff had each size.
    pub period_diff_sizes: BTreeMap<usize, u64>,
    pub audit: Option<AuditReport>,
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl MetricsReport {
    fn collect(engine: &Engine, scheme: SchemeKind, mode: Mode, params: &OramParams, counts: (u64, u64, u64)) -> Self {
        let DramStats { reads: dram_reads, writes: dram_writes } = engine.dram().stats();
        let (requests, reads, writes) = counts;
        let mut r = MetricsReport {
            scheme,
            mode,
            params: params.clone(),
            requests,
            reads,
            writes,
            dram_reads,
            dram_writes,
            accesses_per_request: ratio(dram_reads + dram_writes, requests),
            plb_hits: 0,
            plb_misses: 0,
            plb_hit_rate: 0.0,
            stash_peak: 0,
            stash_peak_internal: 0,
            background_eviction_events: 0,
            evictions: 0,
            eviction_attempts: 0,
            collisions: 0,
            collision_rate: 0.0,
            mean_attempts: 0.0,
            attempts_histogram: BTreeMap::new(),
            decoy_writes: 0,
            inverse_writebacks: 0,
            counter_overflows: 0,
            init_attempts: 0,
            simulated_cycles: engine.dram().clock(),
            ticks: 0,
            period_diff_sizes: BTreeMap::new(),
            audit: None,
        };
        if let Engine::Oram(c) = engine {
            let s = c.stats();
            let plb = c.plb();
            r.plb_hits = plb.hits;
            r.plb_misses = plb.misses;
            r.plb_hit_rate = ratio(plb.hits, plb.hits + plb.misses);
            r.stash_peak = s.stash_peak;
            r.stash_peak_internal = s.stash_peak_internal;
            r.background_eviction_events = s.background_eviction_events;
            r.evictions = s.evictions;
            r.eviction_attempts = s.eviction_attempts;
            r.collisions = s.collisions;
            r.collision_rate = ratio(s.collisions, s.eviction_attempts);
            r.mean_attempts = ratio(s.attempts_histogram.iter().map(|(k, v)| *k as u64 * v).sum(), s.evictions);
            r.attempts_histogram = s.attempts_histogram.clone();
            r.decoy_writes = s.decoy_writes;
            r.inverse_writebacks = s.inverse_writebacks;
            r.counter_overflows = s.counter_overflows;
            r.init_attempts = s.init_attempts;
            r.ticks = s.ticks;
        }
        r
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Options for a single run.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub audit: bool,
    /// Flip one bit of the slot holding this data block before replaying.
    pub tamper_block: Option<u64>,
}

/// Replays `trace` through a fresh engine and reports.
pub fn run(params: &OramParams, scheme: SchemeKind, trace: &[TraceOp], mode: Mode) -> Result<MetricsReport> {
    run_with(params, scheme, trace, mode, &RunOptions::default()).map(|(r, _)| r)
}

/// Like [`run`], also returning the engine for inspection or dumping.
pub fn run_with(
    params: &OramParams,
    scheme: SchemeKind,
    trace: &[TraceOp],
    mode: Mode,
    opts: &RunOptions,
) -> Result<(MetricsReport, Engine)> {
    if mode == Mode::Periodic && params.period == 0 {
        return Err(Error::Config("periodic mode needs period > 0".into()));
    }
    if mode == Mode::Periodic && scheme == SchemeKind::Dram {
        return Err(Error::Config("periodic mode needs an ORAM scheme".into()));
    }
    let mut engine = Engine::new(params, scheme)?;
    let limit = match &engine {
        Engine::Oram(c) => c.params().data_blocks,
        Engine::Plain(_) => params.data_blocks,
    };
    if let Some(op) = trace.iter().find(|op| op.addr >= limit) {
        return Err(Error::AddressOutOfRange { addr: op.addr, limit });
    }
    if let Some(a) = opts.tamper_block {
        let pos = match &engine {
            Engine::Oram(c) => *c.live_positions()?.get(a as usize).ok_or(Error::AddressOutOfRange { addr: a, limit })?,
            Engine::Plain(_) => PhysicalPos(a),
        };
        engine.dram_mut().tamper(pos, 8 * 40)?;
    }
    let region = engine.random_region();
    let track = opts.audit || mode == Mode::Periodic;
    if track {
        engine.dram_mut().start_write_log();
    }
    let mut samples: Vec<u64> = Vec::new();
    let mut writes_during_reads = 0u64;
    let mut diff_sizes: BTreeMap<usize, u64> = BTreeMap::new();
    let (mut reads, mut writes) = (0u64, 0u64);
    let bb = params.block_bytes;
    for (i, op) in trace.iter().enumerate() {
        match mode {
            Mode::Direct => {
                engine.admit()?;
                if opts.audit {
                    samples.extend(engine.dram_mut().take_write_log().into_iter().filter(|&p| p < region));
                }
                match op.kind {
                    OpKind::Read => {
                        reads += 1;
                        engine.read(op.addr)?;
                        if opts.audit {
                            writes_during_reads += engine.dram_mut().take_write_log().len() as u64;
                        }
                    }
                    OpKind::Write => {
                        writes += 1;
                        engine.write(op.addr, request_payload(i as u64, bb))?;
                    }
                }
                engine.service()?;
                if opts.audit {
                    samples.extend(engine.dram_mut().take_write_log().into_iter().filter(|&p| p < region));
                }
            }
            Mode::Periodic => {
                let Engine::Oram(c) = &mut engine else { unreachable!() };
                let mut req = Some(match op.kind {
                    OpKind::Read => Request::Read(op.addr),
                    OpKind::Write => Request::Write(op.addr, request_payload(i as u64, bb)),
                });
                loop {
                    let out = c.tick_periodic(req.take())?;
                    let log = c.dram_mut().take_write_log();
                    let mut distinct: Vec<u64> = log.iter().copied().filter(|&p| p < region).collect();
                    samples.extend(distinct.iter().copied());
                    distinct.sort_unstable();
                    distinct.dedup();
                    *diff_sizes.entry(distinct.len()).or_default() += 1;
                    match out {
                        TickOutcome::Deferred(r) => req = r,
                        _ => break,
                    }
                }
                match op.kind {
                    OpKind::Read => reads += 1,
                    OpKind::Write => writes += 1,
                }
            }
        }
    }
    let mut report = MetricsReport::collect(&engine, scheme, mode, params, (reads + writes, reads, writes));
    report.period_diff_sizes = diff_sizes;
    if opts.audit {
        let uniformity = if scheme == SchemeKind::Dram { None } else { chi_square_uniform(&samples, region, 64).ok() };
        let consistent = match &mut engine {
            Engine::Oram(c) => c.drain().and_then(|_| c.check_consistency()).is_ok(),
            Engine::Plain(_) => true,
        };
        report.audit = Some(AuditReport { write_samples: samples.len(), uniformity, writes_during_reads, consistent });
    }
    Ok((report, engine))
}

/// Parameters a sweep may vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Utilization,
    StashCapacity,
    Latency,
    PlbBytes,
    Period,
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "utilization" => Self::Utilization,
            "stash_capacity" | "stash" => Self::StashCapacity,
            "latency" | "dram_latency" => Self::Latency,
            "plb_bytes" | "plb" => Self::PlbBytes,
            "period" => Self::Period,
            _ => return Err(Error::BadParam(s.to_string())),
        })
    }
}

fn parse_fraction(v: &str) -> Result<(u64, u64)> {
    let bad = || Error::Config(format!("bad utilization `{v}`"));
    if let Some((n, d)) = v.split_once('/') {
        let n = n.trim().parse().map_err(|_| bad())?;
        let d = d.trim().parse().map_err(|_| bad())?;
        if d == 0 || n >= d {
            return Err(bad());
        }
        return Ok((n, d));
    }
    let f: f64 = v.trim().parse().map_err(|_| bad())?;
    if !(0.0..1.0).contains(&f) || f == 0.0 {
        return Err(bad());
    }
    Ok(((f * 1_000_000.0).round() as u64, 1_000_000))
}

/// Applies one sweep value on top of `base`.
pub fn apply_sweep_value(base: &OramParams, param: SweepParam, value: &str) -> Result<OramParams> {
    let mut p = base.clone();
    match param {
        SweepParam::Utilization => {
            let (n, d) = parse_fraction(value)?;
            p = p.with_utilization(n, d)?;
        }
        SweepParam::StashCapacity => {
            p.set("stash_capacity", value)?;
            p.stash_low_watermark = p.stash_capacity / 2;
        }
        SweepParam::Latency => p.set("dram_latency", value)?,
        SweepParam::PlbBytes => p.set("plb_bytes", value)?,
        SweepParam::Period => p.set("period", value)?,
    }
    Ok(p)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub value: String,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub param: SweepParam,
    pub points: Vec<SweepPoint>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "value,requests,dram_reads,dram_writes,accesses_per_request,plb_hit_rate,stash_peak,background_eviction_events,mean_attempts,collision_rate,simulated_cycles\n",
        );
        for pt in &self.points {
            let r = &pt.report;
            out.push_str(&format!(
                "{},{},{},{},{:.6},{:.6},{},{},{:.6},{:.6},{}\n",
                pt.value,
                r.requests,
                r.dram_reads,
                r.dram_writes,
                r.accesses_per_request,
                r.plb_hit_rate,
                r.stash_peak,
                r.background_eviction_events,
                r.mean_attempts,
                r.collision_rate,
                r.simulated_cycles
            ));
        }
        out
    }
}

/// Independent runs per value, in parallel. Every point uses `base`'s seed.
/// The trace is produced per point so address ranges can follow the
/// point's block count.
pub fn sweep<F>(param: SweepParam, values: &[String], base: &OramParams, scheme: SchemeKind, mode: Mode, trace_for: F) -> Result<SweepReport>
where
    F: Fn(&OramParams) -> Result<Vec<TraceOp>> + Sync,
{
    let points = values
        .par_iter()
        .map(|v| {
            let p = apply_sweep_value(base, param, v)?;
            let trace = trace_for(&p)?;
            let mode = if param == SweepParam::Period && p.period > 0 { Mode::Periodic } else { mode };
            Ok(SweepPoint { value: v.clone(), report: run(&p, scheme, &trace, mode)? })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepReport { param, points })
}
