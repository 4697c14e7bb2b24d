use std::fs;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use flatoram::attack::montgomery_attack;
use flatoram::error::{Error, Result};
use flatoram::harness::{run_with, sweep, Engine, Mode, RunOptions, SchemeKind, SweepParam};
use flatoram::params::{parse_size, OramParams};
use flatoram::trace::{gen_trace, parse_trace, GenOptions, TraceKind, TraceOp};

#[derive(Parser)]
#[command(name = "flatoram", version, about = "Write-only ORAM simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Replay one trace and emit a JSON metrics report.
    Simulate(SimulateArgs),
    /// Run one simulation per parameter value.
    Sweep(SweepArgs),
    /// Montgomery-ladder snapshot attack.
    Attack(AttackArgs),
}

#[derive(Args, Clone)]
struct ParamArgs {
    /// key=value parameter file applied before the flags below
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    block_bytes: Option<String>,
    /// DRAM capacity in bytes (K/M/G suffixes allowed)
    #[arg(long)]
    capacity: Option<String>,
    /// Working set in bytes
    #[arg(long)]
    working_set: Option<String>,
    /// Size the working set so the whole layout fills this fraction, e.g. 1/2
    #[arg(long, conflicts_with = "working_set")]
    utilization: Option<String>,
    #[arg(long)]
    plb_bytes: Option<String>,
    #[arg(long)]
    stash: Option<usize>,
    /// Defaults to half the stash capacity
    #[arg(long)]
    stash_low: Option<usize>,
    #[arg(long)]
    period: Option<u64>,
    #[arg(long)]
    latency: Option<u64>,
    #[arg(long)]
    onchip_entries: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ParamArgs {
    fn build(&self) -> Result<OramParams> {
        let mut p = OramParams::default();
        if let Some(path) = &self.config {
            p.apply_config(&fs::read_to_string(path)?)?;
        }
        let size = |s: &str| parse_size(s).ok_or_else(|| Error::Config(format!("bad size `{s}`")));
        if let Some(b) = &self.block_bytes {
            p.block_bytes = size(b)? as usize;
        }
        if let Some(c) = &self.capacity {
            p.physical_slots = size(c)? / p.block_bytes as u64;
        }
        if let Some(w) = &self.working_set {
            p.data_blocks = size(w)? / p.block_bytes as u64;
        }
        if let Some(b) = &self.plb_bytes {
            p.plb_bytes = size(b)? as usize;
        }
        if let Some(s) = self.stash {
            p.stash_capacity = s;
            p.stash_low_watermark = s / 2;
        }
        if let Some(s) = self.stash_low {
            p.stash_low_watermark = s;
        }
        if let Some(t) = self.period {
            p.period = t;
        }
        if let Some(l) = self.latency {
            p.dram_latency = l;
        }
        if let Some(e) = self.onchip_entries {
            p.onchip_entries = e;
        }
        if let Some(s) = self.seed {
            p.rng_seed = s;
        }
        if let Some(u) = &self.utilization {
            p = flatoram::harness::apply_sweep_value(&p, SweepParam::Utilization, u)?;
        }
        p.validate()?;
        Ok(p)
    }
}

#[derive(Args, Clone)]
struct TraceArgs {
    /// Trace file (`R <index>` / `W <index>` lines)
    #[arg(long, conflicts_with = "gen")]
    trace: Option<PathBuf>,
    /// Generator: uniform, sequential, zipf, montgomery, hammer
    #[arg(long)]
    gen: Option<String>,
    /// Generated length (key bits for montgomery)
    #[arg(long, default_value_t = 10_000)]
    len: usize,
    #[arg(long, default_value_t = 0.5)]
    write_fraction: f64,
    #[arg(long, default_value_t = 1.0)]
    zipf: f64,
    #[arg(long, default_value_t = 1)]
    hammer_span: u64,
}

impl TraceArgs {
    fn load(&self, params: &OramParams) -> Result<Vec<TraceOp>> {
        if let Some(path) = &self.trace {
            return parse_trace(&fs::read_to_string(path)?);
        }
        let kind: TraceKind = self.gen.as_deref().unwrap_or("uniform").parse()?;
        let opts = GenOptions {
            blocks: params.data_blocks,
            write_fraction: self.write_fraction,
            zipf_exponent: self.zipf,
            hammer_span: self.hammer_span,
            ..GenOptions::default()
        };
        gen_trace(kind, self.len, params.rng_seed, &opts)
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value = "flat")]
    scheme: String,
    #[command(flatten)]
    params: ParamArgs,
    #[command(flatten)]
    trace: TraceArgs,
    /// Write the report here instead of stdout
    #[arg(long)]
    metrics_out: Option<PathBuf>,
    /// Add write-uniformity, read-invisibility and consistency checks
    #[arg(long)]
    audit: bool,
    /// Dump every DRAM slot to this file after the run
    #[arg(long)]
    snapshot_dump: Option<PathBuf>,
    /// Flip a bit in the slot holding this data block before the run
    #[arg(long)]
    tamper_block: Option<u64>,
}

#[derive(Args)]
struct SweepArgs {
    /// utilization, stash_capacity, latency, plb_bytes or period
    #[arg(long)]
    param: String,
    /// Comma-separated values
    #[arg(long, value_delimiter = ',')]
    values: Vec<String>,
    #[arg(long, default_value = "flat")]
    scheme: String,
    #[command(flatten)]
    params: ParamArgs,
    #[command(flatten)]
    trace: TraceArgs,
    #[arg(long)]
    metrics_out: Option<PathBuf>,
    #[arg(long)]
    csv_out: Option<PathBuf>,
}

#[derive(Args)]
struct AttackArgs {
    /// dram or flat
    #[arg(long, default_value = "flat")]
    mode: String,
    #[arg(long, default_value_t = 512)]
    key_bits: usize,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[command(flatten)]
    params: ParamArgs,
    #[arg(long)]
    metrics_out: Option<PathBuf>,
}

fn emit(text: &str, path: &Option<PathBuf>) -> Result<()> {
    match path {
        Some(p) => fs::write(p, format!("{text}\n"))?,
        None => println!("{text}"),
    }
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let params = a.params.build()?;
    let scheme: SchemeKind = a.scheme.parse()?;
    let trace = a.trace.load(&params)?;
    let mode = if params.period > 0 && scheme != SchemeKind::Dram { Mode::Periodic } else { Mode::Direct };
    let (report, engine) = run_with(&params, scheme, &trace, mode, &RunOptions { audit: a.audit, tamper_block: a.tamper_block })?;
    if let Some(path) = &a.snapshot_dump {
        let dram = match &engine {
            Engine::Oram(c) => c.dram(),
            Engine::Plain(m) => m.dram(),
        };
        dram.dump(BufWriter::new(fs::File::create(path)?))?;
    }
    emit(&report.to_json(), &a.metrics_out)
}

fn run_sweep(a: SweepArgs) -> Result<()> {
    let param: SweepParam = a.param.parse()?;
    let params = a.params.build()?;
    let scheme: SchemeKind = a.scheme.parse()?;
    let mode = if params.period > 0 { Mode::Periodic } else { Mode::Direct };
    let trace = a.trace.clone();
    let report = sweep(param, &a.values, &params, scheme, mode, |p| trace.load(p))?;
    if let Some(path) = &a.csv_out {
        fs::write(path, report.to_csv())?;
    }
    emit(&serde_json::to_string_pretty(&report).expect("report serializes"), &a.metrics_out)
}

fn attack(a: AttackArgs) -> Result<()> {
    let scheme = match a.mode.as_str() {
        "dram" => SchemeKind::Dram,
        "flat" => SchemeKind::Flat,
        "hive" => SchemeKind::Hive,
        m => return Err(Error::Config(format!("unknown attack mode `{m}`"))),
    };
    let mut params = a.params.build()?;
    if a.params.capacity.is_none() && a.params.working_set.is_none() && a.params.utilization.is_none() {
        params.physical_slots = 1 << 12;
        params = params.with_utilization(1, 2)?;
    }
    let report = montgomery_attack(&params, scheme, a.key_bits, a.trials, params.rng_seed)?;
    emit(&serde_json::to_string_pretty(&report).expect("report serializes"), &a.metrics_out)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Sweep(a) => run_sweep(a),
        Command::Attack(a) => attack(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Integrity { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
