use thiserror::Error;

/// Everything that can go wrong while configuring or driving an ORAM instance.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("slot {pos} out of range (memory has {len} slots)")]
    OutOfRange { pos: u64, len: u64 },

    #[error("read of uninitialized slot {0}")]
    ReadUninitialized(u64),

    #[error("logical address {addr} out of range ({limit} blocks)")]
    AddressOutOfRange { addr: u64, limit: u64 },

    /// Authenticity or freshness check failed on a block read from memory.
    #[error("integrity violation at slot {pos}")]
    Integrity { pos: u64 },

    #[error("snapshots were taken from different memory instances")]
    SnapshotMismatch,

    #[error("line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("unknown trace kind `{0}`")]
    BadKind(String),

    #[error("unknown sweep parameter `{0}`")]
    BadParam(String),

    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    /// Background eviction failed to bring the stash below its low watermark.
    /// This happens when the PLB is too small to absorb occupancy-map updates
    /// and every eviction dirties more blocks than it retires.
    #[error("stash did not drain after {evictions} evictions (stash size {stash})")]
    StashDiverged { evictions: u64, stash: usize },

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
