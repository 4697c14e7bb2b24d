//! Write-only oblivious RAM simulator: a controller that hides the
//! locations of memory writes behind random re-placement, an
//! inverse-map baseline, an instrumented DRAM model and an adversary harness.

pub mod attack;
pub mod controller;
pub mod crypto;
pub mod error;
pub mod harness;
pub mod hive;
pub mod memory;
pub mod occmap;
pub mod params;
pub mod posmap;
pub mod stats;
pub mod trace;

pub use controller::{Controller, ControllerStats, Request, Scheme, TickOutcome};
pub use error::{Error, Result};
pub use params::{layout, AddressLayout, BlockPayload, OramParams, PhysicalPos, Region, UnifiedAddr};
