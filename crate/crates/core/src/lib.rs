//! Deterministic simulation core for an adaptive sharded ledger.
//!
//! Everything in this crate is `no_std` + `alloc`, single-threaded and
//! driven by a seeded RNG and a virtual microsecond clock, so every run is
//! bit-for-bit reproducible from its seed.
#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod consensus;
pub mod engine;
pub mod ledger;
pub mod merkle;
pub mod shardmgr;
pub mod simnet;
pub mod syncdispute;
pub mod thresh;
pub mod xshard;
