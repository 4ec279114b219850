//! Deterministic simulator for federated learning under carbon constraints.
//!
//! Two training protocols are provided: parameter-server federated
//! averaging ([`protocol_fa`]) and decentralized consensus training over a
//! gossip topology ([`protocol_cfa`]). Model updates can be compressed with
//! top-t sparsification followed by unbiased probabilistic quantization
//! ([`compression`]), and every round is charged against per-device energy
//! models and regional carbon intensities ([`energy`]). The [`harness`]
//! module runs a configuration to a stopping condition and expands sweep
//! grids.
//!
//! The crate is `no_std` + `alloc`; all IO, file formats and the CLI live in
//! the companion `flcarbon-cli` crate.

#![cfg_attr(not(any(test, feature = "std")), no_std)]

extern crate alloc;

pub mod compression;
pub mod energy;
pub mod error;
pub mod harness;
pub mod model;
pub mod params;
pub mod protocol_cfa;
pub mod protocol_fa;
pub mod rng;

pub use error::{Error, Result};
pub use params::ParameterVector;
