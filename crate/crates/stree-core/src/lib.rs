//! Tree speculative decoding for diagonal state-space models.
//!
//! The crate packs a prefix token tree into a single sequence, scans it in
//! one pass by accumulating per-token log-decays along root paths, verifies
//! drafted branches against a target model, and restores the recurrent state
//! of the accepted path by replaying cached activations instead of rerunning
//! the model. SSM layers can be mixed with tree-masked attention layers in
//! the same stack. A small cost module fits runtime measurements and turns
//! them into acceptance-rate break-even points.
//!
//! `no_std` + `alloc`; the binary front-end lives in a companion crate.

#![no_std]
#![deny(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod attention;
pub mod cost;
pub mod decode;
pub mod mat;
pub mod math;
pub mod model;
pub mod rng;
pub mod ssm;
pub mod synth;
pub mod tree;

use alloc::string::String;
use core::fmt;

/// Errors shared across the crate.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Malformed tree, mask, or dimension mismatch.
    Structure(String),
    /// A NaN or infinity surfaced at the given packed node.
    NonFinite { node: usize },
    /// Numeric failure outside the scan itself (solver breakdown etc.).
    Numeric(String),
    /// Least-squares fit rejected (rank deficiency, ill-conditioning).
    DegenerateFit(String),
    /// A cache ran out of room.
    Capacity { needed: usize, capacity: usize },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Structure(msg) => write!(f, "structure error: {msg}"),
            Error::NonFinite { node } => write!(f, "non-finite value at packed node {node}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::DegenerateFit(msg) => write!(f, "degenerate fit: {msg}"),
            Error::Capacity { needed, capacity } => {
                write!(f, "capacity exceeded: need {needed}, have {capacity}")
            }
        }
    }
}

impl core::error::Error for Error {}

/// Crate-wide result alias.
pub type Result<T> = core::result::Result<T, Error>;
