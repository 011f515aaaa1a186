//! Command-line companion to `stree-core`: file formats, wall-clock
//! benchmarks, and randomized verification suites. The `stree` binary is a
//! thin dispatcher over these modules.

pub mod bench;
pub mod formats;
pub mod suites;
