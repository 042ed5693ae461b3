//! Generating-extension specializer for a small basic-block IR with paged
//! memory, using copy-on-write state snapshots and incremental Rabin
//! fingerprints to detect repeated specialization states.

pub mod bench;
pub mod bta;
pub mod cli;
pub mod fingerprint;
pub mod ir;
pub mod residual;
pub mod specializer;
pub mod statestore;
