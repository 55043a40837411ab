//! Support library for the `lamark` binary: run configuration and report
//! documents. Kept as a library so integration tests can assert exact
//! report round-trips.

pub mod config;
pub mod report;
