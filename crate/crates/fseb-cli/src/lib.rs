//! Library surface of the `fseb` experiment runner.
//!
//! The binary is a thin wrapper over these modules; they are exposed so
//! integration tests (and downstream tooling) can load configs, drive
//! runs in-process, and parse result documents.

pub mod config;
pub mod error;
pub mod report;
pub mod runner;
