//! Library surface of the command-line harness, kept separate from `main`
//! so integration tests can drive the commands in-process.

pub mod commands;
pub mod report;
pub mod runner;
