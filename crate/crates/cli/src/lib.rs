//! File formats, configuration, corpus handling, the benchmark harness and
//! the command line around `fmdiff-core`.

pub mod attack;
pub mod bench;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod io;
