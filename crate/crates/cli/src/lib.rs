//! Configuration, execution and output of HBVM experiments.

pub mod config;
pub mod output;
pub mod runner;
