//! Library side of the `sphgp` command-line tool.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod synthetic;

pub use checkpoint::Checkpoint;
pub use commands::{CliError, CliResult, Env};
pub use config::{DataSource, KernelSpec, RunConfig, SplitMode};
