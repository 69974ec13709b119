//! Library side of the `adbench` command-line tool.

pub mod commands;
pub mod config;
pub mod results;
