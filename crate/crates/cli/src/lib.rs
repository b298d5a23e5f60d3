//! Library side of the `paglab` command-line tool.

pub mod boundary;
pub mod commands;
pub mod config;
