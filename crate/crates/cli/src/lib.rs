//! File formats and commands behind the `treeagg` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;
