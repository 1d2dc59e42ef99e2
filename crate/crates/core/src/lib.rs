#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod em;
pub mod error;
pub mod eval;
pub mod fixed_tree;
pub mod gaussian;
pub mod graph;
pub mod init;
pub mod kernel;
pub mod linalg;
pub mod mixture;
mod math;
pub mod seed;
pub mod selection;
pub mod simulate;
#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
