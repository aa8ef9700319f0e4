//! Benchmarks and command-line front end for the ring-based storage engine
//! and the network shuffle. Every command produces [`rows::Row`]s that are
//! printed as versioned CSV or JSON.

pub mod cli;
pub mod commands;
pub mod doctor;
mod error;
pub mod net;
pub mod nop;
pub mod rows;
pub mod storage;
pub mod util;

pub use error::{BenchError, Result};
pub use rows::{Row, Rows, Value};
