//! Command-line front end: JSON experiment configs, the `solve`, `compare`
//! and `check` commands, and the files they write.

pub mod commands;
pub mod config;
pub mod output;

pub use fbsde_core::registry;
