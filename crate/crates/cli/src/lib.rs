//! Library surface of the experiment driver (shared by the binary and the
//! acceptance suite).

pub mod config;
pub mod manifest;
pub mod pipeline;
