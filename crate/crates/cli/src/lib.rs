//! Command implementations behind the `refeed` binary.

pub mod commands;
pub mod config;
