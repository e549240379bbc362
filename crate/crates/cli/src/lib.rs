//! Library face of the `mosaic` binary: the configuration codec and command
//! implementations, exposed so integration tests can drive them directly.

pub mod commands;
pub mod config;
