//! Library side of the `pasa-attn` binary: NPY tensor files, experiment
//! configuration and subcommands.

pub mod commands;
pub mod config;
pub mod npy;
