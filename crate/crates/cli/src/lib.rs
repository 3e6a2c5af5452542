//! Operator surface for the lfd toolkit: configuration, the subcommands and
//! the demonstration-collection service.

pub mod commands;
pub mod config;
pub mod serve;

pub use config::{Config, Provenance, Resolved};
