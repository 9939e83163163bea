//! Command implementations behind the `eit` binary.

pub mod commands;
pub mod config;
pub mod data;
pub mod members;
pub mod pipeline;
pub mod run;

pub use config::RunConfig;
pub use run::RunDir;
