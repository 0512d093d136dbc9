//! Library face of the command-line front end, so integration tests can
//! drive runs in-process.

pub mod config;
pub mod output;
pub mod runner;

pub use config::{parse_config, preset_config, resolve, ResolvedRun, RunConfig};
pub use output::ResultEnvelope;
pub use runner::CheckKind;
