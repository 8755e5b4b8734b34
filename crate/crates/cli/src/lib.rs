//! Batch front end: reads scenario, gain and PSO files, runs one
//! subcommand and writes CSV/JSON artifacts into an output directory.

pub mod commands;
pub mod error;
pub mod output;
pub mod schema;

pub use commands::{run, Command, RunManifest};
pub use error::{CliError, Result};
pub use schema::{load_scenario, GainsFile, PsoFile, ScenarioFile};
