//! Experiment harness: scenario files, grid-cell runs, presets and the
//! command-line front end used by the `bfnet` binary.

pub mod commands;
pub mod presets;
pub mod run;
pub mod scenario;

pub use run::{run, RunManifest, RunOptions, RunOutput};
pub use scenario::Scenario;
