//! Command-line front end: data generation, training, retrieval runs,
//! evaluation and the review gallery backend.

pub mod commands;
pub mod config;
pub mod error;
pub mod labels;
pub mod pipeline;
pub mod runs;
pub mod server;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
