//! File formats, command line and suite runners for deep conditional
//! transformation models. The modelling itself lives in `ctmflow-core`.

pub mod cli;
pub mod config;
pub mod error;
pub mod io;
pub mod modelfile;
pub mod predict;
pub mod suite;

pub use config::ModelConfig;
pub use error::{CliError, Result};
pub use modelfile::ModelFile;
