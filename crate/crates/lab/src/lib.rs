//! Files, configuration, the training driver and the command line for the
//! retrieval lab. Computation lives in `zslab_core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod driver;
pub mod error;
pub mod format;

pub use error::{FormatError, LabError, Result};
