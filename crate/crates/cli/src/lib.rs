//! Pipeline orchestration for `superad`: bank building, scoring, evaluation,
//! reports and overlays over a directory tree of feature files.

pub mod dataset;
pub mod error;
pub mod pipeline;
pub mod render;
pub mod report;
pub mod settings;

pub use error::{CliError, Result};
pub use settings::{Overrides, Settings};
