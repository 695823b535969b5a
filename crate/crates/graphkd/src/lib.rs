//! File formats, configuration and the experiment pipeline around
//! `graphkd-core`.

pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod dataset;
pub mod error;
pub mod pipeline;
pub mod runlog;

pub use config::Config;
pub use error::{Error, Result};
pub use pipeline::Workspace;
