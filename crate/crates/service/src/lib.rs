//! CLI and HTTP service over a workflow store.

pub mod api;
pub mod cli;
pub mod config;
pub mod error;
pub mod jobs;
pub mod session;

pub use error::ServiceError;
pub use session::{Access, Session};
