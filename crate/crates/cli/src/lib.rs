//! The `decode` command-line pipeline and its HTTP JSON service.
//!
//! Every stage reads and writes a run directory ([`layout::RunDir`]). The
//! `intervene` command and the `/intervene` and `/expert` endpoints both go
//! through [`api::Snapshot`].

pub mod api;
pub mod commands;
pub mod error;
pub mod layout;
pub mod server;

pub use error::{CliError, Result};
