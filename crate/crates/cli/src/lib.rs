//! Library half of the `mage` command-line tool.
//!
//! Everything the binary does lives here so the integration and acceptance
//! suites can drive complete workflows in-process: layered run configuration
//! ([`config`]), self-describing run directories with manifests and locks
//! ([`runs`]), and the workflow commands themselves ([`commands`]).

pub mod commands;
pub mod config;
pub mod runs;
