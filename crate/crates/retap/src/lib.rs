//! File formats, configuration, evaluation grids and the command-line
//! surface on top of `retap-core`.

pub mod cli;
pub mod commands;
pub mod config;
pub mod corpus;
pub mod eval;
pub mod registry;
pub mod report;
pub mod store;
pub mod workspace;

pub use config::RunConfig;
pub use workspace::Workspace;
