//! Command line front end and local HTTP service for the geoflow pipeline.

pub mod cli;
pub mod commands;
pub mod service;
pub mod slices;

pub use cli::{run, Cli};
