//! Command-line front end: basis cache, pipeline commands and renderers.

pub mod cache;
pub mod commands;
pub mod error;
pub mod render;
