//! Pipeline orchestration behind the `inpaint` binary.

pub mod commands;
pub mod config;
pub mod gradsuite;
pub mod pipeline;
