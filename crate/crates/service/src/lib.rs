//! Command line and HTTP front end of the decoder.

pub mod api;
pub mod cli;
pub mod commands;
