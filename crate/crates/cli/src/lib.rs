//! Command implementations and the HTTP generation service.

pub mod commands;
pub mod service;
