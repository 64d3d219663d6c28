//! Command-line workflows and the HTTP inspection service.

pub mod config;
pub mod service;
pub mod workflow;
