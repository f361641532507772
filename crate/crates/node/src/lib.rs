//! Node daemon, door server front end and command-line client for the
//! marketplace.

pub mod api;
pub mod cli;
pub mod client;
pub mod config;
pub mod daemon;
pub mod door_http;
pub mod keys;
pub mod transport;
