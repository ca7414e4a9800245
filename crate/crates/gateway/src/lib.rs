//! WebSocket gateway for the amava pipeline: configuration, wire protocol
//! and the per-session socket handler.

pub mod config;
pub mod protocol;
pub mod server;
