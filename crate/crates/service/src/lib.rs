//! Networked nodes: the HTTP data server with its stop broadcast socket, and
//! real-time bus and stop node loops.
//!
//! Unlike the simulator these run on wall-clock time and real sockets, so
//! their interleavings are not reproducible.

use std::time::{SystemTime, UNIX_EPOCH};

use thiserror::Error;

pub mod busnode;
pub mod server;
pub mod stopnode;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Store(#[from] smartbus_core::server::StoreError),
    #[error(transparent)]
    Transport(#[from] smartbus_core::netproto::TransportError),
    #[error(transparent)]
    Sim(#[from] smartbus_core::simkernel::SimError),
    #[error("http: {0}")]
    Http(#[from] reqwest::Error),
    #[error("{0}")]
    Config(String),
}

/// Wall-clock milliseconds since the Unix epoch.
pub fn now_ms() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as i64)
}
