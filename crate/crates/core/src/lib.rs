//! Smart bus transit system: on-bus perception and door logic, RFID
//! ridership, a telemetry store, solar-powered stop displays, and the
//! deterministic simulator that wires them together.

// `!(x > 0.0)` is how range checks here reject NaN along with bad values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod door;
pub mod energy;
pub mod geo;
pub mod metrics;
pub mod netproto;
pub mod perception;
pub mod ridership;
pub mod seed;
pub mod server;
pub mod simkernel;
pub mod stopnode;
