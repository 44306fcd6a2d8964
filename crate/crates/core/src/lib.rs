//! Key-transparency log and a discrete-event simulator for detecting fake-key
//! attacks by a malicious key server.

pub mod accounting;
pub mod client;
pub mod crypto;
pub mod id;
pub mod metrics;
pub mod predict;
pub mod scenario;
pub mod server;
pub mod simnet;
pub mod tlog;
