//! Deterministic discrete-event simulation of clients, server and network.

pub mod anonymity;
pub mod churn;
pub mod clock;
pub mod engine;
pub mod topology;
