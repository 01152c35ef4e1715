//! Reflex plane simulation and component library.

pub mod classifier;
pub mod monitors;
pub mod raftstate;
pub mod reflexplane;
pub mod scenario;
pub mod simnet;
pub mod telemetry;
