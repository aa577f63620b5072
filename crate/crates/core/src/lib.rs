//! Deterministic discrete-event simulator for LLM inference serving.

pub mod comm;
pub mod config;
pub mod costmodel;
pub mod kernel;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod request;
pub mod scenario;
pub mod sched;
pub mod sim;
pub mod sweep;
pub mod time;
pub mod workload;

pub use costmodel::{BatchPlan, CostModel, HardwareSpec, Roofline};
pub use model::ModelSpec;
pub use sim::{RunReport, SimSetup, Simulation};
pub use time::{SimDuration, SimTime};
