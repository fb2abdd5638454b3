//! Multi-task low-rank adaptation with a customized gate control layout.
//!
//! A frozen base network carries adapter layers whose low-rank update is
//! split into task-common and task-specific experts. A gate that only sees
//! the task id weights the experts, which means every task collapses to a
//! single static weight matrix per layer after training.

pub mod adapters;
pub mod checkpoint;
pub mod error;
pub mod exec;
pub mod gate;
pub mod merge;
pub mod metrics;
pub mod model;
pub mod taskdata;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use exec::Exec;
