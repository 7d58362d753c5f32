//! Toy flow-matching diffusion transformer: architecture, weights, data,
//! sampler and trainer.

pub mod arch;
pub mod data;
pub mod model;
pub mod sampler;
pub mod train;

pub use arch::{ArchSpec, Variant};
pub use model::{DitModel, GateScales, MmGateScales};
pub use sampler::{euler_sample, SampleRequest, VelocityField};
pub use train::{train, TrainConfig};
