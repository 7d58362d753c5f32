//! Configuration, persistence and the experiment drivers.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod csv;
pub mod gradcheck;
pub mod selftest;

pub use checkpoint::Checkpoint;
pub use commands::{cmd_ablate, cmd_calibrate, cmd_eval, cmd_sweep_scale, cmd_train};
pub use config::RunConfig;
pub use selftest::{run_selftest, SelftestOptions, SelftestReport};
