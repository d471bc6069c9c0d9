pub mod calibrator;
pub mod design;
pub mod emulator;
pub mod error;
pub mod kernels;
pub mod linalg;
pub mod mcmc;
pub mod pipeline;
pub mod rng;
pub mod scoring;
pub mod simulators;
pub mod ssm;
pub mod studies;

pub use error::{Error, Result};
