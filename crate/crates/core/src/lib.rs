pub mod affine;
pub mod autodiff;
pub mod checks;
pub mod config;
pub mod error;
pub mod fpenv;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod pipeline;
pub mod rvf;
pub mod slices;
pub mod synth;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
