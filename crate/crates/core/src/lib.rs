//! Trajectory simulation, blur synthesis, deconvolution, coded exposure and
//! evaluation metrics for motion-trajectory estimation.

pub mod blursim;
pub mod cep;
pub mod deblur;
pub mod error;
pub mod fft;
pub mod io;
pub mod metrics;
pub mod seed;
pub mod trajkit;

pub use error::{Error, Result};
