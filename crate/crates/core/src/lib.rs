//! Differentiable underwater scene reconstruction on a minimal Gaussian
//! splatting renderer.

pub mod adapt;
pub mod attenuation;
pub mod cli;
pub mod diff;
pub mod error;
pub mod field;
pub mod gate;
pub mod io;
pub mod losses;
pub mod renderer;
pub mod scattering;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
