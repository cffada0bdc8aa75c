pub mod attacks;
pub mod calibration;
pub mod defense;
pub mod error;
pub mod fusion;
pub mod heatmap;
pub mod lab;
pub mod learn;
pub mod metrics;
pub mod par;
pub mod tensor;
pub mod toy;
pub mod trace;

pub use error::{Error, Result};
pub use tensor::{Image, Real, Tensor};
