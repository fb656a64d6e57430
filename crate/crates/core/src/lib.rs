//! Bit-exact simulation of approximate 8-bit multipliers, their
//! control-variate correction, a systolic MAC array built from them, and
//! quantized CNN inference on top.

pub mod axmult;
pub mod covar;
pub mod error;
pub mod fixed;
pub mod nn;
pub mod stats;
pub mod systolic;

pub use axmult::{AxMultConfig, MultKind};
pub use error::{Error, Result};
