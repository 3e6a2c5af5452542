//! Learning-from-demonstration toolkit: recurrent mixture-density
//! controllers trained on tabletop demonstrations.

pub mod demos;
pub mod error;
pub mod mdn;
pub mod runtime;
pub mod nn;
pub mod sim;
pub mod tensor;
pub mod training;
pub mod wire;

pub use error::{Error, Result};
