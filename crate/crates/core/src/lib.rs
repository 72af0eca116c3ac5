pub mod env;
pub mod error;
pub mod guidance;
pub mod harness;
pub mod nn;
pub mod replay;
pub mod td3;

pub use error::{Error, Result};
