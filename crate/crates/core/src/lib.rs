pub mod data;
pub mod encoding;
pub mod error;
pub mod harness;
pub mod model;
pub mod optim;
pub mod par;
pub mod tensor;

pub use error::{Error, Result};
