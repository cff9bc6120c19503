pub mod adapt;
pub mod codec;
pub mod coder;
pub mod csi;
pub mod error;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod prob;
pub mod sarpft;
pub mod scan;

pub use error::{Error, Result};
