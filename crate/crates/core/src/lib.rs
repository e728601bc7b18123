pub mod autodiff;
pub mod codec;
pub mod data;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod guide;
pub mod metrics;
pub mod mixture;
pub mod pipeline;

pub use error::{Error, Result};

#[cfg(test)]
mod test_util;
