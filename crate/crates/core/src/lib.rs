pub mod cli;
mod codec;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod grft;
pub mod infer;
pub mod model;
pub mod numerics;
pub mod train;

pub use error::{Error, Result};
