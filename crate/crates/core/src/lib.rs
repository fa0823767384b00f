pub mod datagen;
pub mod diffcore;
pub mod error;
pub mod evalharness;
pub mod imageops;
pub mod objectives;
pub mod policy;
pub mod records;
pub mod trainer;
pub mod verification;

pub use error::{Error, Result};
