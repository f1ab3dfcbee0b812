pub mod backbones;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcore;
pub mod knowledge;
pub mod metafusion;
pub mod trainer;

pub use error::{Error, Result};
