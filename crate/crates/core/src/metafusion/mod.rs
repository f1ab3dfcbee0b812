//! Knowledge-driven meta layers and their fusion with a backbone.

mod fusion;
mod hyper;

pub use fusion::*;
pub use hyper::*;
